pub mod chisq;
pub mod cli;
pub mod estimators;
pub mod glm;
pub mod harness;
pub mod rng;
pub mod scenarios;
pub mod selection;
pub mod tabular;

