fn main() {
    std::process::exit(rareps::cli::run());
}
