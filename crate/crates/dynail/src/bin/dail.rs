fn main() {
    std::process::exit(dynail::cli::run());
}
