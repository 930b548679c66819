fn main() {
    std::process::exit(bran::cli::run());
}
