fn main() {
    std::process::exit(rbsde::cli::run());
}
