fn main() {
    std::process::exit(mgbp::cli::run_from_env());
}
