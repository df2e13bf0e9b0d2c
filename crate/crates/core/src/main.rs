fn main() {
    std::process::exit(effnas::harness::cli::run_from(std::env::args_os()));
}
