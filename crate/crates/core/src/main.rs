fn main() {
    std::process::exit(late_core::cli::run_from(std::env::args_os()));
}
