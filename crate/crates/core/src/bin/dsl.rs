fn main() {
    std::process::exit(dsl_core::cli::run_cli(std::env::args_os()));
}
