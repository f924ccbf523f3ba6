fn main() {
    std::process::exit(mlloo::cli::run_cli(std::env::args_os()));
}
