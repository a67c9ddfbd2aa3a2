fn main() {
    std::process::exit(rothp::cli::run_cli(std::env::args_os()));
}
