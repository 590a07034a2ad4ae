fn main() {
    std::process::exit(flowrag_cli::run_cli(std::env::args_os()));
}
