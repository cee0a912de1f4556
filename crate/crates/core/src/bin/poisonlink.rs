fn main() {
    std::process::exit(poisonlink::cli::run_cli(std::env::args_os()));
}
