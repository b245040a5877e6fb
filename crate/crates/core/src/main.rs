fn main() {
    std::process::exit(abci::cli::run_command(std::env::args_os()));
}
