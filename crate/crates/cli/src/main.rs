fn main() {
    std::process::exit(stepnet_cli::dispatch(std::env::args_os()));
}
