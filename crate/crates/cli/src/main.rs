fn main() {
    std::process::exit(mganet_cli::dispatch(std::env::args_os()));
}
