fn main() {
    std::process::exit(emorag::cli::run_from_args(std::env::args_os()));
}
