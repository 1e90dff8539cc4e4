fn main() {
    std::process::exit(wsed::cli::run(std::env::args_os()));
}
