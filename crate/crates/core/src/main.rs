fn main() {
    std::process::exit(momoe::cli::run(std::env::args_os()));
}
