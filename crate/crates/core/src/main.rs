fn main() {
    std::process::exit(fitmatch::cli::run(std::env::args_os()));
}
