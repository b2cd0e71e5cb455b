fn main() {
    std::process::exit(symnce::cli::run(std::env::args_os()));
}
