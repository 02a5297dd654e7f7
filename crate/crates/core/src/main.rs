fn main() {
    std::process::exit(ouruin::cli::run(std::env::args_os()));
}
