fn main() {
    std::process::exit(ugpress::cli::run(std::env::args_os()));
}
