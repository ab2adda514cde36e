fn main() {
    std::process::exit(proctopic::cli::run(std::env::args_os()));
}
