fn main() {
    std::process::exit(nadetopic::cli::run(std::env::args_os()));
}
