fn main() {
    std::process::exit(dane::cli::run(std::env::args_os()));
}
