fn main() {
    std::process::exit(e3cast::cli::run(std::env::args_os()));
}
