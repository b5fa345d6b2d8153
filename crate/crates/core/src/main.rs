fn main() {
    std::process::exit(mixedq::cli::run(std::env::args_os()));
}
