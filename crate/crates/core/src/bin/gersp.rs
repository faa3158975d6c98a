fn main() {
    std::process::exit(gersp::cli::run(std::env::args_os()));
}
