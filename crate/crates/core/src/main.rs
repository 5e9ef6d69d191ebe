fn main() {
    std::process::exit(mfhca::cli::run(std::env::args_os()));
}
