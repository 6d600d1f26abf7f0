fn main() {
    std::process::exit(t2ldm::cli::run(std::env::args_os()));
}
