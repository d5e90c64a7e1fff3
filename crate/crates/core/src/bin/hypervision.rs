fn main() {
    std::process::exit(hypervision::cli::run(std::env::args_os()));
}
