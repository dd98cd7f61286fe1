fn main() {
    std::process::exit(sparsekit::cli::run(std::env::args_os()));
}
