fn main() {
    std::process::exit(fpdm::cli::run(std::env::args_os()));
}
