fn main() {
    std::process::exit(ccam::cli::run(std::env::args_os()));
}
