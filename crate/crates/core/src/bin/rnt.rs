fn main() {
    std::process::exit(rnt::cli::run_from(std::env::args_os()));
}
