fn main() {
    std::process::exit(asu::cli::run_from(std::env::args_os()));
}
