fn main() {
    std::process::exit(drivercal::cli::run(std::env::args_os()));
}
