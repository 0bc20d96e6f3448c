fn main() {
    std::process::exit(consistcal::cli::run(std::env::args_os()));
}
