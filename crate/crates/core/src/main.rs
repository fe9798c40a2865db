fn main() {
    std::process::exit(calibreg::cli::run(std::env::args_os()));
}
