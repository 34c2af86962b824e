fn main() {
    std::process::exit(lumacurve::cli::run(std::env::args_os()));
}
