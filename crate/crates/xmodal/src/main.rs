fn main() {
    std::process::exit(xmodal::cli::run(std::env::args()));
}
