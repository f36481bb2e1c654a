fn main() {
    std::process::exit(bevgrid::cli::run());
}
