fn main() {
    std::process::exit(quantprune::cli::main_with(std::env::args().collect()));
}
