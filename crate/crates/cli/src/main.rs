fn main() {
    std::process::exit(bubblegan_cli::main_with(std::env::args()));
}
