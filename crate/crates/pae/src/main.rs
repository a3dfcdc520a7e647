fn main() {
    std::process::exit(pae::cli::main());
}
