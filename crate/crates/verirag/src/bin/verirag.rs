fn main() {
    std::process::exit(verirag::cli::run());
}
