fn main() {
    std::process::exit(fedsurg::cli::main());
}
