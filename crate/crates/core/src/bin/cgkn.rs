fn main() {
    std::process::exit(cgkn::cli::main());
}
