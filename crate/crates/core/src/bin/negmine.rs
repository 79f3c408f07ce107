fn main() {
    std::process::exit(negmine::cli::main());
}
