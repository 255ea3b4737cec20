fn main() {
    std::process::exit(lmmk::cli::main_with_env());
}
