fn main() {
    std::process::exit(mumkit::cli::main_exit_code());
}
