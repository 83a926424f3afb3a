fn main() {
    std::process::exit(fortress::cli::main_with_args(std::env::args_os()));
}
