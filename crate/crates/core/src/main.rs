fn main() {
    std::process::exit(synthcurate::cli::main_with_args(std::env::args_os()));
}
