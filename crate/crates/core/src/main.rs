fn main() {
    std::process::exit(embfuse::cli::main_with_args(std::env::args_os()));
}
