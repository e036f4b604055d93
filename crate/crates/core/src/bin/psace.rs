fn main() {
    std::process::exit(psace::cli::main_with_args(std::env::args_os()));
}
