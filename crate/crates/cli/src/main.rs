fn main() {
    std::process::exit(fdu_cli::main_with_args(std::env::args_os()));
}
