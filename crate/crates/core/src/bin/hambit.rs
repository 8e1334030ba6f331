fn main() {
    std::process::exit(hambit::cli::main_with_args(std::env::args_os()));
}
