fn main() {
    std::process::exit(vcenet::cli::main_with_args(std::env::args_os()));
}
