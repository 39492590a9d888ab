fn main() {
    std::process::exit(hida_lab::cli::main_with_args(std::env::args_os()));
}
