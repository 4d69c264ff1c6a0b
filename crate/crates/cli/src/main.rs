fn main() {
    std::process::exit(stereoref_cli::main_with_args(std::env::args_os()));
}
