fn main() {
    std::process::exit(uniclam::cli::main_with_args(std::env::args_os()));
}
