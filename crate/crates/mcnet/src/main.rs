fn main() {
    std::process::exit(mcnet::cli::main_with_args(std::env::args_os()));
}
