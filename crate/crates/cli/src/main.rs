fn main() {
    std::process::exit(spatem_cli::main_with(std::env::args_os()));
}
