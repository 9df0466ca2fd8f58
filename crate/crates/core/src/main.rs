fn main() {
    std::process::exit(vmsim::cli::main_with(std::env::args_os()));
}
