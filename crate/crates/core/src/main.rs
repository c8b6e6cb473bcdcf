fn main() {
    std::process::exit(stochcirc::cli::main_with_args(std::env::args_os()));
}
