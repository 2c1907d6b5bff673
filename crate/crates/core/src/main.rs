fn main() {
    std::process::exit(nfcsi::cli::main_with_args(std::env::args_os()));
}
