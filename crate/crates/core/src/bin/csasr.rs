fn main() {
    std::process::exit(csasr_core::cli::main_with_args(std::env::args_os()));
}
