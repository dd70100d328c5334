fn main() {
    std::process::exit(chaoscope::cli::main_with_args(std::env::args_os()));
}
