fn main() {
    std::process::exit(wkam::cli::main_with_args(std::env::args_os()));
}
