fn main() {
    std::process::exit(ear_core::cli::run(std::env::args_os()));
}
