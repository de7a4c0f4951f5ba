fn main() {
    std::process::exit(ccblock::cli::run(std::env::args_os()));
}
