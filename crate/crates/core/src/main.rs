fn main() {
    std::process::exit(ccdsreformer::cli::run(std::env::args_os()));
}
