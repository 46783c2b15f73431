fn main() {
    std::process::exit(sickfuse::cli::main_with_args(std::env::args().collect()));
}
