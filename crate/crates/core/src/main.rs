fn main() {
    std::process::exit(gsina::cli::run(std::env::args_os().collect()));
}
