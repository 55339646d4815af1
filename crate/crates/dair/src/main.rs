fn main() {
    std::process::exit(dair::cli::run(std::env::args_os()));
}
