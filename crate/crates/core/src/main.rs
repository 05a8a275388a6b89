fn main() {
    std::process::exit(rex::cli::run(std::env::args_os()));
}
