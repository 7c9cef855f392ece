fn main() {
    std::process::exit(genrep::cli::run(std::env::args_os()));
}
