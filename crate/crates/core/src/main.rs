fn main() {
    std::process::exit(freebias::cli::run(std::env::args_os()));
}
