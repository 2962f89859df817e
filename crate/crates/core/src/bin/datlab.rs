fn main() {
    std::process::exit(datlab::cli::run(std::env::args_os()));
}
