fn main() {
    std::process::exit(cmdlab::cli::run(std::env::args_os()));
}
