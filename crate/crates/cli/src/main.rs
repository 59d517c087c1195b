fn main() {
    std::process::exit(xvkd_cli::run(std::env::args_os()));
}
