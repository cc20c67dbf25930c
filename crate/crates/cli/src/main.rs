fn main() {
    std::process::exit(tsa_cli::run(std::env::args_os()));
}
