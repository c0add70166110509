fn main() {
    std::process::exit(gs4_cli::run(std::env::args_os()));
}
