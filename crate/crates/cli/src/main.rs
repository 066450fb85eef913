fn main() {
    std::process::exit(karina_cli::run(std::env::args_os()));
}
