fn main() {
    std::process::exit(loce_cli::run(std::env::args_os()));
}
