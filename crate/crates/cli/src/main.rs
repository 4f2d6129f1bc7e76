fn main() {
    std::process::exit(lumenforge_cli::cli::run(std::env::args_os()));
}
