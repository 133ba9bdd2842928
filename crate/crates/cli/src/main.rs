fn main() {
    std::process::exit(uniquery_cli::run(std::env::args_os()));
}
