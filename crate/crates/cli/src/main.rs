fn main() {
    std::process::exit(atw_cli::run(std::env::args_os()));
}
