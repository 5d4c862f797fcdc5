fn main() {
    std::process::exit(dsno_cli::run(std::env::args_os()));
}
