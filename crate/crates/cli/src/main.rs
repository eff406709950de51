fn main() {
    std::process::exit(taloc_cli::run(std::env::args_os()));
}
