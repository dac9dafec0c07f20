fn main() {
    std::process::exit(condense_cli::run(std::env::args_os()));
}
