fn main() {
    std::process::exit(empdial_cli::run(std::env::args_os()));
}
