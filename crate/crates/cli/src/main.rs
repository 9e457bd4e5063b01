fn main() {
    std::process::exit(air_cli::run(std::env::args_os()));
}
