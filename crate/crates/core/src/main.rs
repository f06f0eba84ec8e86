fn main() {
    std::process::exit(turbowave::cli::run(std::env::args_os()));
}
