fn main() {
    std::process::exit(acmorse::cli::run_command(std::env::args_os()));
}
