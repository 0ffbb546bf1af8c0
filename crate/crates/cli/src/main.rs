fn main() {
    std::process::exit(coalmtl_cli::run_from(std::env::args_os()));
}
