fn main() {
    std::process::exit(smsfp_cli::run(std::env::args_os()));
}
