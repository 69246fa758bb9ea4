fn main() {
    std::process::exit(ktlab_cli::cli::run_cli(std::env::args_os()));
}
