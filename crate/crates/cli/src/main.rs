fn main() {
    std::process::exit(caformer_cli::run_command(std::env::args_os()));
}
