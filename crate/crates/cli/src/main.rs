fn main() {
    std::process::exit(alae_cli::run(std::env::args_os()));
}
