fn main() {
    std::process::exit(patchformer_cli::run(std::env::args_os()));
}
