fn main() {
    std::process::exit(prefixbatch_cli::run(std::env::args_os()));
}
