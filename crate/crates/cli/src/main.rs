fn main() {
    std::process::exit(cfg2vec_cli::run(std::env::args_os()));
}
