fn main() {
    std::process::exit(factorboost_cli::run(std::env::args_os()));
}
