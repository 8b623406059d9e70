fn main() {
    std::process::exit(agcn_cli::run(std::env::args_os()));
}
