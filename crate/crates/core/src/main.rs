fn main() {
    std::process::exit(kgirnet::cli::run(std::env::args_os()));
}
