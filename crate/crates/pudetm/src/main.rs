fn main() {
    std::process::exit(pudetm::cli::run(std::env::args_os()));
}
