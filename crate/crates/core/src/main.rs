fn main() {
    env_logger::init();
    std::process::exit(fairkms::cli::cli_main(std::env::args().collect()));
}
