fn main() {
    std::process::exit(mdm_core::cli::run(std::env::args().collect()));
}
