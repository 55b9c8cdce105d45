fn main() {
    std::process::exit(objdyn::harness::cli::run(std::env::args()));
}
