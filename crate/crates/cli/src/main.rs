fn main() {
    std::process::exit(depthpair_cli::run(std::env::args_os()));
}
