fn main() {
    std::process::exit(tandemflow::cli::run(std::env::args()));
}
