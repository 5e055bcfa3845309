fn main() {
    std::process::exit(plasticgraph::cli::run(std::env::args_os()));
}
