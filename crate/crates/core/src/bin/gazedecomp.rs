fn main() {
    std::process::exit(gazedecomp::cli::run(std::env::args_os()));
}
