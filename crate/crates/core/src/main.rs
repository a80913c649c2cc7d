fn main() {
    std::process::exit(fastff::cli::run(std::env::args_os()));
}
