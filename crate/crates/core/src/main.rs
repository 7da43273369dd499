fn main() {
    std::process::exit(m2m::cli::run(std::env::args_os()));
}
