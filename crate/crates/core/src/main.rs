fn main() {
    std::process::exit(gapm::cli::run(std::env::args_os()));
}
