fn main() {
    std::process::exit(ovor::cli::run(std::env::args_os()));
}
