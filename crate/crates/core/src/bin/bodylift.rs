fn main() {
    std::process::exit(bodylift::cli::run(std::env::args_os()));
}
