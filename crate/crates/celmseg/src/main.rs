fn main() {
    std::process::exit(celmseg::cli::run(std::env::args_os()));
}
