fn main() {
    std::process::exit(popmech::cli::run(std::env::args_os()));
}
