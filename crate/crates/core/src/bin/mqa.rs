fn main() {
    std::process::exit(mqa::cli::run(std::env::args_os()));
}
