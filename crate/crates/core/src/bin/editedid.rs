fn main() {
    std::process::exit(editedid::cli::run(std::env::args_os()));
}
