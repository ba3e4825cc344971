fn main() {
    std::process::exit(u5mr_cli::run(std::env::args_os()));
}
