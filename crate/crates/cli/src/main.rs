fn main() {
    std::process::exit(refdiff_cli::run(std::env::args_os()));
}
