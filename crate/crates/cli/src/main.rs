fn main() {
    std::process::exit(viewdvc_cli::run(std::env::args_os().skip(1)));
}
