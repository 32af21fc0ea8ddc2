fn main() {
    std::process::exit(asl_cli::run_main(std::env::args_os()));
}
