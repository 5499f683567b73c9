fn main() {
    std::process::exit(bld::pipeline::cli::run_cli(std::env::args_os()));
}
