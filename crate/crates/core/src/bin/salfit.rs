fn main() {
    std::process::exit(salfit_core::cli::run(std::env::args_os()));
}
