fn main() {
    std::process::exit(pap_core::cli::run(std::env::args_os()));
}
