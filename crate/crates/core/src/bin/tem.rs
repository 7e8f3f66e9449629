fn main() {
    std::process::exit(tem_core::cli::run(std::env::args_os()));
}
