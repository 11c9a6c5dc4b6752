fn main() {
    std::process::exit(stfnn::cli::run(std::env::args_os()));
}
