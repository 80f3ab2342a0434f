fn main() {
    std::process::exit(cldl::cli::run(std::env::args_os()));
}
