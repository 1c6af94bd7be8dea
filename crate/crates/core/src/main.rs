fn main() {
    std::process::exit(dicl::cli::run(std::env::args_os()));
}
