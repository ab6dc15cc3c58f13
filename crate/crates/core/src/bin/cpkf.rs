fn main() {
    std::process::exit(cpkf::cli_main(std::env::args_os()));
}
