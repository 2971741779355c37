fn main() {
    std::process::exit(deltavar::cli_main(std::env::args_os()));
}
