fn main() {
    std::process::exit(phantomctl::main_with_args(std::env::args_os()));
}
