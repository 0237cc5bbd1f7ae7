fn main() {
    std::process::exit(ppds::cli::main_with_args(std::env::args_os()));
}
