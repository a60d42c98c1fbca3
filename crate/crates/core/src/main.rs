fn main() {
    std::process::exit(fusetrack::cli::main_with(std::env::args_os()));
}
