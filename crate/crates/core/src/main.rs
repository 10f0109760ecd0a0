fn main() {
    std::process::exit(voxelpair::cli::run(std::env::args_os()));
}
