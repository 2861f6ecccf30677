fn main() {
    std::process::exit(otfs_predict::cli::run(std::env::args_os()));
}
