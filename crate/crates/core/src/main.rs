fn main() {
    std::process::exit(sfm_core::cli::run(std::env::args_os()));
}
