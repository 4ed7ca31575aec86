fn main() {
    std::process::exit(mmtitlegen::cli::run(std::env::args_os()));
}
