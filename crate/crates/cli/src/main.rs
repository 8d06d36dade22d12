fn main() {
    std::process::exit(wxcorpus_cli::run(std::env::args_os()));
}
