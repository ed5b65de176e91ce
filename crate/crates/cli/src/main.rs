fn main() {
    std::process::exit(rollsplat_cli::dispatch(std::env::args_os()));
}
