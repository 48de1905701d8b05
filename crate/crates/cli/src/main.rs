fn main() {
    std::process::exit(spikegrad_cli::main_with(std::env::args_os()));
}
