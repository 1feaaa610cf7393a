fn main() {
    std::process::exit(klvl_core::cli::main(std::env::args_os()));
}
