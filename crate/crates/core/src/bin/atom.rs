fn main() {
    std::process::exit(atom_distill::cli::run_cli(std::env::args_os()));
}
