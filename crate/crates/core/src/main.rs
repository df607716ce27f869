fn main() {
    std::process::exit(residual_audit::cli::main_with_args(std::env::args_os()));
}
