fn main() -> std::process::ExitCode {
    lae_cli::main_from_args(std::env::args_os())
}
