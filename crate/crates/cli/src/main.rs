fn main() -> std::process::ExitCode {
    evcal_cli::main_with_args(std::env::args_os())
}
