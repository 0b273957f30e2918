fn main() -> std::process::ExitCode {
    linearizer::cli::main_with_args(std::env::args_os())
}
