use std::process::ExitCode;

fn main() -> ExitCode {
    memrl_cli::main_with(std::env::args_os())
}
