use std::process::ExitCode;

fn main() -> ExitCode {
    nfpl::cli::main_with_args(std::env::args_os())
}
