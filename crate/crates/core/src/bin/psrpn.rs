use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(psrpn::cli::main_with_args(std::env::args_os(), &mut std::io::stdout()))
}
