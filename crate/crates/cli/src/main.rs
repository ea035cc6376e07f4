use std::process::ExitCode;

fn main() -> ExitCode {
    m2dan_cli::app::main_with(std::env::args_os())
}
