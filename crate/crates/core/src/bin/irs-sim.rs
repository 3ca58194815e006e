use std::process::ExitCode;

fn main() -> ExitCode {
    irs_amp::cli::main_entry()
}
