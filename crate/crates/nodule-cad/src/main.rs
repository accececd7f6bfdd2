use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(nodule_cad::cli::dispatch(std::env::args().skip(1)))
}
