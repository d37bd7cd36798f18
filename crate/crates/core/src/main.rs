use std::process::ExitCode;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let status = posemerge::cli::dispatch(&argv, &mut std::io::stdout(), &mut std::io::stderr());
    ExitCode::from(status.0)
}
