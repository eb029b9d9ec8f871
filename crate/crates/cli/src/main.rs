mod args;
mod commands;
mod report;

use std::process::ExitCode;

use clap::Parser;
use foleyflow_core::{Error, ErrorKind};

use args::{Cli, Command};
use report::Report;

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 3,
        ErrorKind::Numeric => 4,
        ErrorKind::Io => 5,
    }
}

fn run(cli: &Cli) -> Result<Report, Error> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let (name, f): (&'static str, Box<dyn Fn(&mut Report) -> Result<(), Error> + '_>) = match &cli.command {
        Command::GenData(a) => ("gen-data", Box::new(|r| commands::gen_data(a, r))),
        Command::Train(a) => ("train", Box::new(|r| commands::train(a, r))),
        Command::Sample(a) => ("sample", Box::new(|r| commands::sample_cmd(a, r))),
        Command::EvalFd(a) => ("eval-fd", Box::new(|r| commands::eval_fd(a, r))),
        Command::EvalIs(a) => ("eval-is", Box::new(|r| commands::eval_is(a, r))),
        Command::EvalKl(a) => ("eval-kl", Box::new(|r| commands::eval_kl(a, r))),
        Command::EvalOnset(a) => ("eval-onset", Box::new(|r| commands::eval_onset(a, r))),
        Command::EvalLag(a) => ("eval-lag", Box::new(|r| commands::eval_lag(a, r))),
        Command::Inspect(a) => ("inspect", Box::new(|r| commands::inspect(a, r))),
    };
    let mut report = Report::new(name);
    report.config("threads", cli.threads);
    f(&mut report)?;
    Ok(report)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(report) => {
            let line = report.to_json();
            if let Some(p) = &cli.report {
                if let Err(e) = std::fs::write(p, format!("{line}\n")) {
                    let err = Error::io(p, e);
                    eprintln!("error: {err}");
                    return ExitCode::from(exit_code(&err));
                }
            }
            eprint!("{}", report.summary());
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
