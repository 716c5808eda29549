use std::path::PathBuf;
use std::process::ExitCode;

use axcat::speculation::Mode;
use axcat_cli::{format_table, jobs_from_env, run, run_corpus, Engine, RunSpec, EXIT_ERROR};
use clap::{Parser, Subcommand};

/// Checks software isolation of a μASM program under a CAT model.
///
/// Exit status: 0 safe, 1 unsafe, 2 unknown, 3 usage or input error.
/// `AXCAT_JOBS` caps the number of worker threads.
#[derive(Debug, Parser)]
#[command(name = "axcat", version, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// Litmus file to check.
    #[arg(long, value_name = "FILE")]
    program: Option<PathBuf>,

    /// Bundled model (inorder, stl, psf, tso, tso-mcu) or path to a .cat file.
    #[arg(long, default_value = "inorder")]
    model: String,

    /// Control-flow semantics.
    #[arg(long, default_value_t = Mode::Speculative)]
    mode: Mode,

    /// Loop unrolling bound.
    #[arg(short = 'k', default_value_t = axcat_cli::DEFAULT_K)]
    k: u32,

    /// Branch speculation window.
    #[arg(short = 'w', default_value_t = axcat_cli::DEFAULT_W)]
    w: u32,

    /// Store buffer size (w').
    #[arg(long, default_value_t = axcat_cli::DEFAULT_BUFFER)]
    buffer: u32,

    /// Value and address width in bits.
    #[arg(long, default_value_t = axcat_cli::DEFAULT_BITS)]
    bits: u32,

    /// `enumerate` decides the query, `emit-smt` only writes it.
    #[arg(long, default_value = "enumerate")]
    engine: Engine,

    /// Write the witness as a DOT graph.
    #[arg(long, value_name = "PATH")]
    dot: Option<PathBuf>,

    /// Write the SMT-LIB2 query; without it `emit-smt` prints to stdout.
    #[arg(long, value_name = "PATH")]
    smt: Option<PathBuf>,

    /// Write the verdict record as JSON.
    #[arg(long, value_name = "PATH")]
    json: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every `expect` line of every .litmus file in a directory.
    Corpus { dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(EXIT_ERROR as u8);
        }
    };
    let jobs = jobs_from_env();
    let code = match cli.command {
        Some(Command::Corpus { dir }) => match run_corpus(&dir, jobs) {
            Ok(rows) => {
                print!("{}", format_table(&rows));
                if rows.iter().all(|r| r.pass()) {
                    0
                } else {
                    1
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_ERROR
            }
        },
        None => {
            let Some(program) = cli.program else {
                eprintln!("error: --program is required (or use `axcat corpus DIR`)");
                return ExitCode::from(EXIT_ERROR as u8);
            };
            let spec = RunSpec {
                program,
                model: cli.model,
                mode: cli.mode,
                k: cli.k,
                w: cli.w,
                buffer: cli.buffer,
                bits: cli.bits,
                engine: cli.engine,
                dot: cli.dot,
                smt: cli.smt,
                json: cli.json,
                jobs,
            };
            match run(&spec) {
                Ok(r) => {
                    print!("{}", r.report);
                    r.exit_code()
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    EXIT_ERROR
                }
            }
        }
    };
    ExitCode::from(code as u8)
}
