//! Driver shared by the `axcat` binary and its tests: single-program runs
//! and the corpus runner.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use axcat::catlang::{bundled, parse_cat, BaseRel, CatError, CatModel};
use axcat::engine::{
    check_isolation_with, emit_smt, emit_witness_dot, EngineError, EngineOptions, Verdict,
    VerdictRecord,
};
use axcat::masm::{parse_program, MasmError, Outcome, Program};
use axcat::speculation::{Mode, SpecConfig};
use rayon::prelude::*;

pub const DEFAULT_K: u32 = 2;
pub const DEFAULT_W: u32 = 8;
pub const DEFAULT_BUFFER: u32 = 2;
pub const DEFAULT_BITS: u32 = 3;

/// Exit status for errors; 0, 1 and 2 are verdicts.
pub const EXIT_ERROR: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Program { path: PathBuf, source: MasmError },
    #[error("{path}: {source}")]
    Model { path: PathBuf, source: CatError },
    #[error("unknown model `{0}` (bundled: inorder, stl, psf, tso, tso-mcu)")]
    UnknownModel(String),
    #[error("{0}: no `expect` line")]
    MissingExpectation(PathBuf),
    #[error("{path}: {msg}")]
    Expectation { path: PathBuf, msg: String },
    #[error("{0}")]
    Engine(#[from] EngineError),
    #[error("cannot serialize verdict: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Engine {
    #[default]
    Enumerate,
    EmitSmt,
}

impl std::str::FromStr for Engine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "enumerate" => Ok(Engine::Enumerate),
            "emit-smt" => Ok(Engine::EmitSmt),
            _ => Err(format!(
                "unknown engine `{s}` (expected enumerate or emit-smt)"
            )),
        }
    }
}

/// Everything one run needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSpec {
    pub program: PathBuf,
    /// Bundled model name or path to a `.cat` file.
    pub model: String,
    pub mode: Mode,
    pub k: u32,
    pub w: u32,
    pub buffer: u32,
    pub bits: u32,
    pub engine: Engine,
    pub dot: Option<PathBuf>,
    pub smt: Option<PathBuf>,
    pub json: Option<PathBuf>,
    /// Worker cap; `None` uses every core.
    pub jobs: Option<usize>,
}

impl RunSpec {
    pub fn new(program: impl Into<PathBuf>, model: &str) -> Self {
        RunSpec {
            program: program.into(),
            model: model.to_string(),
            mode: Mode::Speculative,
            k: DEFAULT_K,
            w: DEFAULT_W,
            buffer: DEFAULT_BUFFER,
            bits: DEFAULT_BITS,
            engine: Engine::Enumerate,
            dot: None,
            smt: None,
            json: None,
            jobs: None,
        }
    }

    pub fn config(&self, model: &CatModel) -> SpecConfig {
        SpecConfig {
            mode: self.mode,
            window: self.w,
            buffer: self.buffer,
            always_mispredict: true,
            psf: model.uses_base(BaseRel::Srf),
        }
    }
}

/// Worker cap from `AXCAT_JOBS`, if set to a positive number.
pub fn jobs_from_env() -> Option<usize> {
    std::env::var("AXCAT_JOBS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_program(path: &Path) -> Result<Program, CliError> {
    parse_program(&read(path)?).map_err(|source| CliError::Program {
        path: path.to_path_buf(),
        source,
    })
}

/// Resolves a bundled model name, or reads a `.cat` file.
pub fn resolve_model(name: &str) -> Result<CatModel, CliError> {
    if let Some(m) = bundled(name) {
        return Ok(m);
    }
    let path = Path::new(name);
    if !path.is_file() {
        return Err(CliError::UnknownModel(name.to_string()));
    }
    let mut m = parse_cat(&read(path)?).map_err(|source| CliError::Model {
        path: path.to_path_buf(),
        source,
    })?;
    m.name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string());
    Ok(m)
}

/// Result of one run.
#[derive(Debug, Clone)]
pub struct RunResult {
    /// Absent when only the SMT query was emitted.
    pub verdict: Option<Verdict>,
    pub record: Option<VerdictRecord>,
    pub report: String,
}

impl RunResult {
    pub fn exit_code(&self) -> i32 {
        match self.verdict.as_ref().map(|v| v.outcome) {
            None | Some(Outcome::Safe) => 0,
            Some(Outcome::Unsafe) => 1,
            Some(Outcome::Unknown) => 2,
        }
    }
}

pub fn run(spec: &RunSpec) -> Result<RunResult, CliError> {
    let program = load_program(&spec.program)?;
    let model = resolve_model(&spec.model)?;
    let cfg = spec.config(&model);
    let mut report = String::new();

    if spec.engine == Engine::EmitSmt || spec.smt.is_some() {
        let text = emit_smt(&program, &model, &cfg, spec.k, spec.bits)?;
        match &spec.smt {
            Some(p) => {
                write(p, &text)?;
                writeln!(report, "smt: {}", p.display()).unwrap();
            }
            None => report.push_str(&text),
        }
        if spec.engine == Engine::EmitSmt {
            return Ok(RunResult {
                verdict: None,
                record: None,
                report,
            });
        }
    }

    let start = Instant::now();
    let opts = EngineOptions {
        prune: true,
        jobs: spec.jobs,
    };
    let verdict = check_isolation_with(&program, &model, &cfg, spec.k, spec.bits, opts)?;
    let elapsed = start.elapsed();
    let record = VerdictRecord {
        program: spec.program.display().to_string(),
        model: model.name.clone(),
        mode: spec.mode,
        k: spec.k,
        w: spec.w,
        w_prime: spec.buffer,
        bits: spec.bits,
        outcome: verdict.outcome,
        candidates: verdict.stats.candidates,
        stats: verdict.stats,
        elapsed_ms: elapsed.as_millis(),
    };

    let mut out = String::new();
    writeln!(out, "{}", verdict.outcome).unwrap();
    writeln!(
        out,
        "program {}  model {}  mode {}  k {}  w {}  w' {}  bits {}",
        record.program, record.model, record.mode, spec.k, spec.w, spec.buffer, spec.bits
    )
    .unwrap();
    let s = &verdict.stats;
    writeln!(
        out,
        "skeletons {}  candidates {}  skipped {}  rejected: control-flow {} window {} fence {} srf-fence {} model {}  consistent {}",
        s.skeletons,
        s.candidates,
        s.skipped,
        s.control_flow_rejected,
        s.window_rejected,
        s.fence_rejected,
        s.srf_fence_rejected,
        s.model_rejected,
        s.consistent
    )
    .unwrap();
    if verdict.outcome == Outcome::Unknown {
        writeln!(
            out,
            "unrolling bound {} too small to cover every loop iteration",
            spec.k
        )
        .unwrap();
    }
    if let Some(x) = &verdict.witness {
        writeln!(out, "witness:").unwrap();
        let srcs = x.sources();
        for e in &x.events {
            let Some(o) = e.origin else { continue };
            let ins = verdict.program.threads[o.thread].get(o.label).unwrap();
            let mut line = format!("  {:<6} {:<28}", x.name(e.id), ins.text);
            if let (Some(a), Some(v)) = (e.addr, e.val) {
                write!(line, " [{a}] = {v}").unwrap();
            } else if let Some(v) = e.val {
                write!(line, " = {v}").unwrap();
            }
            if let Some(from) = (0..x.len()).find(|w| srcs.contains(*w, e.id)) {
                write!(line, "  rf from {}", x.name(from)).unwrap();
            }
            if e.transient {
                line.push_str("  (transient)");
            }
            writeln!(out, "{}", line.trim_end()).unwrap();
        }
    }
    writeln!(out, "elapsed {} ms", record.elapsed_ms).unwrap();
    report.push_str(&out);

    if let Some(p) = &spec.dot {
        match &verdict.witness {
            Some(x) => {
                write(p, &emit_witness_dot(&verdict.program, x))?;
                writeln!(report, "dot: {}", p.display()).unwrap();
            }
            None => writeln!(report, "dot: no witness, nothing written").unwrap(),
        }
    }
    if let Some(p) = &spec.json {
        write(p, &serde_json::to_string_pretty(&record)?)?;
        writeln!(report, "json: {}", p.display()).unwrap();
    }
    Ok(RunResult {
        verdict: Some(verdict),
        record: Some(record),
        report,
    })
}

/// One expectation of one corpus file.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct CorpusRow {
    /// File name without `.litmus`.
    pub test: String,
    pub model: String,
    pub mode: Mode,
    pub k: u32,
    pub w: u32,
    pub buffer: u32,
    pub bits: u32,
    pub expected: Outcome,
    pub got: Outcome,
}

impl CorpusRow {
    pub fn pass(&self) -> bool {
        self.expected == self.got
    }
}

struct Job {
    path: PathBuf,
    test: String,
    program: Program,
    exp: usize,
}

/// Lists `*.litmus` files of a directory, sorted by name.
pub fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rd = std::fs::read_dir(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let p = entry.path();
        if p.extension().is_some_and(|e| e == "litmus") && p.is_file() {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Runs every expectation of every file, in parallel, and returns the rows
/// sorted by test and parameters.
pub fn run_corpus(dir: &Path, jobs: Option<usize>) -> Result<Vec<CorpusRow>, CliError> {
    run_files(&corpus_files(dir)?, jobs)
}

pub fn run_files(files: &[PathBuf], jobs: Option<usize>) -> Result<Vec<CorpusRow>, CliError> {
    let mut work = Vec::new();
    for f in files {
        let program = load_program(f)?;
        if program.expectations.is_empty() {
            return Err(CliError::MissingExpectation(f.clone()));
        }
        let test = f
            .file_name()
            .map(|s| s.to_string_lossy().trim_end_matches(".litmus").to_string())
            .unwrap_or_default();
        for exp in 0..program.expectations.len() {
            work.push(Job {
                path: f.clone(),
                test: test.clone(),
                program: program.clone(),
                exp,
            });
        }
    }
    let go = || work.par_iter().map(run_job).collect::<Result<Vec<_>, _>>();
    let mut rows = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build()
            .map_err(|e| CliError::Pool(e.to_string()))?
            .install(go)?,
        None => go()?,
    };
    rows.sort();
    Ok(rows)
}

fn run_job(j: &Job) -> Result<CorpusRow, CliError> {
    let e = &j.program.expectations[j.exp];
    let bad = |msg: String| CliError::Expectation {
        path: j.path.clone(),
        msg,
    };
    let mode = match &e.mode {
        Some(m) => m.parse::<Mode>().map_err(bad)?,
        None => Mode::Speculative,
    };
    let model = resolve_model(&e.model)?;
    let spec = RunSpec {
        mode,
        k: e.k.unwrap_or(DEFAULT_K),
        w: e.w.unwrap_or(DEFAULT_W),
        buffer: e.buffer.unwrap_or(DEFAULT_BUFFER),
        bits: e.bits.unwrap_or(DEFAULT_BITS),
        ..RunSpec::new(&j.path, &e.model)
    };
    let cfg = spec.config(&model);
    let v = check_isolation_with(
        &j.program,
        &model,
        &cfg,
        spec.k,
        spec.bits,
        EngineOptions::default(),
    )?;
    Ok(CorpusRow {
        test: j.test.clone(),
        model: model.name,
        mode,
        k: spec.k,
        w: spec.w,
        buffer: spec.buffer,
        bits: spec.bits,
        expected: e.outcome,
        got: v.outcome,
    })
}

fn sign(o: Outcome) -> &'static str {
    match o {
        Outcome::Safe => "+",
        Outcome::Unsafe => "-",
        Outcome::Unknown => "?",
    }
}

/// Renders rows with unfenced and fenced variants side by side. A test
/// named `X.fence` is the fenced variant of `X`. Cells read
/// `expected/got`, with `+` safe, `-` unsafe and `?` unknown.
pub fn format_table(rows: &[CorpusRow]) -> String {
    type Key = (String, String, String, String);
    let mut table: BTreeMap<Key, [Option<&CorpusRow>; 2]> = BTreeMap::new();
    for r in rows {
        let (base, col) = match r.test.strip_suffix(".fence") {
            Some(b) => (b.to_string(), 1),
            None => (r.test.clone(), 0),
        };
        let params = format!("k={} w={} w'={} bits={}", r.k, r.w, r.buffer, r.bits);
        let key = (base, r.model.clone(), r.mode.to_string(), params);
        table.entry(key).or_default()[col] = Some(r);
    }
    let cell = |r: Option<&CorpusRow>| match r {
        None => String::new(),
        Some(r) => format!(
            "{}/{} {}",
            sign(r.expected),
            sign(r.got),
            if r.pass() { "ok" } else { "FAIL" }
        ),
    };
    let mut lines = vec![[
        "test".to_string(),
        "model".to_string(),
        "mode".to_string(),
        "params".to_string(),
        "none".to_string(),
        "fence".to_string(),
    ]];
    for ((t, m, mode, params), cols) in &table {
        lines.push([
            t.clone(),
            m.clone(),
            mode.clone(),
            params.clone(),
            cell(cols[0]),
            cell(cols[1]),
        ]);
    }
    let mut width = [0usize; 6];
    for l in &lines {
        for (i, c) in l.iter().enumerate() {
            width[i] = width[i].max(c.chars().count());
        }
    }
    let mut out = String::new();
    for l in &lines {
        let mut s = String::new();
        for (i, c) in l.iter().enumerate() {
            write!(s, "{:<w$}  ", c, w = width[i]).unwrap();
        }
        writeln!(out, "{}", s.trim_end()).unwrap();
    }
    let failed = rows.iter().filter(|r| !r.pass()).count();
    writeln!(out, "{} checks, {} failed", rows.len(), failed).unwrap();
    out
}
