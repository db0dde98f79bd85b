//! Command-line front end for mpkit: dataset generation, ensemble training,
//! evaluation, uncertainty landscapes and the DE/BB equivalency experiment.

pub mod commands;
pub mod config;
pub mod data;

use std::fmt;
use std::path::{Path, PathBuf};

pub use commands::{cmd_equivalency, cmd_eval, cmd_gen_data, cmd_landscape, cmd_train};
pub use config::RunConfig;

/// Name of the resolved configuration written next to every output.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// A command failure, classified by exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum Failure {
    /// Bad configuration or usage (exit code 2).
    Config(String),
    /// Training diverged or failed to separate (exit code 3).
    Numeric(String),
    /// Reading or writing files failed (exit code 4).
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Io(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Numeric(m) => write!(f, "numeric failure: {m}"),
            Failure::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<mpkit::error::Error> for Failure {
    fn from(e: mpkit::error::Error) -> Self {
        use mpkit::error::Error as E;
        let msg = e.to_string();
        match e {
            _ if e.is_numeric() => Failure::Numeric(msg),
            E::Io(_)
            | E::Truncated { .. }
            | E::BadMagic { .. }
            | E::Format { .. }
            | E::Csv { .. }
            | E::CountMismatch { .. }
            | E::Json(_) => Failure::Io(msg),
            _ => Failure::Config(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

pub type Outcome<T> = Result<T, Failure>;

/// Settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Global {
    pub out: PathBuf,
    /// Replaces the config's master seed when set.
    pub seed: Option<u64>,
    pub jobs: usize,
    pub force: bool,
}

impl Global {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Global {
            out: out.into(),
            seed: None,
            jobs: 1,
            force: false,
        }
    }

    pub fn with_force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn with_jobs(mut self, jobs: usize) -> Self {
        self.jobs = jobs;
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }
}

/// Worker count: the requested number (or every core), capped by `MPKIT_THREADS`.
pub fn effective_jobs(requested: Option<usize>) -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let jobs = requested.unwrap_or(cores).max(1);
    match std::env::var("MPKIT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        Some(cap) if cap > 0 => jobs.min(cap),
        _ => jobs,
    }
}

/// Makes `out` ready for writing. A non-empty directory is refused unless
/// `force` is set, in which case only the `known` entries are removed.
pub fn prepare_out_dir(out: &Path, force: bool, known: &[&str]) -> Outcome<()> {
    let io = |e: std::io::Error| Failure::Io(format!("{}: {e}", out.display()));
    if out.exists() {
        if !out.is_dir() {
            return Err(Failure::Config(format!(
                "{} exists and is not a directory",
                out.display()
            )));
        }
        let non_empty = std::fs::read_dir(out).map_err(io)?.next().is_some();
        if non_empty && !force {
            return Err(Failure::Config(format!(
                "{} already exists and is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        if non_empty {
            for name in known {
                let p = out.join(name);
                if p.is_dir() {
                    std::fs::remove_dir_all(&p).map_err(io)?;
                } else if p.exists() {
                    std::fs::remove_file(&p).map_err(io)?;
                }
            }
        }
    }
    std::fs::create_dir_all(out).map_err(io)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Outcome<()> {
    std::fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Outcome<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

pub(crate) fn csv_writer(path: &Path) -> Outcome<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

pub(crate) fn csv_io(path: &Path) -> impl Fn(csv::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

/// Shortest round-trip decimal form, independent of locale.
pub(crate) fn num(v: f64) -> String {
    format!("{v:?}")
}
