//! Command implementations behind the `fedpisa` binary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::config::{ExperimentConfig, Strategy};
use crate::error::Error;
use crate::output::{self, write_bundle};
use crate::server::{run_experiment_on, ResultsBundle};
use crate::synth::{generate_world, World};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "FEDPISA_OUT";
pub const WORLD_SNAPSHOT_FILE: &str = "world.bin";
pub const SWEEP_TAU_FILE: &str = "sweep_tau.csv";
pub const SWEEP_STEPS_FILE: &str = "sweep_steps.csv";

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 2.
    Config(String),
    /// Output directory already exists; exit code 3.
    OutputExists(PathBuf),
    /// Failure while running; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::OutputExists(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::OutputExists(p) => write!(f, "{}: output directory exists (use --force to overwrite)", p.display()),
            CliError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CliError {}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Options shared by every experiment command.
#[derive(Debug, Clone, Default)]
pub struct CommonArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub strategy: Option<Strategy>,
    pub set: Vec<String>,
    pub force: bool,
}

pub fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let path = &args.config;
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
        overrides.push(format!("world.seed={seed}"));
    }
    if let Some(st) = args.strategy {
        overrides.push(format!("strategy=\"{}\"", st.name()));
    }
    ExperimentConfig::from_toml_with_overrides(&text, &overrides).map_err(|e| {
        let msg = match e {
            Error::Config(m) => m,
            other => other.to_string(),
        };
        let msg = msg.trim_end().replace('\n', "\n  ");
        CliError::Config(format!("{}: {msg}", path.display()))
    })
}

fn resolve_out(args: &CommonArgs, cfg: &ExperimentConfig, default_name: &str) -> PathBuf {
    if let Some(out) = &args.out {
        return out.clone();
    }
    if let Some(out) = &cfg.output_dir {
        return out.clone();
    }
    let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("results"));
    root.join(default_name)
}

fn prepare_out(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let nonempty = fs::read_dir(dir).map_err(runtime)?.next().is_some();
        if nonempty && !force {
            return Err(CliError::OutputExists(dir.to_path_buf()));
        }
        if nonempty {
            fs::remove_dir_all(dir).map_err(runtime)?;
        }
    }
    fs::create_dir_all(dir).map_err(runtime)
}

fn run_into(cfg: &ExperimentConfig, world: Arc<World>, dir: &Path) -> Result<ResultsBundle, CliError> {
    let bundle = run_experiment_on(cfg, world).map_err(runtime)?;
    write_bundle(&bundle, dir).map_err(runtime)?;
    Ok(bundle)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub bundle: ResultsBundle,
}

pub fn cmd_run(args: &CommonArgs) -> Result<RunOutcome, CliError> {
    let cfg = load_config(args)?;
    let name = format!("{}-seed{}", cfg.strategy.name(), cfg.seed);
    let out_dir = resolve_out(args, &cfg, &name);
    let world = Arc::new(generate_world(&cfg.world).map_err(|e| CliError::Config(e.to_string()))?);
    prepare_out(&out_dir, args.force)?;
    let bundle = run_into(&cfg, world, &out_dir)?;
    Ok(RunOutcome { out_dir, bundle })
}

fn write_snapshot(world: &World, root: &Path) -> Result<Arc<World>, CliError> {
    let path = root.join(WORLD_SNAPSHOT_FILE);
    world
        .write_snapshot(std::io::BufWriter::new(fs::File::create(&path).map_err(runtime)?))
        .map_err(runtime)?;
    let file = fs::File::open(&path).map_err(runtime)?;
    let back = World::read_snapshot(std::io::BufReader::new(file), Some(&world.hash_hex())).map_err(runtime)?;
    Ok(Arc::new(back))
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub label: String,
    pub dir: PathBuf,
    pub bundle: ResultsBundle,
}

pub fn cmd_sweep_tau(args: &CommonArgs, taus: &[f64]) -> Result<(PathBuf, Vec<SweepRow>), CliError> {
    if taus.is_empty() {
        return Err(CliError::Config("tau list is empty".into()));
    }
    if let Some(bad) = taus.iter().find(|t| !(**t > 0.0)) {
        return Err(CliError::Config(format!("tau values must be > 0, got {bad}")));
    }
    let base = load_config(args)?;
    for &tau in taus {
        let mut c = base.clone();
        c.tau = tau;
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
    }
    let root = resolve_out(args, &base, &format!("sweep-tau-seed{}", base.seed));
    let world = generate_world(&base.world).map_err(|e| CliError::Config(e.to_string()))?;
    prepare_out(&root, args.force)?;
    let world = write_snapshot(&world, &root)?;

    let mut rows = Vec::new();
    for &tau in taus {
        let mut cfg = base.clone();
        cfg.tau = tau;
        cfg.output_dir = None;
        let label = format!("tau-{tau}");
        let dir = root.join(&label);
        let bundle = run_into(&cfg, world.clone(), &dir)?;
        rows.push(SweepRow { label, dir, bundle });
    }

    let mut w = csv::Writer::from_path(root.join(SWEEP_TAU_FILE)).map_err(runtime)?;
    w.write_record([
        "tau",
        "final_mean_expressive_mse",
        "within_cluster_mass",
        "cross_cluster_mass",
        "world_hash",
    ])
    .map_err(runtime)?;
    for (row, &tau) in rows.iter().zip(taus) {
        let (within, cross) = row
            .bundle
            .cluster_attention_mass(5)
            .map(|(a, b)| (fmt_f(a), fmt_f(b)))
            .unwrap_or_default();
        w.write_record([
            fmt_f(tau),
            fmt_f(row.bundle.final_mean_expressive_mse()),
            within,
            cross,
            row.bundle.world_hash.clone(),
        ])
        .map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    Ok((root, rows))
}

pub fn cmd_sweep_steps(args: &CommonArgs, m_list: &[usize], total: usize) -> Result<(PathBuf, Vec<SweepRow>), CliError> {
    if m_list.is_empty() {
        return Err(CliError::Config("m list is empty".into()));
    }
    if let Some(bad) = m_list.iter().find(|m| **m > total) {
        return Err(CliError::Config(format!("stylization steps {bad} exceed the total budget {total}")));
    }
    let base = load_config(args)?;
    let root = resolve_out(args, &base, &format!("sweep-steps-seed{}", base.seed));
    let world = generate_world(&base.world).map_err(|e| CliError::Config(e.to_string()))?;
    prepare_out(&root, args.force)?;
    let world = write_snapshot(&world, &root)?;

    let mut rows = Vec::new();
    for &m in m_list {
        let mut cfg = base.clone();
        cfg.schedule.style_steps = m;
        cfg.schedule.timbre_steps = total - m;
        cfg.schedule.id_training = crate::client::IdTraining::EveryRound;
        cfg.output_dir = None;
        let label = format!("m-{m}");
        let dir = root.join(&label);
        let bundle = run_into(&cfg, world.clone(), &dir)?;
        rows.push(SweepRow { label, dir, bundle });
    }

    let mut w = csv::Writer::from_path(root.join(SWEEP_STEPS_FILE)).map_err(runtime)?;
    w.write_record(["m", "n", "final_mean_identity_error", "final_mean_expressive_mse", "world_hash"])
        .map_err(runtime)?;
    for (row, &m) in rows.iter().zip(m_list) {
        w.write_record([
            m.to_string(),
            (total - m).to_string(),
            fmt_f(row.bundle.final_mean_identity_error()),
            fmt_f(row.bundle.final_mean_expressive_mse()),
            row.bundle.world_hash.clone(),
        ])
        .map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    Ok((root, rows))
}

/// Human-readable summary of a results directory.
pub fn cmd_report(dir: &Path) -> Result<String, CliError> {
    let cfg = output::read_config(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    let rounds = output::read_rounds(dir).map_err(runtime)?;
    let mut out = String::new();
    out.push_str(&format!("strategy          {}\n", cfg.strategy.label()));
    out.push_str(&format!("rounds            {}\n", rounds.len()));
    out.push_str(&format!("clients           {}\n", cfg.world.num_clients));
    out.push_str(&format!("tau               {}\n", cfg.tau));
    if let Some(last) = rounds.last() {
        out.push_str(&format!("world hash        {}\n", last.world_hash));
        out.push_str(&format!("expressive mse    {:.6}\n", last.mean_expressive_mse()));
        out.push_str(&format!("identity error    {:.6}\n", last.mean_identity_error()));
        out.push_str(&format!("cost (GiB)        {:.9}\n", last.cumulative_gib));
        out.push_str(&format!("cost (bytes)      {}\n", last.cumulative_bytes));
    }
    Ok(out)
}
