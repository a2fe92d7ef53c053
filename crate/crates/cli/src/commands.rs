use crate::config::{set, RunConfig};
use crate::error::{CliError, CliResult, Stage};
use clap::{Args, Parser, Subcommand};
use leuq_core::inverse_opt::{inverse_uq, InverseProblem, InverseRoute, InverseTarget};
use leuq_core::model::{LossFlavor, RolloutMode, SurrogateModel, Variant};
use leuq_core::pde::{generate_dataset, load_dataset, make_bundled_windows, save_dataset, Split, TrajectorySet};
use leuq_core::tensor::Tensor;
use leuq_core::training::train_ensemble;
use leuq_core::uq_eval::evaluate_rollout;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "leuq", version, about = "Latent PDE surrogates with evolved uncertainty")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate train/test trajectories of the forced vorticity equation.
    Generate(GenerateArgs),
    /// Train an ensemble on a generated dataset.
    Train(TrainArgs),
    /// Evaluate an ensemble on the test split and write calibration reports.
    Eval(EvalArgs),
    /// Recover an initial state from later observations.
    Invert(InvertArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Grid points per side.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub viscosity: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub snapshot_interval: Option<f64>,
    #[arg(long)]
    pub snapshots: Option<usize>,
    #[arg(long)]
    pub forcing_amplitude: Option<f64>,
    /// Initial-condition spectral decay exponent α.
    #[arg(long)]
    pub grf_alpha: Option<f64>,
    /// Initial-condition spectral shift τ.
    #[arg(long)]
    pub grf_tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// e.g. latent+sigma+zsigma, no_latent, deterministic, no_zsigma.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub loss: Option<LossFlavor>,
    #[arg(long)]
    pub ensemble: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub conv_blocks: Option<usize>,
    #[arg(long)]
    pub history: Option<usize>,
    /// Rollout steps M seen by the training loss.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub bundle: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training run directory holding member_k.ckpt files.
    #[arg(long, alias = "run")]
    pub ensemble_dir: Option<PathBuf>,
    /// autoregressive | teacher_forcing
    #[arg(long)]
    pub mode: Option<RolloutMode>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Evaluate only the first k members.
    #[arg(long)]
    pub members: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, alias = "run")]
    pub ensemble_dir: Option<PathBuf>,
    /// latent | input
    #[arg(long)]
    pub route: Option<InverseRoute>,
    /// initial_state | static_param | both
    #[arg(long)]
    pub target: Option<InverseTarget>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Test trajectory index.
    #[arg(long)]
    pub trajectory: Option<usize>,
    /// Snapshot index of the last frame of the unknown state.
    #[arg(long)]
    pub start: Option<usize>,
    #[arg(long)]
    pub k_start: Option<usize>,
    #[arg(long)]
    pub k_end: Option<usize>,
    /// Comma-separated static parameter values.
    #[arg(long, value_delimiter = ',')]
    pub static_param: Option<Vec<f64>>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Invert(a) => cmd_invert(a),
    }
}

fn prepare(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.solver.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    split: Split,
    shape: [usize; 4],
    bytes: usize,
    crc32: u32,
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'static str,
    version: u32,
    solver: &'a leuq_core::pde::SolverConfig,
    files: Vec<ManifestEntry>,
}

pub fn cmd_generate(a: GenerateArgs) -> CliResult<()> {
    let mut cfg = prepare(&a.common)?;
    set(&mut cfg.solver.grid, a.n);
    set(&mut cfg.data.train, a.train);
    set(&mut cfg.data.test, a.test);
    set(&mut cfg.solver.viscosity, a.viscosity);
    set(&mut cfg.solver.dt, a.dt);
    set(&mut cfg.solver.snapshot_interval, a.snapshot_interval);
    set(&mut cfg.solver.snapshots, a.snapshots);
    set(&mut cfg.solver.forcing_amplitude, a.forcing_amplitude);
    set(&mut cfg.solver.grf_alpha, a.grf_alpha);
    set(&mut cfg.solver.grf_tau, a.grf_tau);
    cfg.data.dir = Some(a.common.out.clone());
    cfg.solver.validate()?;
    if cfg.data.train == 0 || cfg.data.test == 0 {
        return Err(CliError::config("--train and --test must both be ≥ 1"));
    }

    let out = &a.common.out;
    create_dir(out)?;
    cfg.write(out)?;
    log::info!(
        "simulating {} + {} trajectories on {}²",
        cfg.data.train,
        cfg.data.test,
        cfg.solver.grid
    );
    let (train, test) =
        generate_dataset(&cfg.solver, cfg.data.train, cfg.data.test).map_err(|e| CliError::from_stage(Stage::Solve, e))?;
    let mut files = Vec::new();
    for (name, ts) in [("train.bin", &train), ("test.bin", &test)] {
        let bytes = leuq_core::pde::encode_dataset(ts)?;
        write_file(&out.join(name), &bytes)?;
        files.push(ManifestEntry {
            file: name.to_string(),
            split: ts.split,
            shape: ts.shape(),
            bytes: bytes.len(),
            crc32: crc32fast::hash(&bytes),
        });
    }
    let manifest = Manifest {
        format: "leuq-dataset",
        version: leuq_core::pde::FORMAT_VERSION,
        solver: &cfg.solver,
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::config(e.to_string()))?;
    write_file(&out.join("manifest.json"), text)
}

fn data_dir(cfg: &RunConfig) -> CliResult<&Path> {
    cfg.data
        .dir
        .as_deref()
        .ok_or_else(|| CliError::config("no dataset directory (use --data)"))
}

fn read_split(dir: &Path, name: &str) -> CliResult<TrajectorySet> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(CliError::config(format!("dataset file {} not found", path.display())));
    }
    load_dataset(&path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = prepare(&a.common)?;
    set(&mut cfg.data.dir, a.data.map(Some));
    let m = &mut cfg.model;
    set(&mut m.variant, a.variant);
    set(&mut m.latent_dim, a.latent_dim);
    set(&mut m.channels, a.channels);
    set(&mut m.conv_blocks, a.conv_blocks);
    set(&mut m.history, a.history);
    set(&mut m.horizon, a.horizon);
    set(&mut m.bundle, a.bundle);
    let t = &mut cfg.train;
    set(&mut t.loss, a.loss);
    set(&mut t.ensemble, a.ensemble);
    set(&mut t.epochs, a.epochs);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.lr, a.lr);
    set(&mut t.lr_min, a.lr_min);
    // a deterministic model cannot be trained on the likelihood
    if !cfg.model.variant.with_sigma() && a.loss.is_none() && cfg.train.loss == LossFlavor::Nll {
        cfg.train.loss = LossFlavor::Mse;
    }
    cfg.model.loss = cfg.train.loss;

    let train = read_split(data_dir(&cfg)?, "train.bin")?;
    // the grid is a property of the data
    cfg.model.grid = train.grid();
    cfg.model.validate()?;
    cfg.train.validate()?;

    let out = &a.common.out;
    create_dir(out)?;
    cfg.write(out)?;
    let windows = make_bundled_windows(
        &train,
        cfg.model.input_frames(),
        cfg.model.horizon,
        cfg.model.bundle,
    )?;
    log::info!(
        "training {} member(s) of {} on {} windows",
        cfg.train.ensemble,
        cfg.model.variant,
        windows.len()
    );
    let members =
        train_ensemble(&windows, &cfg.train, &cfg.model).map_err(|e| CliError::from_stage(Stage::Train, e))?;
    let mut csv = String::from("member,epoch,lr,total,multi_step,reconstruction,consistency\n");
    for (k, m) in members.iter().enumerate() {
        for r in &m.history {
            let _ = writeln!(
                csv,
                "{k},{},{},{},{},{},{}",
                r.epoch, r.lr, r.loss.total, r.loss.multi_step, r.loss.reconstruction, r.loss.consistency
            );
        }
        m.model.save(out.join(format!("member_{k}.ckpt")))?;
    }
    write_file(&out.join("metrics.csv"), csv)
}

/// Loads `member_0.ckpt, member_1.ckpt, …` in index order.
pub fn load_ensemble(dir: &Path, limit: Option<usize>) -> CliResult<Vec<SurrogateModel>> {
    if !dir.is_dir() {
        return Err(CliError::config(format!("ensemble directory {} not found", dir.display())));
    }
    let mut members = Vec::new();
    loop {
        if limit.is_some_and(|l| members.len() >= l) {
            break;
        }
        let path = dir.join(format!("member_{}.ckpt", members.len()));
        if !path.exists() {
            break;
        }
        let m = SurrogateModel::load(&path)
            .map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
        members.push(m);
    }
    if members.is_empty() {
        return Err(CliError::Checkpoint(format!("no member_k.ckpt files in {}", dir.display())));
    }
    if let Some(l) = limit {
        if members.len() < l {
            return Err(CliError::config(format!("asked for {l} members, found {}", members.len())));
        }
    }
    let first = members[0].config();
    if let Some(k) = members.iter().position(|m| m.config() != first) {
        return Err(CliError::Checkpoint(format!("member {k} has a different configuration than member 0")));
    }
    Ok(members)
}

fn check_grid(members: &[SurrogateModel], data: &TrajectorySet) -> CliResult<()> {
    let grid = members[0].config().grid;
    if grid != data.grid() {
        return Err(CliError::Checkpoint(format!(
            "checkpoints expect a {grid}² grid, dataset is {}²",
            data.grid()
        )));
    }
    Ok(())
}

fn ensemble_dir(cfg: &RunConfig) -> CliResult<&Path> {
    cfg.ensemble_dir
        .as_deref()
        .ok_or_else(|| CliError::config("no ensemble directory (use --ensemble-dir)"))
}

pub fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let mut cfg = prepare(&a.common)?;
    set(&mut cfg.data.dir, a.data.map(Some));
    set(&mut cfg.ensemble_dir, a.ensemble_dir.map(Some));
    set(&mut cfg.eval.mode, a.mode);
    set(&mut cfg.eval.horizon, a.horizon);
    set(&mut cfg.eval.members, a.members.map(Some));
    if cfg.eval.horizon == 0 {
        return Err(CliError::config("--horizon must be ≥ 1"));
    }
    let test = read_split(data_dir(&cfg)?, "test.bin")?;
    let members = load_ensemble(ensemble_dir(&cfg)?, cfg.eval.members)?;
    check_grid(&members, &test)?;
    cfg.model = members[0].config().clone();

    let out = &a.common.out;
    create_dir(out)?;
    cfg.write(out)?;
    let report = evaluate_rollout(&members, &test, cfg.eval.mode, cfg.eval.horizon)?;
    log::info!("MA {:.4} L2 {:.4}", report.ma(), report.point.l2);
    report.write(out)?;
    Ok(())
}

#[derive(Serialize)]
struct ProblemRecord<'a> {
    route: InverseRoute,
    target: InverseTarget,
    trajectory: usize,
    start: usize,
    k_start: usize,
    k_end: usize,
    iterations: usize,
    lr: f64,
    static_param: &'a Option<Vec<f64>>,
    members: usize,
}

#[derive(Serialize)]
struct MemberRecord {
    member: usize,
    dimension: usize,
    initial_objective: f64,
    final_objective: f64,
}

#[derive(Serialize)]
struct InversionSummary {
    members: Vec<MemberRecord>,
    failures: Vec<(usize, String)>,
    /// ‖μ* − U⁰‖ / ‖U⁰‖ of the recovered field.
    relative_l2: f64,
}

pub fn cmd_invert(a: InvertArgs) -> CliResult<()> {
    let mut cfg = prepare(&a.common)?;
    set(&mut cfg.data.dir, a.data.map(Some));
    set(&mut cfg.ensemble_dir, a.ensemble_dir.map(Some));
    let v = &mut cfg.invert;
    set(&mut v.route, a.route);
    set(&mut v.target, a.target);
    set(&mut v.iterations, a.iterations);
    set(&mut v.lr, a.lr);
    set(&mut v.trajectory, a.trajectory);
    set(&mut v.start, a.start.map(Some));
    set(&mut v.k_start, a.k_start);
    set(&mut v.k_end, a.k_end);
    set(&mut v.static_param, a.static_param.map(Some));

    let test = read_split(data_dir(&cfg)?, "test.bin")?;
    let members = load_ensemble(ensemble_dir(&cfg)?, None)?;
    check_grid(&members, &test)?;
    let mcfg = members[0].config().clone();
    cfg.model = mcfg.clone();
    let inv = &mut cfg.invert;
    let (n, s) = (mcfg.grid, mcfg.bundle);
    let start = *inv.start.get_or_insert(mcfg.input_frames() - 1);
    if inv.trajectory >= test.len() {
        return Err(CliError::config(format!(
            "trajectory {} out of range ({} test trajectories)",
            inv.trajectory,
            test.len()
        )));
    }
    if inv.k_start < 1 || inv.k_end < inv.k_start {
        return Err(CliError::config("need 1 ≤ k_start ≤ k_end"));
    }
    // U⁰ covers frames start−S+1..=start, U^m the S frames after start+(m−1)·S
    let first_obs = start + (inv.k_start - 1) * s + 1;
    let k = inv.k_end - inv.k_start + 1;
    if start + 1 < s || first_obs + k * s > test.snapshots() {
        return Err(CliError::config(format!(
            "observation window k = {}..={} from snapshot {start} does not fit in {} snapshots",
            inv.k_start,
            inv.k_end,
            test.snapshots()
        )));
    }
    let observations = Tensor::new(vec![k, s, n, n], test.frames(inv.trajectory, first_obs, k * s).to_vec())?;
    let truth = Tensor::new(vec![s, n, n], test.frames(inv.trajectory, start + 1 - s, s).to_vec())?;
    let mut prob = InverseProblem::new(observations, inv.k_start, inv.k_end);
    prob.target = inv.target;
    prob.iterations = inv.iterations;
    prob.lr = inv.lr;
    prob.static_param = inv.static_param.clone();
    prob.truth = Some(truth.clone());
    prob.validate(&members[0])?;

    let out = &a.common.out;
    create_dir(out)?;
    cfg.write(out)?;
    let inv = &cfg.invert;
    let record = ProblemRecord {
        route: inv.route,
        target: inv.target,
        trajectory: inv.trajectory,
        start,
        k_start: inv.k_start,
        k_end: inv.k_end,
        iterations: inv.iterations,
        lr: inv.lr,
        static_param: &inv.static_param,
        members: members.len(),
    };
    write_json(&out.join("problem.json"), &record)?;

    let sol = inverse_uq(&members, &prob, inv.route).map_err(|e| CliError::from_stage(Stage::Invert, e))?;
    let single = leuq_core::pde::SolverConfig {
        snapshots: 1,
        ..test.config.clone()
    };
    let field_set = |n_traj: usize, data: Vec<f64>| TrajectorySet::new(single.clone(), Split::Test, n_traj, data);
    save_dataset(&field_set(1, sol.mean.data().to_vec())?, out.join("recovered_mean.bin"))?;
    save_dataset(&field_set(1, sol.sigma.data().to_vec())?, out.join("recovered_sigma.bin"))?;
    let all: Vec<f64> = sol.members.iter().flat_map(|m| m.field.data().to_vec()).collect();
    save_dataset(&field_set(sol.members.len(), all)?, out.join("recovered_members.bin"))?;

    let mut trace = String::from("member,iteration,objective\n");
    for (k, m) in sol.members.iter().enumerate() {
        for (i, v) in m.trace.iter().enumerate() {
            let _ = writeln!(trace, "{k},{i},{v}");
        }
    }
    write_file(&out.join("objective_trace.csv"), trace)?;
    let num: f64 = sol.mean.data().iter().zip(truth.data()).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = truth.data().iter().map(|b| b * b).sum();
    let summary = InversionSummary {
        members: sol
            .members
            .iter()
            .enumerate()
            .map(|(member, m)| MemberRecord {
                member,
                dimension: m.dimension,
                initial_objective: m.initial_objective,
                final_objective: m.final_objective,
            })
            .collect(),
        failures: sol.failures.clone(),
        relative_l2: (num / den.max(f64::MIN_POSITIVE)).sqrt(),
    };
    write_json(&out.join("inversion.json"), &summary)?;
    if let Some(report) = &sol.report {
        report.write(out)?;
    }
    log::info!("recovered field relative L2 {:.4}", summary.relative_l2);
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::config(e.to_string()))?;
    write_file(path, text)
}
