//! Command-line front end. Every subcommand writes into one run directory
//! together with the resolved configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bayes_dsac::{self, load_checkpoint, FusionMode, TrainingConfig, ValueDistribution};
use crate::bench::{self, ModePolicy, PlannerMode};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, manipulability, whole_body_jacobian, Configuration, RobotModel, Twist};
use crate::perception::{ClearanceSet, Scene};
use crate::qp_controller::{build_qp, kkt_residuals, solve_qp, QpStatus};
use crate::sim::toy::ToyReach;
use crate::sim::{write_trajectory_csv, EnvSetup, Environment, RobotEnv, SceneCycle};

/// Overrides the `output` root of every run.
pub const RUN_ROOT_ENV: &str = "WBPLAN_RUN_ROOT";

#[derive(Debug, Parser)]
#[command(name = "wbplan", version, about = "Reactive whole-body planning for mobile manipulators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy; `mode` is `toy` or a learned planner mode.
    Train(CommonArgs),
    /// Evaluate a checkpoint with deterministic actions.
    Eval(EvalArgs),
    /// Run the benchmark suite.
    Bench(BenchArgs),
    /// Run one planning episode and dump its trajectory.
    Plan(PlanArgs),
    /// Run the built-in oracle checks.
    Check(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; defaults to `<root>/<subcommand>-<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `key.path=value` config overrides.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated planner modes, e.g. `HORF,HRA`.
    #[arg(long)]
    pub modes: Option<String>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint for learned modes.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Index into the scene list.
    #[arg(long, default_value_t = 0)]
    pub scene: usize,
}

/// Parses `argv` and runs it, returning the process exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                1
            } else {
                2
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Train(a) => {
            let run = Run::prepare("train", &a, &[])?;
            train(&run)?;
            Ok(run.dir)
        }
        Command::Eval(a) => {
            let run = Run::prepare("eval", &a.common, &[])?;
            eval(&run, &a.checkpoint, a.episodes)?;
            Ok(run.dir)
        }
        Command::Bench(a) => {
            let mut extra = Vec::new();
            if let Some(m) = &a.modes {
                let list: Vec<String> = m.split(',').map(|s| format!("\"{}\"", s.trim())).collect();
                extra.push(format!("bench.modes=[{}]", list.join(",")));
            }
            if let Some(t) = a.threads {
                extra.push(format!("bench.threads={t}"));
            }
            let run = Run::prepare("bench", &a.common, &extra)?;
            bench(&run)?;
            Ok(run.dir)
        }
        Command::Plan(a) => {
            let run = Run::prepare("plan", &a.common, &[])?;
            plan(&run, a.checkpoint.as_deref(), a.scene)?;
            Ok(run.dir)
        }
        Command::Check(a) => {
            let run = Run::prepare("check", &a, &[])?;
            check(&run)?;
            Ok(run.dir)
        }
    }
}

struct Run {
    cfg: RunConfig,
    dir: PathBuf,
}

impl Run {
    fn prepare(name: &str, args: &CommonArgs, extra: &[String]) -> Result<Run> {
        let mut overrides = args.overrides.clone();
        overrides.extend_from_slice(extra);
        if let Some(seed) = args.seed {
            overrides.push(format!("seed={seed}"));
        }
        let cfg = match &args.config {
            Some(path) => RunConfig::load(path, &overrides)?,
            None => RunConfig::from_overrides(&overrides)?,
        };
        let dir = match &args.out {
            Some(d) => d.clone(),
            None => {
                let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| cfg.output.clone());
                root.join(format!("{name}-{}", cfg.seed))
            }
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let echo = dir.join("config.toml");
        std::fs::write(&echo, cfg.to_toml()).map_err(|e| Error::io(&echo, e))?;
        Ok(Run { cfg, dir })
    }

    fn write(&self, file: &str, text: &str) -> Result<()> {
        let path = self.dir.join(file);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn model(&self) -> Result<RobotModel> {
        match &self.cfg.robot {
            Some(p) => RobotModel::load(p),
            None => Ok(RobotModel::default()),
        }
    }

    fn scenes(&self) -> Result<Vec<Scene>> {
        if self.cfg.scenes.is_empty() {
            return Ok(bench::procedural_suite(self.cfg.bench.scene_count, self.cfg.seed));
        }
        self.cfg.scenes.iter().map(|p| Scene::load(p)).collect()
    }

    fn setup(&self) -> Result<EnvSetup> {
        Ok(EnvSetup {
            model: self.model()?,
            controller: self.cfg.controller.clone(),
            reward: self.cfg.reward.clone(),
            sim: self.cfg.sim.clone(),
            depth: self.cfg.depth.clone(),
            ..EnvSetup::default()
        })
    }

    /// Planner mode from `mode`, with a default when it is empty.
    fn planner_mode(&self, default: PlannerMode) -> Result<PlannerMode> {
        if self.cfg.mode.is_empty() {
            return Ok(default);
        }
        self.cfg.mode.parse().map_err(|message| Error::Config {
            path: "<config>".into(),
            line: 0,
            field: "mode".into(),
            message,
        })
    }

    fn is_toy(&self) -> bool {
        self.cfg.mode.eq_ignore_ascii_case("toy")
    }
}

fn training_config(run: &Run, mode: Option<PlannerMode>) -> TrainingConfig {
    let mut t = run.cfg.training.clone();
    t.seed = run.cfg.seed;
    if mode == Some(PlannerMode::Hfss) {
        t.fusion_mode = FusionMode::ScalarDoubleQ;
    }
    t
}

#[derive(Serialize)]
struct TrainSummary {
    mode: String,
    fusion_mode: String,
    steps: usize,
    episodes: usize,
    skipped_updates: usize,
    final_return: Option<f64>,
    failure: Option<String>,
}

fn train(run: &Run) -> Result<()> {
    let (outcome, mode_name, tcfg) = if run.is_toy() {
        let tcfg = training_config(run, None);
        let mut env = ToyReach::new(run.cfg.toy.clone());
        let mut eval_env = ToyReach::new(run.cfg.toy.clone());
        (bayes_dsac::train(&mut env, &mut eval_env, &tcfg)?, "toy".to_owned(), tcfg)
    } else {
        let mode = run.planner_mode(PlannerMode::Horf)?;
        if !mode.is_learned() {
            return Err(Error::Config {
                path: "<config>".into(),
                line: 0,
                field: "mode".into(),
                message: format!("{} has no learned policy", mode.name()),
            });
        }
        let tcfg = training_config(run, Some(mode));
        let setup = mode.setup(&run.setup()?);
        let scenes = run.scenes()?;
        let mut env = SceneCycle::new(&setup, &scenes);
        let mut eval_env = SceneCycle::new(&setup, &scenes);
        (bayes_dsac::train(&mut env, &mut eval_env, &tcfg)?, mode.name().to_owned(), tcfg)
    };
    bayes_dsac::write_curve_csv(&outcome.curve, &run.dir.join("curve.csv"))?;
    outcome.checkpoint(tcfg.total_steps).save(&run.dir.join("checkpoint.json"))?;
    let summary = TrainSummary {
        mode: mode_name,
        fusion_mode: tcfg.fusion_mode.name().to_owned(),
        steps: tcfg.total_steps,
        episodes: outcome.episodes,
        skipped_updates: outcome.skipped_updates,
        final_return: outcome.final_return(),
        failure: outcome.failure.clone(),
    };
    run.write("summary.toml", &to_toml(&summary)?)?;
    match outcome.failure {
        Some(f) => Err(Error::Report(format!("training hit a non-finite gradient at {f}"))),
        None => Ok(()),
    }
}

fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Report(e.to_string()))
}

fn eval(run: &Run, checkpoint: &Path, episodes: usize) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let returns = if run.is_toy() {
        let mut env = ToyReach::new(run.cfg.toy.clone());
        check_dims(&env, &ck.agent)?;
        bayes_dsac::evaluate(&ck.agent, &mut env, episodes, run.cfg.seed)?
    } else {
        let mode = run.planner_mode(PlannerMode::Horf)?;
        let setup = mode.setup(&run.setup()?);
        let mut env = SceneCycle::new(&setup, &run.scenes()?);
        check_dims(&env, &ck.agent)?;
        bayes_dsac::evaluate(&ck.agent, &mut env, episodes, run.cfg.seed)?
    };
    let mut csv = String::from("episode,return\n");
    for (i, r) in returns.iter().enumerate() {
        let _ = writeln!(csv, "{i},{r:.9}");
    }
    run.write("eval.csv", &csv)
}

fn check_dims(env: &dyn Environment, agent: &bayes_dsac::Agent) -> Result<()> {
    if env.action_bounds() != agent.action_bounds || env.dims() != agent.obs_dims() {
        return Err(Error::Checkpoint("checkpoint does not match the environment's observation or action shape".into()));
    }
    Ok(())
}

fn load_policy(run: &Run, mode: PlannerMode, explicit: Option<&Path>) -> Result<ModePolicy> {
    if !mode.is_learned() {
        return Ok(ModePolicy::Servo);
    }
    let path = explicit.map(Path::to_path_buf).or_else(|| run.cfg.bench.checkpoint_for(mode).cloned());
    let Some(path) = path else {
        return Err(Error::Config {
            path: "<config>".into(),
            line: 0,
            field: format!("bench.checkpoints.{}", checkpoint_key(mode)),
            message: format!("mode {} needs a checkpoint", mode.name()),
        });
    };
    Ok(ModePolicy::Learned(Box::new(load_checkpoint(&path)?.agent)))
}

fn checkpoint_key(mode: PlannerMode) -> &'static str {
    match mode {
        PlannerMode::Rlmm => "rlmm",
        PlannerMode::Hfss => "hfss",
        _ => "horf",
    }
}

fn bench(run: &Run) -> Result<()> {
    let b = &run.cfg.bench;
    let modes = b.planner_modes()?;
    let scenes = run.scenes()?;
    let base = run.setup()?;
    let mut policies = Vec::with_capacity(modes.len());
    for m in modes {
        policies.push((m, load_policy(run, m, None)?));
    }
    let results = bench::run_suite(&policies, &base, &scenes, b.episodes, b.max_ticks, run.cfg.seed, b.threads)?;
    let (per_mode, per_scene, timings) = bench::tables(&results);
    bench::emit_report(&per_mode, &run.dir.join("report.csv"))?;
    bench::emit_report(&per_scene, &run.dir.join("per_scene.csv"))?;
    run.write("timing.csv", &bench::timing_csv(&timings))?;
    run.write("episodes.csv", &episodes_csv(&results))
}

/// Per-episode outcomes without wall-clock fields.
fn episodes_csv(results: &[bench::EpisodeResult]) -> String {
    let mut out = String::from(
        "mode,scene,seed,success,collision,timeout,tl_base,tl_ee,av,ticks,sim_time,min_clearance,min_perceived,infeasible_ticks\n",
    );
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.9},{:.9},{:.9},{},{:.9},{:.9},{:.9},{}",
            r.mode.name(),
            r.scene,
            r.seed,
            r.success,
            r.collision,
            r.timeout,
            r.tl_base,
            r.tl_ee,
            r.av,
            r.ticks,
            r.sim_time,
            r.min_clearance,
            r.min_perceived,
            r.infeasible_ticks
        );
    }
    out
}

fn plan(run: &Run, checkpoint: Option<&Path>, scene: usize) -> Result<()> {
    let mode = run.planner_mode(PlannerMode::Hra)?;
    let scenes = run.scenes()?;
    let Some(scene) = scenes.get(scene) else {
        return Err(Error::Config {
            path: "<command line>".into(),
            line: 0,
            field: "scene".into(),
            message: format!("scene index {scene} out of range ({} scenes)", scenes.len()),
        });
    };
    let policy = load_policy(run, mode, checkpoint)?;
    let mut env = RobotEnv::new(mode.setup(&run.setup()?), scene.clone());
    env.record_trajectory(true);
    env.reset_episode(run.cfg.seed)?;
    let r = bench::run_from(&mut env, mode, &policy, run.cfg.seed, run.cfg.bench.max_ticks);
    write_trajectory_csv(env.trajectory(), &run.dir.join("trajectory.csv"))?;
    env.cloud().write_xyz(&run.dir.join("cloud.xyz"))?;
    run.write("episode.csv", &episodes_csv(std::slice::from_ref(&r)))
}

/// One line of the oracle report.
#[derive(Clone, Debug)]
pub struct CheckLine {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(run: &Run) -> Result<()> {
    let model = run.model()?;
    let lines = oracle_suite(&model, &run.cfg.controller, run.cfg.seed);
    let mut report = String::new();
    for l in &lines {
        let _ = writeln!(report, "{} {}: {}", if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
    }
    print!("{report}");
    run.write("check.txt", &report)?;
    let failed = lines.iter().filter(|l| !l.pass).count();
    if failed > 0 {
        return Err(Error::Report(format!("{failed} check(s) failed")));
    }
    Ok(())
}

fn random_configuration(model: &RobotModel, rng: &mut ChaCha8Rng) -> Configuration {
    let arm = model
        .joints
        .iter()
        .map(|j| rng.gen_range(j.lower() + 0.05..j.upper() - 0.05))
        .collect();
    Configuration::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-3.0..3.0), arm)
}

/// Fusion formulas, Jacobian and manipulability gradients against finite
/// differences, and KKT residuals of random controller QPs.
pub fn oracle_suite(model: &RobotModel, controller: &crate::qp_controller::ControllerConfig, seed: u64) -> Vec<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let (m1, m2) = (rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0));
        let (s1, s2): (f64, f64) = (rng.gen_range(0.01..10.0), rng.gen_range(0.01..10.0));
        let f = bayes_dsac::bayes_fuse_raw(ValueDistribution::new(m1, s1), ValueDistribution::new(m2, s2));
        let (p1, p2) = (1.0 / (s1 * s1), 1.0 / (s2 * s2));
        let mean = (p1 * m1 + p2 * m2) / (p1 + p2);
        let err = ((f.mean - mean).abs() / mean.abs().max(1.0)).max(((1.0 / (f.std * f.std)) / (p1 + p2) - 1.0).abs());
        let between = f.mean >= m1.min(m2) - 1e-12 && f.mean <= m1.max(m2) + 1e-12;
        worst = worst.max(if between { err } else { f64::INFINITY });
    }
    lines.push(CheckLine {
        name: "fusion",
        pass: worst <= 1e-12,
        detail: format!("max rel error {worst:.2e} over 10000 pairs"),
    });

    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let q = random_configuration(model, &mut rng);
        let jac = whole_body_jacobian(model, &q);
        for i in 0..model.dof() {
            let mut e = DVector::zeros(model.dof());
            e[i] = 1.0;
            let up = forward_kinematics(model, &q.advanced(&e, h)).ee;
            let down = forward_kinematics(model, &q.advanced(&e, -h)).ee;
            let lin = (up.translation.vector - down.translation.vector) / (2.0 * h);
            let ang = (up.rotation * down.rotation.inverse()).scaled_axis() / (2.0 * h);
            for k in 0..3 {
                worst = worst.max((jac[(k, i)] - lin[k]).abs()).max((jac[(3 + k, i)] - ang[k]).abs());
            }
        }
    }
    lines.push(CheckLine {
        name: "jacobian",
        pass: worst <= 1e-5,
        detail: format!("max abs error {worst:.2e} over 20 configurations"),
    });

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let q = random_configuration(model, &mut rng);
        let m = manipulability(model, &q.arm);
        let mut arm = q.arm.clone();
        for i in 0..arm.len() {
            let step = 1e-5;
            let orig = arm[i];
            arm[i] = orig + step;
            let up = manipulability(model, &arm).value;
            arm[i] = orig - step;
            let down = manipulability(model, &arm).value;
            arm[i] = orig;
            let fd = (up - down) / (2.0 * step);
            worst = worst.max((m.gradient[i] - fd).abs() / fd.abs().max(1e-3));
        }
    }
    lines.push(CheckLine {
        name: "manipulability gradient",
        pass: worst <= 1e-4,
        detail: format!("max rel error {worst:.2e} over 20 configurations"),
    });

    let mut worst = 0.0f64;
    let mut primal = 0.0f64;
    let mut optimal = 0;
    for _ in 0..100 {
        let q = random_configuration(model, &mut rng);
        let twist = Twist::from_slice(&(0..6).map(|_| rng.gen_range(-0.3..0.3)).collect::<Vec<_>>());
        let rows = rng.gen_range(0..8);
        let clear = ClearanceSet {
            distances: DVector::from_fn(rows, |_, _| rng.gen_range(0.12..0.6)),
            gradients: DMatrix::from_fn(rows, model.dof(), |_, _| rng.gen_range(-1.0..1.0)),
        };
        let p = build_qp(controller, model, &q, &twist, &clear, rng.gen_range(0.05..3.0));
        let s = solve_qp(&p, &controller.solver);
        if s.status != QpStatus::Optimal {
            continue;
        }
        optimal += 1;
        let r = kkt_residuals(&p, &s);
        let scale = 1.0 + p.c.amax();
        primal = primal.max(r.primal);
        worst = worst
            .max(r.stationarity / scale)
            .max(r.dual_sign / scale)
            .max(r.complementarity / scale);
    }
    lines.push(CheckLine {
        name: "qp kkt",
        pass: worst <= 1e-4 && primal <= controller.solver.eps_abs && optimal > 0,
        detail: format!("{optimal}/100 optimal, worst scaled residual {worst:.2e}, primal {primal:.2e}"),
    });
    lines
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_suite_passes_on_default_model() {
        let lines = oracle_suite(&RobotModel::default(), &Default::default(), 1);
        for l in &lines {
            assert!(l.pass, "{}: {}", l.name, l.detail);
        }
    }

    #[test]
    fn unknown_flag_is_a_config_error() {
        assert_eq!(dispatch(["wbplan", "plan", "--bogus"]), 1);
    }

    #[test]
    fn missing_scene_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let args = Cli::try_parse_from([
            "wbplan",
            "plan",
            "--seed",
            "1",
            "--out",
            dir.path().to_str().unwrap(),
            "scenes=[\"/nonexistent/room.toml\"]",
        ])
        .unwrap();
        let err = run(args).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("/nonexistent/room.toml"), "{err}");
    }

    #[test]
    fn seed_is_required() {
        let dir = tempfile::tempdir().unwrap();
        let args = Cli::try_parse_from(["wbplan", "check", "--out", dir.path().to_str().unwrap()]).unwrap();
        assert!(run(args).unwrap_err().is_config());
    }

    #[test]
    fn episodes_csv_has_no_wall_time() {
        let header = episodes_csv(&[]);
        assert!(!header.contains("wall"));
    }
}
