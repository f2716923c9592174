//! Seeded episode batches per planner mode, Table-style metrics and reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes_dsac::{train, Agent, CurvePoint, TrainingConfig};
use crate::error::{Error, Result};
use crate::kinematics::forward_kinematics;
use crate::perception::{Obstacle, Scene, Workspace};
use crate::qp_controller::QpStatus;
use crate::sim::{ActionMode, AvoidanceKind, EnvSetup, Environment, RobotEnv};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PlannerMode {
    /// Learned twist policy through the QP, capsule avoidance.
    #[serde(rename = "HORF")]
    Horf,
    /// Position servo through the QP, capsule avoidance.
    #[serde(rename = "HRA")]
    Hra,
    /// Learned whole-body joint velocities, no QP.
    #[serde(rename = "RLMM")]
    Rlmm,
    /// Scalar double-Q policy through the QP.
    #[serde(rename = "HFSS")]
    Hfss,
    /// Learned twist policy through the QP with sampled-point avoidance.
    #[serde(rename = "HFBS")]
    Hfbs,
}

impl PlannerMode {
    pub const ALL: [PlannerMode; 5] = [PlannerMode::Horf, PlannerMode::Hra, PlannerMode::Rlmm, PlannerMode::Hfss, PlannerMode::Hfbs];

    pub fn name(self) -> &'static str {
        match self {
            PlannerMode::Horf => "HORF",
            PlannerMode::Hra => "HRA",
            PlannerMode::Rlmm => "RLMM",
            PlannerMode::Hfss => "HFSS",
            PlannerMode::Hfbs => "HFBS",
        }
    }

    pub fn action_mode(self) -> ActionMode {
        match self {
            PlannerMode::Rlmm => ActionMode::Direct,
            _ => ActionMode::Twist,
        }
    }

    pub fn avoidance(self) -> AvoidanceKind {
        match self {
            PlannerMode::Hfbs => AvoidanceKind::SampledPoints,
            _ => AvoidanceKind::Capsules,
        }
    }

    pub fn is_learned(self) -> bool {
        self != PlannerMode::Hra
    }

    /// Environment setup for this mode derived from a shared base.
    pub fn setup(self, base: &EnvSetup) -> EnvSetup {
        EnvSetup {
            mode: self.action_mode(),
            avoidance: self.avoidance(),
            ..base.clone()
        }
    }
}

impl FromStr for PlannerMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        PlannerMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown planner mode `{s}` (expected one of HORF, HRA, RLMM, HFSS, HFBS)"))
    }
}

pub fn parse_modes(list: &str) -> std::result::Result<Vec<PlannerMode>, String> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

/// Action source for a mode.
#[derive(Clone, Debug)]
pub enum ModePolicy {
    /// Position servo twist (HRA).
    Servo,
    Learned(Box<Agent>),
    /// Constant action, for harness tests.
    Fixed(Vec<f64>),
}

impl ModePolicy {
    fn action(&self, env: &RobotEnv, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            ModePolicy::Servo => env.servo_twist().to_array().to_vec(),
            ModePolicy::Learned(agent) => agent.act(&env.observation().to_vec(), true, rng).0,
            ModePolicy::Fixed(a) => a.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub mode: PlannerMode,
    pub scene: String,
    pub seed: u64,
    pub success: bool,
    pub collision: bool,
    /// Ran out of simulated time.
    pub timeout: bool,
    pub tl_base: f64,
    pub tl_ee: f64,
    /// EE path length over elapsed simulated time, m/s.
    pub av: f64,
    pub ticks: usize,
    pub sim_time: f64,
    /// Exact minimum clearance over the episode, m.
    pub min_clearance: f64,
    /// Minimum perceived clearance over the episode, m.
    pub min_perceived: f64,
    /// Ticks on which the tracking QP was reported infeasible.
    pub infeasible_ticks: usize,
    /// Policy inference plus QP build and solve; rendering excluded.
    pub planning_wall_time: f64,
}

impl EpisodeResult {
    /// Equality on everything except wall-clock time.
    pub fn same_outcome(&self, other: &EpisodeResult) -> bool {
        let mut a = self.clone();
        a.planning_wall_time = other.planning_wall_time;
        &a == other
    }
}

/// Runs a reset environment to termination or `max_ticks`.
pub fn run_from(env: &mut RobotEnv, mode: PlannerMode, policy: &ModePolicy, seed: u64, max_ticks: usize) -> EpisodeResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let dt = env.setup.controller.dt;
    let mut base_xy = {
        let q = env.configuration();
        [q.base.x, q.base.y]
    };
    let mut ee = env.ee_position();
    let mut out = EpisodeResult {
        mode,
        scene: env.scene.name.clone(),
        seed,
        success: false,
        collision: false,
        timeout: false,
        tl_base: 0.0,
        tl_ee: 0.0,
        av: 0.0,
        ticks: 0,
        sim_time: 0.0,
        min_clearance: env.min_true_clearance(),
        min_perceived: env.clearances().min(),
        infeasible_ticks: 0,
        planning_wall_time: 0.0,
    };
    // Episodes end only on success, collision or the tick budget.
    env.setup.sim.horizon = usize::MAX;
    for _ in 0..max_ticks {
        let t0 = Instant::now();
        let action = policy.action(env, &mut rng);
        let resolved = env.resolve(&action);
        out.planning_wall_time += t0.elapsed().as_secs_f64();
        if resolved.status == Some(QpStatus::Infeasible) {
            out.infeasible_ticks += 1;
        }
        let r = env.apply(&action, resolved);
        out.ticks += 1;
        let q = env.configuration();
        let p = forward_kinematics(&env.setup.model, q).ee_position();
        out.tl_base += ((q.base.x - base_xy[0]).powi(2) + (q.base.y - base_xy[1]).powi(2)).sqrt();
        out.tl_ee += (p - ee).norm();
        base_xy = [q.base.x, q.base.y];
        ee = p;
        out.min_clearance = out.min_clearance.min(r.info.min_clearance);
        out.min_perceived = out.min_perceived.min(r.info.min_perceived);
        if r.info.success || r.info.collision {
            out.success = r.info.success;
            out.collision = r.info.collision;
            break;
        }
    }
    out.timeout = !out.success && !out.collision;
    out.sim_time = out.ticks as f64 * dt;
    out.av = if out.sim_time > 0.0 { out.tl_ee / out.sim_time } else { 0.0 };
    out
}

pub fn run_episode(mode: PlannerMode, policy: &ModePolicy, base: &EnvSetup, scene: &Scene, seed: u64, max_ticks: usize) -> Result<EpisodeResult> {
    let mut env = RobotEnv::new(mode.setup(base), scene.clone());
    env.reset_episode(seed)?;
    Ok(run_from(&mut env, mode, policy, seed, max_ticks))
}

/// Sum after sorting, so the result does not depend on input order.
fn ordered_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

fn mean_of(v: Vec<f64>) -> Option<f64> {
    let n = v.len();
    (n > 0).then(|| ordered_sum(v) / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub mode: String,
    pub scene: String,
    pub episodes: usize,
    pub successes: usize,
    pub collisions: usize,
    pub timeouts: usize,
    pub success_rate: f64,
    /// Means over successful episodes; absent with no successes.
    pub tl_base: Option<f64>,
    pub tl_ee: Option<f64>,
    pub av: Option<f64>,
    pub exec_time: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

pub fn aggregate(mode: &str, scene: &str, results: &[EpisodeResult]) -> MetricsRow {
    let ok: Vec<&EpisodeResult> = results.iter().filter(|r| r.success).collect();
    let n = results.len();
    MetricsRow {
        mode: mode.to_owned(),
        scene: scene.to_owned(),
        episodes: n,
        successes: ok.len(),
        collisions: results.iter().filter(|r| r.collision).count(),
        timeouts: results.iter().filter(|r| r.timeout).count(),
        success_rate: if n > 0 { ok.len() as f64 / n as f64 } else { 0.0 },
        tl_base: mean_of(ok.iter().map(|r| r.tl_base).collect()),
        tl_ee: mean_of(ok.iter().map(|r| r.tl_ee).collect()),
        av: mean_of(ok.iter().map(|r| r.av).collect()),
        exec_time: mean_of(ok.iter().map(|r| r.sim_time).collect()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub mode: String,
    pub scene: String,
    /// Mean planning wall time per episode, s.
    pub planning: f64,
    /// Mean planning wall time per tick, s.
    pub planning_per_tick: f64,
    /// Mean planning plus simulated execution time per episode, s.
    pub total_runtime: f64,
}

pub fn timing(mode: &str, scene: &str, results: &[EpisodeResult]) -> TimingRow {
    let n = results.len().max(1) as f64;
    let ticks: usize = results.iter().map(|r| r.ticks).sum();
    let planning = ordered_sum(results.iter().map(|r| r.planning_wall_time).collect());
    TimingRow {
        mode: mode.to_owned(),
        scene: scene.to_owned(),
        planning: planning / n,
        planning_per_tick: planning / ticks.max(1) as f64,
        total_runtime: ordered_sum(results.iter().map(|r| r.planning_wall_time + r.sim_time).collect()) / n,
    }
}

/// Per-mode rows (all scenes pooled) and per-mode, per-scene rows, in the
/// order modes and scenes first appear.
pub fn tables(results: &[EpisodeResult]) -> (MetricsTable, MetricsTable, Vec<TimingRow>) {
    let mut modes: Vec<PlannerMode> = Vec::new();
    let mut scenes: Vec<String> = Vec::new();
    for r in results {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
        if !scenes.contains(&r.scene) {
            scenes.push(r.scene.clone());
        }
    }
    let mut per_mode = MetricsTable::default();
    let mut per_scene = MetricsTable::default();
    let mut times = Vec::new();
    for m in &modes {
        let mine: Vec<EpisodeResult> = results.iter().filter(|r| r.mode == *m).cloned().collect();
        per_mode.rows.push(aggregate(m.name(), "all", &mine));
        times.push(timing(m.name(), "all", &mine));
        for s in &scenes {
            let sub: Vec<EpisodeResult> = mine.iter().filter(|r| &r.scene == s).cloned().collect();
            if !sub.is_empty() {
                per_scene.rows.push(aggregate(m.name(), s, &sub));
                times.push(timing(m.name(), s, &sub));
            }
        }
    }
    (per_mode, per_scene, times)
}

const REPORT_HEADER: &str = "mode,scene,episodes,successes,collisions,timeouts,success_rate,tl_base,tl_ee,av,exec_time";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn report_csv(table: &MetricsTable) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in &table.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{:?},{},{},{},{}",
            r.mode,
            r.scene,
            r.episodes,
            r.successes,
            r.collisions,
            r.timeouts,
            r.success_rate,
            opt(r.tl_base),
            opt(r.tl_ee),
            opt(r.av),
            opt(r.exec_time)
        )
        .unwrap();
    }
    out
}

pub fn parse_report_csv(text: &str) -> Result<MetricsTable> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Report("unexpected header".into()));
    }
    let bad = |line: usize, what: &str| Error::Report(format!("line {}: {what}", line + 2));
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(bad(i, "expected 11 fields"));
        }
        let int = |k: usize| f[k].parse::<usize>().map_err(|_| bad(i, "bad count"));
        let float = |k: usize| -> Result<Option<f64>> {
            if f[k].is_empty() {
                Ok(None)
            } else {
                f[k].parse::<f64>().map(Some).map_err(|_| bad(i, "bad number"))
            }
        };
        rows.push(MetricsRow {
            mode: f[0].to_owned(),
            scene: f[1].to_owned(),
            episodes: int(2)?,
            successes: int(3)?,
            collisions: int(4)?,
            timeouts: int(5)?,
            success_rate: float(6)?.ok_or_else(|| bad(i, "missing success rate"))?,
            tl_base: float(7)?,
            tl_ee: float(8)?,
            av: float(9)?,
            exec_time: float(10)?,
        });
    }
    Ok(MetricsTable { rows })
}

/// Writes the CSV at `path` and a structured-text summary next to it.
pub fn emit_report(table: &MetricsTable, path: &Path) -> Result<()> {
    std::fs::write(path, report_csv(table)).map_err(|e| Error::io(path, e))?;
    let summary = path.with_extension("toml");
    let text = toml::to_string(table).map_err(|e| Error::Report(e.to_string()))?;
    std::fs::write(&summary, text).map_err(|e| Error::io(&summary, e))
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("mode,scene,planning_s,planning_per_tick_s,total_runtime_s\n");
    for r in rows {
        writeln!(out, "{},{},{:.6},{:.9},{:.6}", r.mode, r.scene, r.planning, r.planning_per_tick, r.total_runtime).unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointPaths {
    pub horf: Option<PathBuf>,
    pub rlmm: Option<PathBuf>,
    pub hfss: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub modes: Vec<String>,
    pub episodes: usize,
    /// Tick budget per episode; 2400 ticks of 0.05 s is two simulated minutes.
    pub max_ticks: usize,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
    pub checkpoints: CheckpointPaths,
    /// Procedural scenes generated when no scene files are given.
    pub scene_count: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            modes: PlannerMode::ALL.iter().map(|m| m.name().to_owned()).collect(),
            episodes: 50,
            max_ticks: 2400,
            threads: 0,
            checkpoints: CheckpointPaths::default(),
            scene_count: 4,
        }
    }
}

impl BenchConfig {
    pub fn planner_modes(&self) -> Result<Vec<PlannerMode>> {
        self.modes
            .iter()
            .map(|m| {
                m.parse().map_err(|message| Error::Config {
                    path: "<bench>".into(),
                    line: 0,
                    field: "bench.modes".into(),
                    message,
                })
            })
            .collect()
    }

    pub fn checkpoint_for(&self, mode: PlannerMode) -> Option<&PathBuf> {
        match mode {
            PlannerMode::Horf | PlannerMode::Hfbs => self.checkpoints.horf.as_ref(),
            PlannerMode::Rlmm => self.checkpoints.rlmm.as_ref(),
            PlannerMode::Hfss => self.checkpoints.hfss.as_ref(),
            PlannerMode::Hra => None,
        }
    }
}

/// Cluttered room `index` of the procedural suite; density grows with the
/// index.
pub fn procedural_scene(index: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(index as u64));
    let workspace = Workspace {
        min: [-3.0, -3.0, 0.0],
        max: [3.0, 3.0, 2.0],
    };
    let count = 4 + 3 * index;
    let mut obstacles = Vec::with_capacity(count);
    for k in 0..count {
        let x = rng.gen_range(-2.6..2.6);
        let y = rng.gen_range(-2.6..2.6);
        if k % 2 == 0 {
            let r = rng.gen_range(0.15..0.35);
            obstacles.push(Obstacle::Sphere {
                center: [x, y, rng.gen_range(0.3..1.4)],
                radius: r,
            });
        } else {
            let hx = rng.gen_range(0.15..0.3);
            let hy = rng.gen_range(0.15..0.3);
            obstacles.push(Obstacle::Box {
                min: [x - hx, y - hy, 0.0],
                max: [x + hx, y + hy, rng.gen_range(0.4..1.2)],
            });
        }
    }
    Scene {
        name: format!("clutter{}", index + 1),
        workspace,
        goal_region: Some(Workspace {
            min: [-2.5, -2.5, 0.4],
            max: [2.5, 2.5, 1.2],
        }),
        goal: None,
        obstacles,
    }
}

pub fn procedural_suite(count: usize, seed: u64) -> Vec<Scene> {
    (0..count).map(|i| procedural_scene(i, seed)).collect()
}

/// Episode seed shared by every mode, so modes are compared on the same
/// start and goal pairs.
pub fn episode_seed(run_seed: u64, scene: usize, episode: usize) -> u64 {
    run_seed.wrapping_mul(1_000_003) ^ ((scene as u64) << 32) ^ episode as u64
}

/// Runs `episodes` per scene for every mode, in parallel on `threads`
/// workers (0 = all cores). Output order is fixed.
pub fn run_suite(
    modes: &[(PlannerMode, ModePolicy)],
    base: &EnvSetup,
    scenes: &[Scene],
    episodes: usize,
    max_ticks: usize,
    run_seed: u64,
    threads: usize,
) -> Result<Vec<EpisodeResult>> {
    let jobs: Vec<(usize, usize, usize)> = (0..modes.len())
        .flat_map(|m| (0..scenes.len()).flat_map(move |s| (0..episodes).map(move |e| (m, s, e))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Report(e.to_string()))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|&(m, s, e)| {
                let (mode, policy) = &modes[m];
                run_episode(*mode, policy, base, &scenes[s], episode_seed(run_seed, s, e), max_ticks)
            })
            .collect()
    })
}

/// Summary numbers of a learning curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveStats {
    pub final_return: f64,
    pub peak: f64,
    /// First eval step reaching 95% of the way from the first to the final
    /// return.
    pub steps_to_95: usize,
    /// Some eval point after the first third dropped below half of the
    /// progress from the first point to the peak.
    pub collapsed: bool,
}

pub fn curve_stats(curve: &[CurvePoint]) -> Option<CurveStats> {
    let first = curve.first()?.mean_return;
    let last = curve.last()?.mean_return;
    let peak = curve.iter().map(|p| p.mean_return).fold(f64::NEG_INFINITY, f64::max);
    let goal = first + 0.95 * (last - first);
    let steps_to_95 = curve.iter().find(|p| p.mean_return >= goal).map_or(curve.last()?.step, |p| p.step);
    let third = curve.len() / 3;
    let collapsed = peak > first && curve[third..].iter().any(|p| (p.mean_return - first) < 0.5 * (peak - first));
    Some(CurveStats {
        final_return: last,
        peak,
        steps_to_95,
        collapsed,
    })
}

#[derive(Clone, Debug)]
pub struct StudyRun {
    pub label: String,
    pub seed: u64,
    pub curve: Vec<CurvePoint>,
    pub failure: Option<String>,
}

/// Trains every `(label, config)` variant for each seed on fresh
/// environments from `make_env`; seeds are paired across variants.
pub fn learner_study<E: Environment>(make_env: &dyn Fn() -> E, variants: &[(String, TrainingConfig)], seeds: &[u64]) -> Result<Vec<StudyRun>> {
    let mut out = Vec::new();
    for (label, cfg) in variants {
        for &seed in seeds {
            let cfg = TrainingConfig { seed, ..cfg.clone() };
            let mut env = make_env();
            let mut eval = make_env();
            let o = train(&mut env, &mut eval, &cfg)?;
            out.push(StudyRun {
                label: label.clone(),
                seed,
                curve: o.curve,
                failure: o.failure,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::Configuration;
    use nalgebra::Vector3;

    fn result(success: bool, collision: bool, tl: f64) -> EpisodeResult {
        EpisodeResult {
            mode: PlannerMode::Hra,
            scene: "s".into(),
            seed: 0,
            success,
            collision,
            timeout: !success && !collision,
            tl_base: tl,
            tl_ee: 2.0 * tl,
            av: tl / 4.0,
            ticks: 80,
            sim_time: 4.0,
            min_clearance: 0.2,
            min_perceived: 0.2,
            infeasible_ticks: 0,
            planning_wall_time: 0.01,
        }
    }

    #[test]
    fn mode_names_parse() {
        assert_eq!(parse_modes("HORF,hra").unwrap(), vec![PlannerMode::Horf, PlannerMode::Hra]);
        assert!(parse_modes("HORF,XYZ").is_err());
    }

    #[test]
    fn aggregate_cases() {
        let row = aggregate("HRA", "s", &[result(true, false, 3.0)]);
        assert_eq!(row.tl_base, Some(3.0));
        let set = [result(true, false, 1.0), result(true, false, 2.0), result(true, false, 4.5), result(false, true, 9.0)];
        let row = aggregate("HRA", "s", &set);
        assert_eq!(row.success_rate, 0.75);
        assert_eq!(row.collisions, 1);
        // Spreadsheet-style recomputation over the successes.
        assert_eq!(row.tl_base, Some((1.0 + 2.0 + 4.5) / 3.0));
        assert_eq!(row.tl_ee, Some((2.0 + 4.0 + 9.0) / 3.0));
        let none = aggregate("HRA", "s", &[result(false, true, 1.0)]);
        assert_eq!(none.tl_base, None);
        assert_eq!(none.success_rate, 0.0);
    }

    #[test]
    fn aggregate_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut set: Vec<EpisodeResult> = (0..40).map(|_| result(rng.gen_bool(0.7), false, rng.gen_range(0.0..10.0))).collect();
        let a = aggregate("HRA", "s", &set);
        for _ in 0..10 {
            for i in (1..set.len()).rev() {
                set.swap(i, rng.gen_range(0..=i));
            }
            assert_eq!(aggregate("HRA", "s", &set), a);
        }
    }

    #[test]
    fn report_round_trip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        emit_report(&MetricsTable::default(), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), format!("{REPORT_HEADER}\n"));
        let set = [result(true, false, 1.0 / 3.0), result(false, true, 2.0)];
        let table = MetricsTable {
            rows: vec![aggregate("HRA", "s", &set), aggregate("HORF", "t", &[result(false, false, 1.0)])],
        };
        emit_report(&table, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(parse_report_csv(&text).unwrap(), table);
        emit_report(&table, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), text);
        assert!(path.with_extension("toml").exists());
    }

    #[test]
    fn spawned_at_goal_succeeds_immediately() {
        let scene = procedural_scene(0, 1);
        let base = EnvSetup::default();
        let mut env = RobotEnv::new(PlannerMode::Hra.setup(&base), scene);
        env.reset_episode(3).unwrap();
        let q = env.configuration().clone();
        let ee = env.ee_position();
        env.reset_to(q, ee, 3).unwrap();
        let r = run_from(&mut env, PlannerMode::Hra, &ModePolicy::Servo, 3, 100);
        assert!(r.success);
        assert_eq!(r.ticks, 1);
        assert!(r.tl_ee < 1e-3, "{}", r.tl_ee);
    }

    #[test]
    fn zero_policy_times_out_in_place() {
        let base = EnvSetup::default();
        let mut env = RobotEnv::new(PlannerMode::Rlmm.setup(&base), Scene::empty(procedural_scene(0, 0).workspace));
        let model = env.setup.model.clone();
        env.reset_to(Configuration::new(0.0, 0.0, 0.0, model.mid_range()), Vector3::new(2.0, 2.0, 1.0), 0).unwrap();
        let r = run_from(&mut env, PlannerMode::Rlmm, &ModePolicy::Fixed(vec![0.0; 9]), 0, 30);
        assert!(r.timeout && !r.success && !r.collision);
        assert_eq!(r.tl_base, 0.0);
        assert_eq!(r.ticks, 30);
    }

    #[test]
    fn episodes_repeat_exactly() {
        let scenes = procedural_suite(2, 7);
        let base = EnvSetup::default();
        let a = run_episode(PlannerMode::Hra, &ModePolicy::Servo, &base, &scenes[1], 11, 60).unwrap();
        let b = run_episode(PlannerMode::Hra, &ModePolicy::Servo, &base, &scenes[1], 11, 60).unwrap();
        assert!(a.same_outcome(&b));
        let c = run_episode(PlannerMode::Hfbs, &ModePolicy::Servo, &base, &scenes[1], 11, 60).unwrap();
        let d = run_episode(PlannerMode::Hfbs, &ModePolicy::Servo, &base, &scenes[1], 11, 60).unwrap();
        assert!(c.same_outcome(&d));
    }

    #[test]
    fn suite_is_thread_count_independent() {
        let scenes = procedural_suite(2, 3);
        let base = EnvSetup::default();
        let modes = vec![(PlannerMode::Hra, ModePolicy::Servo)];
        let a = run_suite(&modes, &base, &scenes, 2, 40, 9, 1).unwrap();
        let b = run_suite(&modes, &base, &scenes, 2, 40, 9, 2).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.iter().zip(&b).all(|(x, y)| x.same_outcome(y)));
    }

    #[test]
    fn curve_stats_cases() {
        let pt = |step, r| CurvePoint {
            step,
            mean_return: r,
            std_return: 0.0,
            mean_q: 0.0,
            mean_sigma: 0.0,
            alpha: 0.0,
        };
        let c = vec![pt(1, -10.0), pt(2, -5.0), pt(3, -1.0), pt(4, -0.6), pt(5, -0.5), pt(6, -0.5)];
        let s = curve_stats(&c).unwrap();
        assert_eq!(s.final_return, -0.5);
        assert_eq!(s.steps_to_95, 4);
        assert!(!s.collapsed);
        let c = vec![pt(1, -10.0), pt(2, 0.0), pt(3, -1.0), pt(4, -8.0), pt(5, -1.0), pt(6, -1.0)];
        assert!(curve_stats(&c).unwrap().collapsed);
    }
}
