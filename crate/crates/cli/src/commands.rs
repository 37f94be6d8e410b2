//! The pipeline stages. Each reads its inputs from the run directory,
//! writes its outputs there, and leaves a manifest behind.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use velopref_core::env::{generate_synthetic_world, normalize_features, StateId, SynthConfig, World, WorldFile};
use velopref_core::explain::{
    dependence_data, global_importance, group_summary, local_trip_attribution, sample_background, write_dependence_csv,
    write_phi_csv, ShapleyReport,
};
use velopref_core::medirl::{train, write_history_csv, TrainConfig};
use velopref_core::metrics::{evaluate_triples, svf_distribution, write_pair_csv, write_svf_csv, PathTriple};
use velopref_core::reward::RewardModel;
use velopref_core::rollout::{
    generate_experts, planted_to_rewards, rollout_batch, sample_od_pairs, shortest_path, solve_goals, ExpertConfig,
    RolloutConfig, RolloutMode,
};
use velopref_core::trajectory::{
    filter_trips, match_raw_trip, pad_and_mask, parse_trips, period_label, to_trajectory, trajectories_from_json,
    trajectories_to_json, trip_stats, FilterReport, MatchedTrip, RecordError, Trajectory, TrajectoryRecord, TripFormat,
};

use crate::config::{derive_seed, ExpertOptions, RawTripOptions, RunConfig, TrajectorySource, WorldSource};
use crate::error::{CliError, Result};
use crate::manifest::Manifest;

pub const WORLD: &str = "world.json";
pub const PLANTED: &str = "planted_reward.csv";
pub const EXPERTS: &str = "experts.json";
pub const HOLDOUT: &str = "holdout.json";
pub const EXPERT_REPORT: &str = "experts_report.json";
pub const MODEL: &str = "model.json";
pub const HISTORY: &str = "history.csv";
pub const TIMING: &str = "timing.csv";
pub const TRAIN_SUMMARY: &str = "train_summary.json";
pub const ROLLOUTS: &str = "rollouts.json";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const PAIRS: &str = "pairs.csv";
pub const SVF: &str = "svf.csv";
pub const PHI: &str = "phi.csv";
pub const IMPORTANCE: &str = "importance.json";
pub const LOCAL: &str = "local_attributions.json";
pub const TRIP_STATS: &str = "trip_stats.json";
pub const TRIP_DISTANCES: &str = "trip_distances.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    GenWorld,
    GenExperts,
    Train,
    Rollout,
    Evaluate,
    Explain,
    TripStats,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenWorld,
        Stage::GenExperts,
        Stage::Train,
        Stage::Rollout,
        Stage::Evaluate,
        Stage::Explain,
        Stage::TripStats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenWorld => "gen-world",
            Stage::GenExperts => "gen-experts",
            Stage::Train => "train",
            Stage::Rollout => "rollout",
            Stage::Evaluate => "evaluate",
            Stage::Explain => "explain",
            Stage::TripStats => "trip-stats",
        }
    }
}

/// Runs one stage and returns its manifest, already written to disk.
pub fn run_stage(stage: Stage, cfg: &RunConfig) -> Result<Manifest> {
    let mut run = Run::new(stage, cfg)?;
    match stage {
        Stage::GenWorld => gen_world(&mut run)?,
        Stage::GenExperts => gen_experts(&mut run)?,
        Stage::Train => train_stage(&mut run)?,
        Stage::Rollout => rollout_stage(&mut run)?,
        Stage::Evaluate => evaluate_stage(&mut run)?,
        Stage::Explain => explain_stage(&mut run)?,
        Stage::TripStats => trip_stats_stage(&mut run)?,
    }
    run.manifest.write(&run.dir)?;
    Ok(run.manifest)
}

struct Run<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    manifest: Manifest,
}

impl<'a> Run<'a> {
    fn new(stage: Stage, cfg: &'a RunConfig) -> Result<Run<'a>> {
        let dir = cfg.out_dir.clone();
        std::fs::create_dir_all(&dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
        Ok(Run { cfg, dir, manifest: Manifest::new(stage.name(), cfg.seed, cfg.hash()) })
    }

    fn seed(&self, component: &str) -> u64 {
        derive_seed(self.cfg.seed, component)
    }

    /// Reads an upstream artifact and records its digest.
    fn read(&mut self, name: &str, producer: &'static str) -> Result<String> {
        let p = self.dir.join(name);
        if !p.is_file() {
            return Err(CliError::MissingInput { path: p, stage: producer });
        }
        let text = std::fs::read_to_string(&p).map_err(CliError::io(format!("reading {}", p.display())))?;
        self.manifest.record_input(&self.dir, name)?;
        Ok(text)
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.dir.join(name);
        std::fs::write(&p, bytes).map_err(CliError::io(format!("writing {}", p.display())))?;
        self.manifest.record_output(&self.dir, name)
    }

    /// Written but left out of the digests (wall-clock timings).
    fn write_volatile(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.dir.join(name);
        std::fs::write(&p, bytes).map_err(CliError::io(format!("writing {}", p.display())))?;
        self.manifest.volatile.push(name.to_owned());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(velopref_core::CoreError::from)?;
        self.write(name, text + "\n")
    }

    fn world(&mut self) -> Result<World> {
        let text = self.read(WORLD, "gen-world")?;
        Ok(World::from_json(&text)?)
    }

    fn trajectories(&mut self, world: &World, name: &str) -> Result<Vec<Trajectory>> {
        let text = self.read(name, "gen-experts")?;
        Ok(trajectories_from_json(&text, world)?)
    }

    fn model(&mut self) -> Result<RewardModel> {
        let text = self.read(MODEL, "train")?;
        Ok(RewardModel::from_json(&text)?)
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> velopref_core::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn gen_world(run: &mut Run) -> Result<()> {
    let (world, planted) = match &run.cfg.world {
        WorldSource::Synthetic(s) => {
            let sc = SynthConfig {
                rows: s.rows,
                cols: s.cols,
                blocked_fraction: s.blocked_fraction,
                feature_dim: s.feature_dim,
                planted_weights: s.planted_weights.clone(),
                seed: run.seed("world"),
                cell_size: s.cell_size,
                ..SynthConfig::new(s.rows, s.cols, s.feature_dim, Vec::new())
            };
            let (w, p) = generate_synthetic_world(&sc)?;
            (w, Some(p))
        }
        WorldSource::File(f) => {
            let text = std::fs::read_to_string(&f.path).map_err(CliError::io(format!("reading {}", f.path.display())))?;
            run.manifest.inputs.insert(
                f.path.display().to_string(),
                hex::encode(Sha256::digest(text.as_bytes())),
            );
            let w = if TripFormat::from_path(&f.path) == Some(TripFormat::Csv) {
                if f.normalize {
                    return Err(CliError::Config("world.file.normalize applies to JSON worlds only".into()));
                }
                World::from_csv(&text, f.cell_size)?
            } else {
                let mut wf: WorldFile = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", f.path.display())))?;
                if f.normalize {
                    wf.features = normalize_features(&wf.features)?;
                }
                wf.into_world()?
            };
            (w, None)
        }
    };
    let text = world.to_json()?;
    if World::from_json(&text)? != world {
        return Err(CliError::Core(velopref_core::CoreError::Invalid("world failed to round-trip through JSON".into())));
    }
    run.write(WORLD, text + "\n")?;
    if let Some(planted) = planted {
        let mut out = String::from("state_id,row,col,planted\n");
        for s in world.states() {
            let c = world.cell(s);
            writeln!(out, "{},{},{},{:.17e}", s.0, c.row, c.col, planted[s.index()]).expect("string write");
        }
        run.write(PLANTED, out)?;
    }
    log::info!("world {}x{} with {} passable cells", world.rows(), world.cols(), world.num_states());
    Ok(())
}

fn parse_planted(text: &str, world: &World) -> Result<Vec<f64>> {
    let bad = |line: usize| CliError::Config(format!("{PLANTED} line {line} is malformed"));
    let values = text
        .lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.rsplit(',').next().and_then(|v| v.trim().parse::<f64>().ok()).ok_or_else(|| bad(i + 1)))
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != world.num_states() {
        return Err(CliError::Config(format!(
            "{PLANTED} has {} rows for {} states",
            values.len(),
            world.num_states()
        )));
    }
    Ok(values)
}

#[derive(Debug, Serialize)]
struct SyntheticReport {
    source: &'static str,
    train_pairs: usize,
    holdout_pairs: usize,
    expert_trips: usize,
    expert_truncated: usize,
    holdout_trips: usize,
    holdout_truncated: usize,
}

#[derive(Debug, Serialize)]
struct RawReport {
    source: &'static str,
    parsed: usize,
    parse_errors: Vec<RecordError>,
    unmatched: Vec<(String, String)>,
    filter: FilterReport,
    train_trips: usize,
    holdout_trips: usize,
}

fn gen_experts(run: &mut Run) -> Result<()> {
    let world = run.world()?;
    match run.cfg.trajectories.clone() {
        TrajectorySource::Synthetic(opts) => synthetic_experts(run, &world, &opts),
        TrajectorySource::Raw(opts) => ingest_raw(run, &world, &opts),
    }
}

fn synthetic_experts(run: &mut Run, world: &World, opts: &ExpertOptions) -> Result<()> {
    let planted = parse_planted(&run.read(PLANTED, "gen-world")?, world)?;
    let rewards = planted_to_rewards(&planted, opts.reward_scale, opts.reward_offset);
    let ods = sample_od_pairs(world, opts.train_pairs + opts.holdout_pairs, opts.min_od_cells, run.seed("od_pairs"))?;
    let (train_ods, holdout_ods) = ods.split_at(opts.train_pairs);

    let ecfg = ExpertConfig { trips: opts.trips, gamma: opts.gamma, max_steps: opts.max_steps, seed: run.seed("experts") };
    let set = generate_experts(world, &rewards, train_ods, &ecfg)?;
    let expert_truncated = set.truncated;
    let experts: Vec<Trajectory> = set
        .trajectories
        .into_iter()
        .enumerate()
        .map(|(k, t)| t.with_order_id(format!("expert-{k}")))
        .collect();

    // Held-out references follow the planted policy's most likely action.
    let goals: BTreeSet<StateId> = holdout_ods.iter().map(|&(_, g)| g).collect();
    let solutions = solve_goals(world, &rewards, goals, opts.gamma)?;
    let rcfg = RolloutConfig { mode: RolloutMode::Greedy, max_steps: opts.max_steps, seed: 0 };
    let refs = rollout_batch(world, &solutions, holdout_ods, &rcfg)?;
    let holdout_truncated = refs.iter().filter(|r| !r.terminated()).count();
    let holdout: Vec<Trajectory> = refs
        .into_iter()
        .enumerate()
        .filter(|(_, r)| r.terminated())
        .map(|(i, r)| r.trajectory.with_order_id(format!("holdout-{i}")))
        .collect();
    if holdout_truncated > 0 {
        log::warn!("{holdout_truncated} held-out reference rollouts never reached their goal");
    }

    run.write(EXPERTS, trajectories_to_json(&experts, world)? + "\n")?;
    run.write(HOLDOUT, trajectories_to_json(&holdout, world)? + "\n")?;
    let report = SyntheticReport {
        source: "synthetic",
        train_pairs: train_ods.len(),
        holdout_pairs: holdout_ods.len(),
        expert_trips: experts.len(),
        expert_truncated,
        holdout_trips: holdout.len(),
        holdout_truncated,
    };
    run.write_json(EXPERT_REPORT, &report)
}

/// Stable pseudo-random rank of a trip for the train/holdout split.
fn split_key(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

fn ingest_raw(run: &mut Run, world: &World, opts: &RawTripOptions) -> Result<()> {
    let format = TripFormat::from_path(&opts.path)
        .ok_or_else(|| CliError::Config(format!("{}: expected a .csv or .json trip file", opts.path.display())))?;
    let parsed = parse_trips(&opts.path, format)?;
    run.manifest
        .inputs
        .insert(opts.path.display().to_string(), crate::manifest::file_digest(&opts.path)?);

    let mut unmatched = Vec::new();
    let mut matched = Vec::new();
    let n_parsed = parsed.trips.len();
    for raw in parsed.trips {
        let traj = match_raw_trip(&raw, world, &opts.matching).and_then(|m| to_trajectory(&m.path, world));
        match traj {
            Ok(t) => {
                let t = t.with_order_id(raw.order_id.clone()).with_label(period_label(raw.start_time));
                matched.push(MatchedTrip { raw, trajectory: t });
            }
            Err(e) => unmatched.push((raw.order_id.clone(), e.to_string())),
        }
    }
    let outcome = filter_trips(matched, &run.cfg.filter);
    let mut kept: Vec<Trajectory> = outcome.kept.into_iter().map(|m| m.trajectory).collect();
    if kept.is_empty() {
        log::warn!("no trips survived matching and filtering");
    }

    let seed = run.seed("split");
    let mut order: Vec<usize> = (0..kept.len()).collect();
    order.sort_by_key(|&i| split_key(seed, kept[i].order_id.as_deref().unwrap_or_default()));
    let n_hold = (opts.holdout_fraction * kept.len() as f64).round() as usize;
    let held: BTreeSet<usize> = order[..n_hold].iter().copied().collect();
    let (mut holdout, mut train_set) = (Vec::new(), Vec::new());
    for (i, t) in kept.drain(..).enumerate() {
        if held.contains(&i) {
            holdout.push(t);
        } else {
            train_set.push(t);
        }
    }

    run.write(EXPERTS, trajectories_to_json(&train_set, world)? + "\n")?;
    run.write(HOLDOUT, trajectories_to_json(&holdout, world)? + "\n")?;
    let report = RawReport {
        source: "raw",
        parsed: n_parsed,
        parse_errors: parsed.errors,
        unmatched,
        filter: outcome.report,
        train_trips: train_set.len(),
        holdout_trips: holdout.len(),
    };
    run.write_json(EXPERT_REPORT, &report)
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    epochs: usize,
    initial_log_likelihood: f64,
    final_log_likelihood: f64,
    initial_grad_norm: f64,
    final_grad_norm: f64,
    trips: usize,
}

fn train_config(run: &Run) -> TrainConfig {
    TrainConfig { seed: run.seed("train"), ..run.cfg.train.clone() }
}

fn train_stage(run: &mut Run) -> Result<()> {
    let world = run.world()?;
    let experts = run.trajectories(&world, EXPERTS)?;
    if experts.is_empty() {
        return Err(CliError::Config(format!("{EXPERTS} holds no trajectories to learn from")));
    }
    let n = experts.len();
    let batch = pad_and_mask(experts)?;
    let out = train(&world, &batch, &train_config(run))?;

    run.write(MODEL, out.model.to_json()? + "\n")?;
    run.write(HISTORY, csv_bytes(|b| write_history_csv(&out.history, b, false))?)?;
    run.write_volatile(TIMING, csv_bytes(|b| write_history_csv(&out.history, b, true))?)?;
    let summary = TrainSummary {
        epochs: out.history.len() - 1,
        initial_log_likelihood: out.history[0].log_likelihood,
        final_log_likelihood: out.history.last().expect("history has the initial row").log_likelihood,
        initial_grad_norm: out.initial_grad_norm,
        final_grad_norm: out.final_grad_norm,
        trips: n,
    };
    run.write_json(TRAIN_SUMMARY, &summary)
}

/// One held-out trip with its synthetic and shortest-path counterparts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub real: TrajectoryRecord,
    pub synthetic: TrajectoryRecord,
    pub shortest: TrajectoryRecord,
    pub synthetic_terminated: bool,
}

fn rollout_stage(run: &mut Run) -> Result<()> {
    let world = run.world()?;
    let model = run.model()?;
    let refs = run.trajectories(&world, HOLDOUT)?;
    if refs.is_empty() {
        return Err(CliError::Config(format!("{HOLDOUT} holds no trajectories to pair with")));
    }
    let rewards = model.rewards(&world)?;
    let ods: Vec<(StateId, StateId)> = refs.iter().map(Trajectory::od).collect();
    let goals: BTreeSet<StateId> = ods.iter().map(|&(_, g)| g).collect();
    let solutions = solve_goals(&world, &rewards, goals, run.cfg.train.gamma)?;
    let rcfg = RolloutConfig {
        mode: run.cfg.rollout.mode,
        max_steps: run.cfg.rollout.max_steps,
        seed: run.seed("rollout"),
    };
    let synthetic = rollout_batch(&world, &solutions, &ods, &rcfg)?;
    let pairs = refs
        .iter()
        .zip(synthetic)
        .map(|(real, syn)| {
            let mut sp = shortest_path(&world, real.origin(), real.destination())?;
            let mut st = syn.trajectory;
            if let Some(id) = &real.order_id {
                st = st.with_order_id(id.clone());
                sp = sp.with_order_id(id.clone());
            }
            Ok(PairRecord {
                real: TrajectoryRecord::from_trajectory(real, &world),
                synthetic: TrajectoryRecord::from_trajectory(&st, &world),
                shortest: TrajectoryRecord::from_trajectory(&sp, &world),
                synthetic_terminated: syn.status != velopref_core::rollout::RolloutStatus::Truncated,
            })
        })
        .collect::<velopref_core::Result<Vec<_>>>()?;
    let truncated = pairs.iter().filter(|p| !p.synthetic_terminated).count();
    if truncated > 0 {
        log::warn!("{truncated} of {} synthetic rollouts hit max_steps", pairs.len());
    }
    run.write_json(ROLLOUTS, &pairs)
}

fn load_triples(run: &mut Run, world: &World) -> Result<Vec<PathTriple>> {
    let text = run.read(ROLLOUTS, "rollout")?;
    let records: Vec<PairRecord> =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{ROLLOUTS}: {e}")))?;
    records
        .into_iter()
        .map(|r| {
            let mut t = PathTriple::new(
                r.real.into_trajectory(world)?,
                r.synthetic.into_trajectory(world)?,
                r.shortest.into_trajectory(world)?,
            );
            t.synthetic_terminated = r.synthetic_terminated;
            Ok(t)
        })
        .collect()
}

fn evaluate_stage(run: &mut Run) -> Result<()> {
    let world = run.world()?;
    let model = run.model()?;
    let triples = load_triples(run, &world)?;
    let rewards = model.rewards(&world)?;
    let include = run.cfg.metrics.include_non_terminated;
    let report = evaluate_triples(&world, &triples, &rewards, include)?;

    let kept: Vec<&PathTriple> = triples.iter().filter(|t| include || t.synthetic_terminated).collect();
    let real = svf_distribution(kept.iter().map(|t| &t.real), &world)?;
    let syn = svf_distribution(kept.iter().map(|t| &t.synthetic), &world)?;
    let sp = svf_distribution(kept.iter().map(|t| &t.shortest), &world)?;
    run.write_json(EVAL_REPORT, &report)?;
    run.write(PAIRS, csv_bytes(|b| write_pair_csv(&triples, b))?)?;
    run.write(SVF, csv_bytes(|b| write_svf_csv(&world, &real, &syn, &sp, b))?)?;
    log::info!(
        "cpc synthetic {:.4} vs shortest {:.4}; jsd {:.4} vs {:.4}",
        report.mean_cpc_synthetic,
        report.mean_cpc_shortest,
        report.jsd,
        report.jsd_shortest
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct ImportanceFile {
    feature_names: Vec<String>,
    mean_abs: Vec<f64>,
    ranking: Vec<usize>,
    groups: BTreeMap<String, f64>,
    background: usize,
}

#[derive(Debug, Serialize)]
struct LocalTrip {
    order_id: Option<String>,
    cells: Vec<usize>,
    reports: Vec<ShapleyReport>,
}

fn explain_stage(run: &mut Run) -> Result<()> {
    let world = run.world()?;
    let model = run.model()?;
    let opts = run.cfg.explain.clone();
    let background = sample_background(&world, opts.background, run.seed("background"));
    let seed = run.seed("shapley");
    let gi = global_importance(&model, &world, &background, opts.samples, seed)?;

    run.write(PHI, csv_bytes(|b| write_phi_csv(&gi.table, b))?)?;
    for j in 0..world.feature_dim() {
        let pts = dependence_data(&gi.table, j)?;
        run.write(&format!("dependence_{j}.csv"), csv_bytes(|b| write_dependence_csv(&pts, b))?)?;
    }
    let file = ImportanceFile {
        feature_names: gi.table.feature_names.clone(),
        mean_abs: gi.mean_abs.clone(),
        ranking: gi.ranking.clone(),
        groups: group_summary(&gi, &opts.groups)?,
        background: background.len(),
    };
    run.write_json(IMPORTANCE, &file)?;

    if opts.local_trips > 0 {
        let refs = run.trajectories(&world, HOLDOUT)?;
        let local = refs
            .iter()
            .take(opts.local_trips)
            .map(|t| {
                Ok(LocalTrip {
                    order_id: t.order_id.clone(),
                    cells: t.states().iter().map(|&s| world.cell_index(s)).collect(),
                    reports: local_trip_attribution(&model, &world, t, &background, opts.samples, seed)?,
                })
            })
            .collect::<velopref_core::Result<Vec<_>>>()?;
        run.write_json(LOCAL, &local)?;
    }
    Ok(())
}

fn trip_stats_stage(run: &mut Run) -> Result<()> {
    let world = run.world()?;
    let mut trips = run.trajectories(&world, EXPERTS)?;
    trips.extend(run.trajectories(&world, HOLDOUT)?);
    let labels: Vec<String> = trips.iter().map(|t| t.label.clone().unwrap_or_else(|| "all".into())).collect();
    let stats = trip_stats(&world, &trips, &labels);
    let mut csv = String::from("order_id,label,manhattan_m,log10_distance,segment_count\n");
    for d in &stats.trips {
        writeln!(
            csv,
            "{},{},{},{},{}",
            d.order_id.as_deref().unwrap_or_default(),
            d.label,
            d.manhattan_m,
            d.log10_distance.map(|v| format!("{v:.12}")).unwrap_or_default(),
            d.segment_count
        )
        .expect("string write");
    }
    run.write_json(TRIP_STATS, &stats)?;
    run.write(TRIP_DISTANCES, csv)
}

/// Every stage in pipeline order.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Vec<Manifest>> {
    Stage::ALL.iter().map(|&s| run_stage(s, cfg)).collect()
}

/// The run directory's manifest for `stage`, if present.
pub fn read_manifest(dir: &Path, stage: Stage) -> Result<Manifest> {
    Manifest::load(dir, stage.name())
}
