use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{StateId, World};
use crate::error::{CoreError, Result};
use crate::reward::{GradientRecord, RewardModel, DEFAULT_DEPTH, DEFAULT_WIDTH};
use crate::trajectory::{Trajectory, TrajectoryBatch};

use super::objective::{group_by_goal, log_likelihood, maxent_gradient};
use super::soft_vi::{value_iteration, Backup, SoftSolution, ViOptions, DEFAULT_GAMMA, DEFAULT_VI_MAX_ITERS, DEFAULT_VI_TOL};
use super::svf::{expected_svf, expert_svf, Svf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    /// Forward-pass length; `None` means `4 * (rows + cols)`.
    pub horizon: Option<usize>,
    pub vi_tol: f64,
    pub vi_max_iters: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Gaussian prior precision on the parameters, applied as decay.
    pub lambda: f64,
    pub seed: u64,
    pub width: usize,
    pub depth: usize,
    /// Step halvings tried before an epoch keeps its parameters.
    pub max_backtracks: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Initial output-layer bias. Rewards must be negative for agents to
    /// prefer reaching the goal over wandering.
    pub init_bias: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: DEFAULT_GAMMA,
            horizon: None,
            vi_tol: DEFAULT_VI_TOL,
            vi_max_iters: DEFAULT_VI_MAX_ITERS,
            epochs: 60,
            learning_rate: 0.01,
            lambda: 1e-4,
            seed: 0,
            width: DEFAULT_WIDTH,
            depth: DEFAULT_DEPTH,
            max_backtracks: 6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            init_bias: -4.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(CoreError::Invalid(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.vi_tol > 0.0) {
            return Err(CoreError::Invalid(format!("vi_tol must be positive, got {}", self.vi_tol)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CoreError::Invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CoreError::Invalid(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.horizon == Some(0) {
            return Err(CoreError::Invalid("horizon must be at least 1".into()));
        }
        if !self.init_bias.is_finite() {
            return Err(CoreError::Invalid("init_bias must be finite".into()));
        }
        Ok(())
    }

    pub fn horizon_for(&self, world: &World) -> usize {
        self.horizon.unwrap_or(4 * (world.rows() + world.cols()))
    }

    /// Fresh model for `world` with the configured architecture and seed.
    pub fn init_model(&self, world: &World) -> Result<RewardModel> {
        let mut model = RewardModel::init(self.seed, world.feature_dim(), self.width, self.depth)?;
        let mut theta = model.theta();
        let last = theta.len() - 1;
        theta[last] = self.init_bias;
        model.set_theta(&theta)?;
        Ok(model)
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Goal-conditioned log-likelihood summed over trips.
    pub log_likelihood: f64,
    pub grad_norm: f64,
    /// Mean over goals of the final VI residual.
    pub mean_residual: f64,
    pub wall_time_ms: u64,
    /// Step size multiplier taken in this epoch; 0 when no step was accepted.
    pub step_scale: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RewardModel,
    /// Row `k` describes the parameters after `k` updates; row 0 is the
    /// initial model.
    pub history: Vec<EpochRecord>,
    pub initial_grad_norm: f64,
    pub final_grad_norm: f64,
}

/// Everything the objective needs at one parameter vector.
pub struct Evaluation {
    pub rewards: Vec<f64>,
    pub solutions: BTreeMap<StateId, SoftSolution>,
    pub log_likelihood: f64,
    pub excluded: Vec<usize>,
    pub expected: Svf,
    pub mean_residual: f64,
}

/// Solves every goal, accumulates the expected SVF (one unit per trip,
/// divided by the trip count) and scores the trips.
pub fn evaluate(
    world: &World,
    trajs: &[Trajectory],
    groups: &BTreeMap<StateId, Vec<usize>>,
    model: &RewardModel,
    config: &TrainConfig,
    warm: Option<&BTreeMap<StateId, SoftSolution>>,
) -> Result<Evaluation> {
    let rewards = model.rewards(world)?;
    let horizon = config.horizon_for(world);
    let n = world.num_states();
    let per_goal: Vec<(StateId, SoftSolution, Svf)> = groups
        .par_iter()
        .map(|(&goal, idx)| {
            let warm_start = warm.and_then(|w| w.get(&goal)).map(|s| s.values.as_slice());
            let opts = ViOptions {
                gamma: config.gamma,
                tol: config.vi_tol,
                max_iters: config.vi_max_iters,
                backup: Backup::Soft,
                warm_start,
            };
            let sol = value_iteration(world, &rewards, goal, &opts)?;
            let mut origin = vec![0.0; n];
            for &i in idx {
                origin[trajs[i].origin().index()] += 1.0;
            }
            let svf = expected_svf(world, &sol, &origin, horizon)?.transient(goal);
            Ok((goal, sol, svf))
        })
        .collect::<Result<_>>()?;

    let mut expected = Svf::zeros(n, horizon);
    let mut solutions = BTreeMap::new();
    let mut residual_sum = 0.0;
    let scale = 1.0 / trajs.len() as f64;
    for (goal, sol, svf) in per_goal {
        expected.add_scaled(&svf, scale);
        residual_sum += sol.residual();
        solutions.insert(goal, sol);
    }
    let ll = log_likelihood(world, trajs, &solutions)?;
    Ok(Evaluation {
        rewards,
        mean_residual: residual_sum / solutions.len().max(1) as f64,
        solutions,
        log_likelihood: ll.total,
        excluded: ll.excluded,
        expected,
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, config: &TrainConfig) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
        }
    }

    /// Ascent direction for gradient `g`, in units of the learning rate.
    fn direction(&mut self, g: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        self.m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(g)
            .map(|((m, v), &gi)| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                (*m / c1) / ((*v / c2).sqrt() + self.eps)
            })
            .collect()
    }
}

/// Trains a fresh model from `config`.
pub fn train(world: &World, batch: &TrajectoryBatch, config: &TrainConfig) -> Result<TrainOutcome> {
    let model = config.init_model(world)?;
    train_from(world, batch, config, model)
}

/// MaxEnt deep IRL by Adam ascent on the likelihood with the Gaussian prior
/// applied as decoupled decay. A step is taken only if it does not lower the
/// log-likelihood, halving it up to `max_backtracks` times.
pub fn train_from(
    world: &World,
    batch: &TrajectoryBatch,
    config: &TrainConfig,
    mut model: RewardModel,
) -> Result<TrainOutcome> {
    config.validate()?;
    if batch.is_empty() {
        return Err(CoreError::Empty("trajectory batch"));
    }
    if model.input_dim() != world.feature_dim() {
        return Err(CoreError::DimensionMismatch { expected: world.feature_dim(), got: model.input_dim() });
    }
    let trajs = batch.trajectories();
    for t in trajs {
        world.check_state(t.destination())?;
    }
    let groups = group_by_goal(trajs);
    let expert = expert_svf(batch, world)?;
    let start = Instant::now();

    // Likelihood part only; the prior enters the update as decoupled decay.
    let gradient = |model: &RewardModel, eval: &Evaluation| -> Result<GradientRecord> {
        maxent_gradient(&expert, &eval.expected, model, world, 0.0)
    };
    let objective_norm = |model: &RewardModel, g: &GradientRecord| -> f64 {
        let mut full = g.clone();
        full.add_assign(&model.prior_gradient(config.lambda));
        full.norm()
    };

    let mut eval = evaluate(world, trajs, &groups, &model, config, None)?;
    if !eval.excluded.is_empty() {
        log::warn!("{} trips have zero probability under the initial model", eval.excluded.len());
    }
    let mut grad = gradient(&model, &eval)?;
    let initial_grad_norm = objective_norm(&model, &grad);
    let mut history = vec![EpochRecord {
        epoch: 0,
        log_likelihood: eval.log_likelihood,
        grad_norm: initial_grad_norm,
        mean_residual: eval.mean_residual,
        wall_time_ms: start.elapsed().as_millis() as u64,
        step_scale: 0.0,
    }];
    let mut adam = Adam::new(model.num_params(), config);

    for epoch in 1..=config.epochs {
        let theta = model.theta();
        let dir = adam.direction(&grad.values);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=config.max_backtracks {
            let step = config.learning_rate * scale;
            let cand: Vec<f64> = theta
                .iter()
                .zip(&dir)
                .map(|(t, d)| t + step * (d - config.lambda * t))
                .collect();
            if cand.iter().any(|x| !x.is_finite()) {
                return Err(CoreError::NonFiniteParameters {
                    epoch,
                    detail: format!("step of size {step} produced non-finite parameters"),
                });
            }
            let cand_model = model.with_theta(&cand)?;
            let cand_eval = evaluate(world, trajs, &groups, &cand_model, config, Some(&eval.solutions))?;
            if cand_eval.excluded.len() <= eval.excluded.len() && cand_eval.log_likelihood >= eval.log_likelihood {
                accepted = Some((cand_model, cand_eval));
                break;
            }
            scale *= 0.5;
        }
        let step_scale = match accepted {
            Some((m, e)) => {
                model = m;
                eval = e;
                grad = gradient(&model, &eval)?;
                scale
            }
            None => 0.0,
        };
        if !grad.is_finite() {
            return Err(CoreError::NonFiniteParameters { epoch, detail: "gradient is not finite".into() });
        }
        let rec = EpochRecord {
            epoch,
            log_likelihood: eval.log_likelihood,
            grad_norm: objective_norm(&model, &grad),
            mean_residual: eval.mean_residual,
            wall_time_ms: start.elapsed().as_millis() as u64,
            step_scale,
        };
        log::info!(
            "epoch {epoch}: log-likelihood {:.6}, |grad| {:.3e}, step {step_scale}",
            rec.log_likelihood,
            rec.grad_norm
        );
        history.push(rec);
    }
    Ok(TrainOutcome { final_grad_norm: objective_norm(&model, &grad), model, history, initial_grad_norm })
}

/// Writes the history as CSV. With `include_wall_time` false the timing
/// column is omitted, which makes the output reproducible byte for byte.
pub fn write_history_csv<W: Write>(history: &[EpochRecord], out: W, include_wall_time: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["epoch", "log_likelihood", "grad_norm", "mean_residual"];
    if include_wall_time {
        header.push("wall_time_ms");
    }
    w.write_record(&header)?;
    for r in history {
        let mut row = vec![
            r.epoch.to_string(),
            format!("{:.12e}", r.log_likelihood),
            format!("{:.12e}", r.grad_norm),
            format!("{:.12e}", r.mean_residual),
        ];
        if include_wall_time {
            row.push(r.wall_time_ms.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
