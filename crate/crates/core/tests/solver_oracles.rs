mod oracles;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use velopref_core::env::{Cell, StateId, World};
use velopref_core::medirl::{
    evaluate, expected_svf, expert_svf, forward_distributions, group_by_goal, log_likelihood, maxent_gradient,
    soft_value_iteration, TrainConfig,
};
use velopref_core::reward::RewardModel;
use velopref_core::rollout::{rollout_with, RolloutConfig, RolloutMode};
use velopref_core::trajectory::{pad_and_mask, to_trajectory, Trajectory};

fn chain(rewards_len: usize) -> World {
    World::open(1, rewards_len, vec![vec![0.0]; rewards_len]).unwrap()
}

#[test]
fn chain_matches_path_enumeration() {
    let w = chain(4);
    let rewards = [-3.1, -3.7, -3.4, -4.0];
    let goal = StateId(3);
    let sol = soft_value_iteration(&w, &rewards, goal, 1.0, 1e-13).unwrap();
    let paths = oracles::goal_paths(&w, StateId(0), goal, 8);
    assert!(paths.len() > 10);
    let tv = oracles::maxent_tv(&w, &sol, &rewards, &paths);
    assert!(tv < 1e-6, "tv {tv}");
}

#[test]
fn random_small_worlds_match_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 50 {
        let (rows, cols) = [(1, 5), (2, 2), (2, 3), (2, 4), (1, 8), (3, 2)][rng.gen_range(0..6)];
        let w = oracles::random_world(&mut rng, rows, cols, 1, 0.15);
        let n = w.num_states();
        if n < 2 {
            continue;
        }
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..-3.0)).collect();
        let origin = StateId(rng.gen_range(0..n) as u32);
        let goal = StateId(rng.gen_range(0..n) as u32);
        if origin == goal || !w.reachable_from(origin)[goal.index()] {
            continue;
        }
        let sol = soft_value_iteration(&w, &rewards, goal, 1.0, 1e-13).unwrap();
        let mut len = 3;
        while len < 10 && oracles::count_walks(&w, origin, goal, len + 1) < 300_000 {
            len += 1;
        }
        let paths = oracles::goal_paths(&w, origin, goal, len);
        let tv = oracles::maxent_tv(&w, &sol, &rewards, &paths);
        assert!(tv < 1e-6, "instance {checked}: tv {tv}");
        checked += 1;
    }
}

#[test]
fn chain_likelihood_equals_maxent_probability() {
    let w = chain(4);
    let rewards = [-5.0, -5.6, -4.3, -6.0];
    let goal = StateId(3);
    let sol = soft_value_iteration(&w, &rewards, goal, 1.0, 1e-14).unwrap();
    let paths = oracles::goal_paths(&w, StateId(0), goal, 12);
    let z: f64 = paths.iter().map(|p| oracles::path_return(&rewards, p).exp()).sum();
    let mut sols = BTreeMap::new();
    sols.insert(goal, sol);
    for p in paths.iter().filter(|p| p.len() <= 6) {
        let t = to_trajectory(p, &w).unwrap();
        let ll = log_likelihood(&w, &[t], &sols).unwrap().total;
        let brute = oracles::path_return(&rewards, p).exp() / z;
        assert!((ll.exp() - brute).abs() <= 1e-6 * brute, "{} vs {brute}", ll.exp());
    }
}

#[test]
fn two_by_two_svf_matches_action_enumeration() {
    let w = World::open(2, 2, vec![vec![0.0]; 4]).unwrap();
    let rewards = [-0.4, -1.3, -0.8, -2.0];
    for goal in w.states() {
        let sol = soft_value_iteration(&w, &rewards, goal, 0.99, 1e-12).unwrap();
        for origin in w.states() {
            let mut d0 = vec![0.0; 4];
            d0[origin.index()] = 1.0;
            let svf = expected_svf(&w, &sol, &d0, 3).unwrap();
            let brute = oracles::brute_svf(&w, &sol, &d0, 3);
            for (a, b) in svf.visits.iter().zip(&brute) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

fn random_trips<R: Rng>(rng: &mut R, w: &World, count: usize) -> Vec<Trajectory> {
    let n = w.num_states();
    let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..-2.5)).collect();
    let mut out = Vec::new();
    while out.len() < count {
        let o = StateId(rng.gen_range(0..n) as u32);
        let g = StateId(rng.gen_range(0..n) as u32);
        if o == g || !w.reachable_from(o)[g.index()] {
            continue;
        }
        let sol = soft_value_iteration(w, &noise, g, 0.99, 1e-12).unwrap();
        let cfg = RolloutConfig { mode: RolloutMode::Stochastic, max_steps: 50, seed: 0 };
        let r = rollout_with(w, &sol, o, &cfg, rng).unwrap();
        if r.terminated() {
            out.push(r.trajectory);
        }
    }
    out
}

#[test]
fn batched_and_unbatched_expert_svf_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let w = oracles::random_world(&mut rng, 3, 4, 1, 0.1);
        if w.num_states() < 3 {
            continue;
        }
        let trips = random_trips(&mut rng, &w, 7);
        let batch = pad_and_mask(trips.clone()).unwrap();
        let batched = expert_svf(&batch, &w).unwrap();
        let mut direct = vec![0.0; w.num_states()];
        for t in &trips {
            for (s, _) in t.steps() {
                direct[s.index()] += 1.0;
            }
        }
        for (a, b) in batched.visits.iter().zip(&direct) {
            assert!((a - b / trips.len() as f64).abs() < 1e-15);
        }
    }
}

#[test]
fn soft_vi_invariants_on_random_worlds() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..30 {
        let w = oracles::random_world(&mut rng, 4, 5, 1, 0.2);
        let n = w.num_states();
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..-0.5)).collect();
        let goal = StateId(rng.gen_range(0..n) as u32);
        let sol = soft_value_iteration(&w, &rewards, goal, 0.99, 1e-10).unwrap();
        for s in w.states() {
            let total: f64 = sol.policy_row(s).iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            if s == goal {
                assert_eq!(sol.value(s), 0.0);
                continue;
            }
            // V = logsumexp Q, Q = r + gamma V(next)
            let q: Vec<f64> = w
                .transitions(s)
                .iter()
                .map(|t| rewards[s.index()] + 0.99 * sol.value(t.next))
                .collect();
            let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + q.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            assert!((lse - sol.value(s)).abs() < 1e-8);
        }
        for pair in sol.residuals.windows(2).skip(1) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-9) + 1e-15);
        }
        let origin = vec![1.0 / n as f64; n];
        for d in forward_distributions(&w, &sol, &origin, 40) {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

fn jitter<R: Rng>(rng: &mut R, model: RewardModel) -> RewardModel {
    let theta: Vec<f64> = model.theta().iter().map(|t| t + rng.gen_range(-0.2..0.2)).collect();
    model.with_theta(&theta).unwrap()
}

#[test]
fn reward_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..25 {
        // Random biases keep pre-activations off the ReLU kink at 0.
        let model = jitter(&mut rng, RewardModel::init(case, 3, 4, 2).unwrap());
        let theta = model.theta();
        let x: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
        let up = rng.gen_range(-2.0..2.0);
        let g = model.backward(&x, up).unwrap();
        let eps = 1e-5;
        for j in 0..theta.len() {
            let mut tp = theta.clone();
            tp[j] += eps;
            let mut tm = theta.clone();
            tm[j] -= eps;
            let fp = model.with_theta(&tp).unwrap().forward(&x).unwrap();
            let fm = model.with_theta(&tm).unwrap().forward(&x).unwrap();
            let fd = up * (fp - fm) / (2.0 * eps);
            let a = g.values[j];
            assert!((a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()) + 1e-8, "case {case} param {j}: {a} vs {fd}");
        }
    }
}

/// Mean per-trip log-likelihood plus log prior at `theta`.
fn objective(w: &World, trips: &[Trajectory], cfg: &TrainConfig, model: &RewardModel, lambda: f64) -> f64 {
    let groups = group_by_goal(trips);
    let e = evaluate(w, trips, &groups, model, cfg, None).unwrap();
    assert!(e.excluded.is_empty());
    e.log_likelihood / trips.len() as f64 + model.log_prior(lambda)
}

#[test]
fn likelihood_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = TrainConfig { gamma: 1.0, horizon: Some(400), vi_tol: 1e-13, ..Default::default() };
    let mut checked = 0;
    while checked < 20 {
        let (rows, cols) = [(2, 3), (1, 6), (3, 2)][checked % 3];
        let feats = (0..6).map(|_| (0..3).map(|_| rng.gen()).collect()).collect();
        let w = World::open(rows, cols, feats).unwrap();
        let trips = random_trips(&mut rng, &w, 3);
        let mut model = jitter(&mut rng, RewardModel::init(100 + checked as u64, 3, 4, 2).unwrap());
        let mut theta = model.theta();
        *theta.last_mut().unwrap() = -4.0;
        model.set_theta(&theta).unwrap();
        let lambda = rng.gen_range(0.0..0.1);

        let groups = group_by_goal(&trips);
        let e = evaluate(&w, &trips, &groups, &model, &cfg, None).unwrap();
        let expert = expert_svf(&pad_and_mask(trips.clone()).unwrap(), &w).unwrap();
        let g = maxent_gradient(&expert, &e.expected, &model, &w, lambda).unwrap();

        let eps = 1e-5;
        for j in 0..theta.len() {
            let mut tp = theta.clone();
            tp[j] += eps;
            let mut tm = theta.clone();
            tm[j] -= eps;
            let fp = objective(&w, &trips, &cfg, &model.with_theta(&tp).unwrap(), lambda);
            let fm = objective(&w, &trips, &cfg, &model.with_theta(&tm).unwrap(), lambda);
            let fd = (fp - fm) / (2.0 * eps);
            let a = g.values[j];
            assert!(
                (a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()) + 1e-7,
                "instance {checked} param {j}: analytic {a} vs numeric {fd}"
            );
        }
        checked += 1;
    }
}

#[test]
fn one_step_trip_through_certain_state_has_zero_log_likelihood() {
    let w = World::open(1, 2, vec![vec![0.0]; 2]).unwrap();
    let goal = w.state_at(Cell::new(0, 1)).unwrap();
    let sol = soft_value_iteration(&w, &[-60.0, -60.0], goal, 1.0, 1e-12).unwrap();
    let mut sols = BTreeMap::new();
    sols.insert(goal, sol);
    let t = to_trajectory(&[StateId(0), goal], &w).unwrap();
    assert!(log_likelihood(&w, &[t], &sols).unwrap().total.abs() < 1e-20);
}
