//! Property tests over randomly drawn models, trajectories and environments.

use hil_core::batch_em::forward_backward;
use hil_core::envs::{bellman_backup, build_gridworld, generate_demonstrations, value_iteration, GridworldSpec};
use hil_core::eval::{aggregate, evaluate_policy, expert_policy, mean_and_population_std, SweepRow, Trainer};
use hil_core::online_em::init_statistics;
use hil_core::opgm::{joint_log_prob, marginal_log_likelihood, point_belief, tilde_pi_hi};
use hil_core::oracle::{enumerate, random_instance};
use hil_core::regularizers::{Penalty, RegularizerConfig};
use hil_core::{HierarchicalPolicy, LatentStep, MlpSpec, ModelDims, StateTable, Step, Trajectory};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mlp(rng: &mut ChaCha8Rng, ns: usize, na: usize, no: usize) -> HierarchicalPolicy {
    let dims = ModelDims::new(ns, na, no).unwrap();
    let feats: Vec<f64> = (0..ns * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let spec = MlpSpec {
        hidden_units_lo_b: 4,
        hidden_units_hi: 6,
        init_low: -2.0,
        init_high: 2.0,
        ..MlpSpec::default()
    };
    HierarchicalPolicy::mlp_random(dims, StateTable::new(2, feats).unwrap(), spec, rng).unwrap()
}

fn random_traj(rng: &mut ChaCha8Rng, dims: &ModelDims, len: usize) -> Trajectory {
    let steps = (0..len)
        .map(|_| Step::new(rng.random_range(0..dims.n_states), rng.random_range(0..dims.n_actions)))
        .collect();
    Trajectory::new(steps, rng.random_range(0..dims.n_options))
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tilde_pi_hi_rows_sum_to_one(seed in any::<u64>(), ns in 1usize..5, no in 1usize..4, mlp in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = if mlp {
            random_mlp(&mut rng, ns, 2, no)
        } else {
            HierarchicalPolicy::tabular_random(ModelDims::new(ns, 2, no).unwrap(), StateTable::one_hot(ns), -3.0, 3.0, &mut rng)
        };
        for s in 0..ns {
            for o_prev in 0..no {
                for b in 0..2 {
                    let total: f64 = (0..no).map(|o| tilde_pi_hi(&policy, o, o_prev, s, b).unwrap()).sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn every_head_is_normalized(seed in any::<u64>(), ns in 1usize..5, na in 1usize..5, no in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = random_mlp(&mut rng, ns, na, no);
        for s in 0..ns {
            let rows = std::iter::once(policy.eval_pi_hi(s).unwrap())
                .chain((0..no).map(|o| policy.eval_pi_lo(s, o).unwrap()))
                .chain((0..no).map(|o| policy.eval_pi_b(s, o).unwrap()));
            for row in rows {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn joint_sums_to_one_over_latents_and_actions(seed in any::<u64>(), len in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = ModelDims::new(3, 2, 2).unwrap();
        let policy = HierarchicalPolicy::tabular_random(dims, StateTable::one_hot(3), -2.0, 2.0, &mut rng);
        let states: Vec<usize> = (0..len).map(|_| rng.random_range(0..3)).collect();
        let o0 = rng.random_range(0..2);
        let mut total = 0.0;
        for actions in 0..1usize << len {
            let steps = states.iter().enumerate().map(|(t, &s)| Step::new(s, (actions >> t) & 1)).collect();
            let traj = Trajectory::new(steps, o0);
            for code in 0..1usize << (2 * len) {
                let latents: Vec<LatentStep> = (0..len)
                    .map(|t| LatentStep::new((code >> (2 * t)) & 1, (code >> (2 * t + 1)) & 1 == 1))
                    .collect();
                total += joint_log_prob(&policy, &traj, &latents, None).unwrap().exp();
            }
        }
        prop_assert!((total - 1.0).abs() < 1e-9, "total {}", total);
    }

    #[test]
    fn marginal_matches_enumeration(seed in any::<u64>(), len in 1usize..=8, no in 2usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 3, 2, no, len).unwrap();
        let tables = inst.policy.tables();
        let belief = point_belief(inst.trajectory.initial_option, no);
        let e = enumerate(&tables, &inst.trajectory, &belief).unwrap();
        let ll = marginal_log_likelihood(&inst.policy, &inst.trajectory).unwrap();
        prop_assert!((ll - e.log_marginal).abs() < 1e-10);
        // Direct logsumexp over the paths as a second opinion.
        let mut logs = Vec::new();
        for code in 0..(2 * no).pow(len as u32) {
            let mut c = code;
            let latents: Vec<LatentStep> = (0..len)
                .map(|_| {
                    let (o, b) = ((c % (2 * no)) / 2, c % 2 == 1);
                    c /= 2 * no;
                    LatentStep::new(o, b)
                })
                .collect();
            logs.push(joint_log_prob(&inst.policy, &inst.trajectory, &latents, None).unwrap());
        }
        prop_assert!((ll - log_sum_exp(&logs)).abs() < 1e-10);
    }

    #[test]
    fn smoothed_marginals_are_normalized(seed in any::<u64>(), len in 1usize..60, no in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = random_mlp(&mut rng, 4, 3, no);
        let traj = random_traj(&mut rng, policy.dims(), len);
        let sm = forward_backward(&policy, &traj).unwrap();
        for t in 0..len {
            prop_assert!((sm.gamma_at(t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!((sm.xi_at(t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(sm.gamma_at(t).iter().chain(sm.xi_at(t)).all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn online_statistics_stay_normalized(seed in any::<u64>(), len in 1usize..80, no in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = random_mlp(&mut rng, 5, 3, no);
        let dims = *policy.dims();
        let tables = policy.tables();
        let mut st = init_statistics(dims, &vec![1.0 / no as f64; no]).unwrap();
        for _ in 0..len {
            st.update(&tables, rng.random_range(0..5), rng.random_range(0..3)).unwrap();
            prop_assert!((st.chi().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let phi = st.compose_phi().unwrap();
            prop_assert!((phi.total() - 1.0).abs() < 1e-8);
            prop_assert!(phi.is_non_negative());
            for o_last in 0..no {
                prop_assert!((st.rho_mass(o_last) - 1.0).abs() < 1e-8);
            }
        }
        // Storage is bounded by the explored pairs, not by the stream length.
        prop_assert!(st.pairs().len() <= st.explored_states().len() * st.explored_actions().len());
    }

    #[test]
    fn penalties_are_non_negative(seed in any::<u64>(), no in 1usize..4, n_points in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = random_mlp(&mut rng, 5, 3, no);
        let states: Vec<(usize, f64)> = (0..n_points).map(|_| (rng.random_range(0..5), rng.random::<f64>() + 0.01)).collect();
        let points: Vec<(usize, usize, f64)> = (0..n_points)
            .map(|_| (rng.random_range(0..5), rng.random_range(0..3), rng.random::<f64>() + 0.01))
            .collect();
        let cfg = RegularizerConfig { tau: Some(rng.random()), ..RegularizerConfig::default() };
        let pen = Penalty::new(cfg, no, states, points).unwrap();
        let (lb, lv, lkl) = pen.components(&policy.tables());
        prop_assert!(lb >= 0.0 && lv >= 0.0 && lkl >= 0.0);
    }

    #[test]
    fn batch_and_online_balance_agree_on_uniform_states(seed in any::<u64>(), no in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = random_mlp(&mut rng, 6, 2, no);
        let mut explored: Vec<usize> = (0..6).filter(|_| rng.random::<bool>()).collect();
        if explored.is_empty() {
            explored.push(0);
        }
        let last = (explored[0], 1);
        let cfg = RegularizerConfig::default();
        let online = Penalty::online(cfg, no, &explored, last).unwrap();
        let batch = Penalty::new(cfg, no, explored.iter().map(|&s| (s, 1.0)).collect(), vec![(last.0, last.1, 1.0)]).unwrap();
        let tables = policy.tables();
        prop_assert_eq!(online.components(&tables), batch.components(&tables));
    }

    #[test]
    fn gridworld_transitions_are_stochastic(w in 2usize..6, h in 1usize..6, slip in 0.0f64..1.0) {
        let spec = GridworldSpec { width: w, height: h, goal_cells: vec![(w - 1, h - 1)], slip_prob: slip, ..GridworldSpec::default() };
        let env = build_gridworld(&spec).unwrap();
        for s in 0..env.n_states {
            for a in 0..env.n_actions {
                let row = env.transition_row(s, a);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bellman_residual_contracts(seed in any::<u64>(), k in 1i32..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = GridworldSpec { width: 4, height: 3, goal_cells: vec![(3, 2)], slip_prob: rng.random_range(0.0..0.5), ..GridworldSpec::default() };
        let env = build_gridworld(&spec).unwrap();
        let sup = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let v0: Vec<f64> = (0..env.n_states).map(|_| rng.random_range(-5.0..5.0)).collect();
        let r0 = sup(&bellman_backup(&env, &v0), &v0);
        let mut v = v0;
        for _ in 0..k {
            v = bellman_backup(&env, &v);
        }
        let rk = sup(&bellman_backup(&env, &v), &v);
        prop_assert!(rk <= env.discount.powi(k) * r0 * (1.0 + 1e-9) + 1e-15, "{} vs {}", rk, r0);
    }

    #[test]
    fn demonstrations_replay_under_the_model(seed in any::<u64>(), eps in 0.0f64..0.5) {
        let env = build_gridworld(&GridworldSpec { width: 5, height: 5, goal_cells: vec![(4, 4)], ..GridworldSpec::default() }).unwrap();
        let vi = value_iteration(&env, 1e-8).unwrap();
        let demos = generate_demonstrations(&env, &vi.greedy_policy, 300, eps, seed).unwrap();
        for ep in &demos.episodes {
            for pair in ep.steps.windows(2) {
                prop_assert!(env.transition_prob(pair[0].state, pair[0].action, pair[1].state) > 0.0);
            }
        }
    }

    #[test]
    fn aggregate_std_is_population_std_of_seed_means(means in prop::collection::vec(-1.0f64..1.0, 1..8)) {
        let rows: Vec<SweepRow> = means
            .iter()
            .enumerate()
            .map(|(i, &m)| SweepRow {
                trainer: Trainer::Online,
                demo_size: 10,
                seed: i as u64,
                mean_reward: Some(m),
                normalized_reward: Some(m),
                gradient_steps: Some(0),
                wall_ms: None,
                error: None,
            })
            .collect();
        let report = &aggregate(&rows, 5)[0];
        let n = means.len() as f64;
        let mu = means.iter().sum::<f64>() / n;
        let std = (means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!((report.std_over_seeds.unwrap() - std).abs() < 1e-12);
        prop_assert_eq!(mean_and_population_std(&means).map(|p| p.1), report.std_over_seeds);
    }
}

#[test]
fn expert_normalizes_to_exactly_one() {
    let env = build_gridworld(&GridworldSpec::default()).unwrap();
    let vi = value_iteration(&env, 1e-8).unwrap();
    let expert = expert_policy(&env, &vi.greedy_policy, 2).unwrap();
    let mean = evaluate_policy(&expert, &env, 30, 7).unwrap().mean;
    let again = evaluate_policy(&expert, &env, 30, 7).unwrap().mean;
    assert_eq!(hil_core::eval::normalized_reward(again, mean).unwrap(), 1.0);
}
