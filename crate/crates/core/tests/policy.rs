mod common;

use common::{car, crossing_network};
use hsim_core::policy::*;
use hsim_core::{AgentState, Maneuver, SceneState};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_scene(rng: &mut impl Rng, n: usize) -> SceneState {
    let agents = (0..n)
        .map(|i| {
            let s = rng.gen_range(-60.0..-5.0);
            let lat = rng.gen_range(-1.0..1.0);
            let v = rng.gen_range(0.0..10.0);
            if rng.gen_bool(0.5) {
                car(i as u32, s, lat, rng.gen_range(-0.2..0.2), v, 0)
            } else {
                car(
                    i as u32,
                    lat,
                    s,
                    std::f64::consts::FRAC_PI_2 + rng.gen_range(-0.2..0.2),
                    v,
                    1,
                )
            }
        })
        .collect();
    SceneState::new(0.0, agents, crossing_network())
}

/// Random scoring weights with strong command-slot weights.
fn coupled_params(seed: u64) -> HighPolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = HighPolicyDims::default();
    let mut values = vec![0.0; dims.param_count()];
    for v in &mut values {
        *v = rng.gen_range(-1.0..1.0);
    }
    let mut p = HighPolicyParams::from_values(dims, values).unwrap();
    for w in p.slot_weights_mut() {
        *w *= 3.0;
    }
    p
}

fn all_assignments(n: usize) -> Vec<Vec<Maneuver>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                Maneuver::ALL.into_iter().map(move |m| {
                    let mut v = prefix.clone();
                    v.push(m);
                    v
                })
            })
            .collect();
    }
    out
}

#[test]
fn uniform_pair_has_equal_joint_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scene = random_scene(&mut rng, 2);
    let obs = Observation::new(&scene);
    let params = HighPolicyParams::zeros(HighPolicyDims::default());
    let ord = make_ordering(&scene);
    let joint = all_assignments(2);
    assert_eq!(joint.len(), 25);
    for m in &joint {
        let p = joint_log_prob(&obs, &params, &ord, m).unwrap().exp();
        assert!((p - 0.04).abs() < 1e-12);
    }
    let single = random_scene(&mut rng, 1);
    let obs1 = Observation::new(&single);
    for m in Maneuver::ALL {
        let lp = joint_log_prob(&obs1, &params, &Ordering::identity(1), &[m]).unwrap();
        assert!((lp - 0.2f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn joint_probabilities_normalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 0..20 {
        let n = 1 + k % 3;
        let scene = random_scene(&mut rng, n);
        let obs = Observation::new(&scene);
        let params = coupled_params(k as u64);
        let ord = make_ordering(&scene);
        let total: f64 = all_assignments(n)
            .iter()
            .map(|m| joint_log_prob(&obs, &params, &ord, m).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-9, "scene {k}: {total}");
    }
}

#[test]
fn follower_distribution_depends_on_leader_command() {
    let scene = SceneState::new(
        0.0,
        vec![
            car(0, -12.0, 0.0, 0.0, 8.0, 0),
            car(1, 0.0, -15.0, std::f64::consts::FRAC_PI_2, 8.0, 1),
        ],
        crossing_network(),
    );
    let obs = Observation::new(&scene);
    let ord = make_ordering(&scene);
    let params = coupled_params(5);
    let follower = ord.0[1];
    let leader = ord.0[0];
    let cond = |lead: Maneuver, foll: Maneuver| {
        let mut m = vec![Maneuver::Maintain; 2];
        m[leader] = lead;
        m[follower] = foll;
        conditional_log_probs(&obs, &params, &ord, &m).unwrap()
    };
    let a = cond(Maneuver::Maintain, Maneuver::Maintain)[1];
    let b = cond(Maneuver::Yield, Maneuver::Maintain)[1];
    let tv: f64 = a.iter().zip(&b).map(|(x, y)| (x.exp() - y.exp()).abs()).sum::<f64>() / 2.0;
    assert!(tv > 0.01, "total variation {tv}");
    let lead0 = cond(Maneuver::Maintain, Maneuver::Maintain)[0];
    for f in Maneuver::ALL {
        assert_eq!(cond(Maneuver::Maintain, f)[0], lead0);
    }
}

#[test]
fn neighbor_features_ignore_agent_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..30 {
        let scene = random_scene(&mut rng, 6);
        let obs = Observation::new(&scene);
        let mut agents: Vec<AgentState> = scene.agents.clone();
        agents.shuffle(&mut rng);
        let shuffled = scene.with_agents(0.0, agents);
        let obs2 = Observation::new(&shuffled);
        for (i, a) in scene.agents.iter().enumerate() {
            let j = shuffled.index_of(a.id).unwrap();
            assert_eq!(obs.features[i], obs2.features[j]);
        }
    }
}

#[test]
fn log_prob_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..3 {
        let scene = random_scene(&mut rng, 3);
        let obs = Observation::new(&scene);
        let ord = make_ordering(&scene);
        let params = coupled_params(10 + seed);
        let prefix = [Maneuver::Yield, Maneuver::SwitchLeft];
        let state = build_subgame_state(&obs, &ord, &prefix, 2).unwrap();
        let m = Maneuver::from_index(rng.gen_range(0..Maneuver::COUNT)).unwrap();
        let g = log_prob_grad(&params, &state, m);
        let h = 1e-4;
        for i in 0..params.values.len() {
            let f = |d: f64| {
                let mut p = params.clone();
                p.values[i] += d;
                maneuver_log_probs(&p, &state)[m.index()]
            };
            let fd = (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h);
            if g[i].abs() > 1e-8 {
                let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs());
                assert!(rel < 1e-4, "coord {i}: {} vs {fd}", g[i]);
            } else {
                assert!(fd.abs() < 1e-7);
            }
        }
    }
}

fn sample(lp: &[f64; Maneuver::COUNT], rng: &mut impl Rng) -> Maneuver {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (m, l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return Maneuver::from_index(m).unwrap();
        }
    }
    Maneuver::Stop
}

fn fixed_state(v: f64) -> SubgameState {
    let mut features = [0.0; SCENE_FEATURES];
    features[0] = v;
    features[1] = -v;
    SubgameState {
        features,
        slots: vec![],
    }
}

#[test]
fn bandit_converges_to_rewarded_maneuver() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let state = fixed_state(0.5);
    let mut params = HighPolicyParams::init(HighPolicyDims::default(), 6);
    for _ in 0..2000 {
        let lp = maneuver_log_probs(&params, &state);
        let batch: Vec<Trajectory> = (0..8)
            .map(|_| {
                let m = sample(&lp, &mut rng);
                Trajectory {
                    decisions: vec![(state.clone(), m)],
                    ret: if m == Maneuver::SwitchRight { 1.0 } else { 0.0 },
                }
            })
            .collect();
        if let Ok(p) = reinforce_update(&params, &batch, 0.1) {
            params = p;
        }
    }
    let p = maneuver_log_probs(&params, &state)[Maneuver::SwitchRight.index()].exp();
    assert!(p > 0.9, "{p}");
}

/// Two decisions per episode. Maintain first pays 1 now; Stop first pays 5
/// at the next step.
fn two_step_bandit(gamma: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (s0, s1) = (fixed_state(0.5), fixed_state(-0.5));
    let mut params = HighPolicyParams::init(HighPolicyDims::default(), 8);
    for _ in 0..1500 {
        let mut batch = Vec::new();
        for _ in 0..8 {
            let m0 = sample(&maneuver_log_probs(&params, &s0), &mut rng);
            let m1 = sample(&maneuver_log_probs(&params, &s1), &mut rng);
            let r = [
                if m0 == Maneuver::Maintain { 1.0 } else { 0.0 },
                if m0 == Maneuver::Stop { 5.0 } else { 0.0 },
            ];
            let g = returns_to_go(&r, gamma);
            batch.push(Trajectory {
                decisions: vec![(s0.clone(), m0)],
                ret: g[0],
            });
            batch.push(Trajectory {
                decisions: vec![(s1.clone(), m1)],
                ret: g[1],
            });
        }
        params = reinforce_update(&params, &batch, 0.1).unwrap();
    }
    let lp = maneuver_log_probs(&params, &s0);
    lp[Maneuver::Maintain.index()].exp() - lp[Maneuver::Stop.index()].exp()
}

#[test]
fn zero_discount_optimizes_immediate_reward_only() {
    assert!(two_step_bandit(0.0) > 0.5);
    assert!(two_step_bandit(1.0) < -0.5);
}
