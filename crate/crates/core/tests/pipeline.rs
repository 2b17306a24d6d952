use cbf_safelayer::config::{FilterConfig, RunConfig};
use cbf_safelayer::dynamics::{ActionVec, StateVec};
use cbf_safelayer::env::{Env, EnvConfig};
use cbf_safelayer::learner::{derive_seed, evaluate, train, Checkpoint, SacConfig};
use cbf_safelayer::trace::{parse_csv, write_csv};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_sac() -> SacConfig {
    SacConfig {
        episodes: 4,
        warmup_steps: 50,
        batch_size: 16,
        hidden_units: 8,
        ..SacConfig::default()
    }
}

fn short_env() -> EnvConfig {
    EnvConfig {
        max_steps: 40,
        ..EnvConfig::default()
    }
}

fn default_env() -> Env {
    let filter = FilterConfig::default();
    Env::new(EnvConfig::default(), filter.kappa, filter.alpha().unwrap()).unwrap()
}

#[test]
fn random_nominal_actions_never_leave_safe_set() {
    let mut env = default_env();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for episode in 0..20 {
        env.reset(episode, derive_seed(11, episode as u64)).unwrap();
        loop {
            let nominal = ActionVec::new(vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).unwrap();
            let filtered = env.filter_action(&nominal).unwrap();
            let step = env.step(&nominal, &filtered).unwrap();
            assert!(step.min_hi > 0.0, "episode {episode}: min h_i {}", step.min_hi);
            if step.done || env.step_index() >= env.config().max_steps {
                break;
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation() {
    let filter = FilterConfig::default();
    let env = short_env();
    let out = train(&env, &small_sac(), &filter, 5).unwrap();
    let restored = Checkpoint::from_json(&out.checkpoint.to_json().unwrap()).unwrap();
    assert_eq!(restored, out.checkpoint);
    let policy = restored.policy_net().unwrap();
    let a = evaluate(&out.agent.policy, &env, &filter, 6, 9, true, 1).unwrap();
    let b = evaluate(&policy, &env, &filter, 6, 9, true, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.episodes.len(), 6);
}

#[test]
fn training_is_deterministic_per_seed() {
    let filter = FilterConfig::default();
    let env = short_env();
    let a = train(&env, &small_sac(), &filter, 2).unwrap();
    let b = train(&env, &small_sac(), &filter, 2).unwrap();
    let c = train(&env, &small_sac(), &filter, 3).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.metrics, b.metrics);
    assert_ne!(a.checkpoint, c.checkpoint);
}

#[test]
fn evaluation_traces_survive_csv_round_trip() {
    let cfg = RunConfig::default();
    let out = train(&short_env(), &small_sac(), &cfg.filter, 1).unwrap();
    let report = evaluate(&out.agent.policy, &short_env(), &cfg.filter, 3, 4, true, 2).unwrap();
    assert!(!report.traces.is_empty());
    let mut buf = Vec::new();
    write_csv(&report.traces, &mut buf).unwrap();
    let parsed = parse_csv(buf.as_slice()).unwrap();
    assert_eq!(parsed, report.traces);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn filtering_a_safe_action_leaves_it_unchanged(
        px in -1.0f64..4.0, py in -1.0f64..3.5, ux in -5.0f64..5.0, uy in -5.0f64..5.0,
    ) {
        let env = default_env();
        let x = StateVec::new(vec![px, py]).unwrap();
        let filter = env.filter();
        prop_assume!(filter.composite(&x).unwrap().value > 0.05);
        let first = filter.apply(&x, &ActionVec::new(vec![ux, uy]).unwrap()).unwrap();
        let second = filter.apply(&x, &first.result.safe_action).unwrap();
        for k in 0..2 {
            prop_assert!((second.result.safe_action[k] - first.result.safe_action[k]).abs() <= 1e-9);
        }
    }
}

#[test]
fn shipped_configs_parse() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = cbf_safelayer::config::load_config(&root.join("default.toml")).unwrap();
    assert_eq!(default, RunConfig::default());
    cbf_safelayer::config::load_config(&root.join("smoke.toml")).unwrap();
}
