use laneseq_train::reinforce::{estimate_gradient, BaselinePair};
use laneseq_train::toy::{offset_reward, reference_policy, TabularPolicy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DRAWS: usize = 50_000;

fn reward(seq: &Vec<usize>) -> f64 {
    offset_reward(seq)
}

fn policy() -> TabularPolicy {
    reference_policy()
}

#[test]
fn two_sample_estimator_matches_enumeration() {
    let p = policy();
    let exact = p.exact_gradient(reward);
    let est = estimate_gradient(&p, reward, DRAWS, &mut ChaCha8Rng::seed_from_u64(2024), true);
    for (i, e) in exact.iter().enumerate() {
        let se = est.standard_error(i);
        assert!(se > 0.0);
        assert!((est.mean[i] - e).abs() <= 3.0 * se, "coord {i}: estimate {} exact {e} se {se}", est.mean[i]);
    }
}

#[test]
fn baseline_lowers_variance_on_the_same_draws() {
    let p = policy();
    let with = estimate_gradient(&p, reward, DRAWS, &mut ChaCha8Rng::seed_from_u64(7), true);
    let without = estimate_gradient(&p, reward, DRAWS, &mut ChaCha8Rng::seed_from_u64(7), false);
    assert!(with.total_variance() < without.total_variance(), "{} vs {}", with.total_variance(), without.total_variance());
}

#[test]
fn equal_rewards_give_zero_advantage() {
    let pair = BaselinePair { sample_a: vec![1, 3], sample_b: vec![0, 3], reward_a: 0.4, reward_b: 0.4 };
    assert_eq!(pair.advantage(), 0.0);
    let p = policy();
    let g: Vec<f64> = laneseq_train::reinforce::SequencePolicy::grad_log_prob(&p, &pair.sample_a)
        .into_iter()
        .map(|x| x * pair.advantage())
        .collect();
    assert!(g.iter().all(|x| *x == 0.0));
}
