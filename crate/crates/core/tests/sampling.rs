use compressive::sampling::{nucleus_candidates, sample_nucleus, softmax};
use compressive::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Enumerates prefixes of the probability-sorted tokens and returns the first
/// whose mass, summed from scratch, reaches `p`.
fn enumeration_oracle(probs: &[f64], p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    for k in 1..=order.len() {
        let mass: f64 = order[..k].iter().map(|&i| probs[i]).sum();
        if mass >= p {
            return order[..k].to_vec();
        }
    }
    order.into_iter().filter(|&i| probs[i] > 0.0).collect()
}

#[test]
fn hand_example() {
    assert_eq!(nucleus_candidates(&[0.5, 0.3, 0.2], 0.7).unwrap(), vec![0, 1]);
    assert_eq!(nucleus_candidates(&[0.2, 0.3, 0.5], 0.5).unwrap(), vec![2]);
    assert_eq!(nucleus_candidates(&[0.2, 0.3, 0.5], 1.0).unwrap().len(), 3);
}

#[test]
fn tiny_p_is_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let probs = softmax(&[0.1, 2.0, -1.0, 1.9]);
    for _ in 0..100 {
        assert_eq!(sample_nucleus(&probs, 1e-12, &mut rng).unwrap(), 1);
    }
}

#[test]
fn full_mass_samples_the_whole_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let probs = [0.1, 0.6, 0.3];
    let mut counts = [0usize; 3];
    let n = 30_000;
    for _ in 0..n {
        counts[sample_nucleus(&probs, 1.0, &mut rng).unwrap()] += 1;
    }
    for (c, p) in counts.iter().zip(probs) {
        let f = *c as f64 / n as f64;
        assert!((f - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt(), "{f} vs {p}");
    }
}

#[test]
fn samples_stay_inside_the_nucleus() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let probs = [0.05, 0.4, 0.05, 0.35, 0.15];
    let nucleus = nucleus_candidates(&probs, 0.7).unwrap();
    assert_eq!(nucleus, vec![1, 3]);
    for _ in 0..2000 {
        assert!(nucleus.contains(&sample_nucleus(&probs, 0.7, &mut rng).unwrap()));
    }
}

#[test]
fn p_outside_range_is_a_config_error() {
    for p in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(matches!(nucleus_candidates(&[1.0], p), Err(Error::Config(_))));
    }
}

#[test]
fn matches_enumeration_oracle_on_random_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for p in [0.1, 0.5, 0.98, 1.0] {
        for _ in 0..1000 {
            let n = rng.random_range(1..40);
            let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
            let probs = softmax(&logits);
            assert_eq!(nucleus_candidates(&probs, p).unwrap(), enumeration_oracle(&probs, p));
        }
    }
}
