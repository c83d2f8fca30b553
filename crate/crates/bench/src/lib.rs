//! Deterministic inputs for the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sigspp::metrics::{ScoreClass, ScoreRecord, ScoreSet};
use sigspp::nn::{build_architecture, glorot_init};
use sigspp::{Model, Tensor4};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tensor(dims: [usize; 4], seed: u64) -> Tensor4<f32> {
    let mut g = rng(seed);
    Tensor4::from_fn(dims, |_| g.random_range(-1.0..1.0))
}

pub fn weights(len: usize, seed: u64) -> Vec<f32> {
    let mut g = rng(seed);
    (0..len).map(|_| g.random_range(-0.1..0.1)).collect()
}

/// Desk-scale network with `users` output classes.
pub fn desk_model(users: usize) -> Model<f32> {
    glorot_init(build_architecture("SigNet-SPP-desk", None, users, false).expect("catalog entry"), 0)
        .expect("valid spec")
}

/// Two Gaussian clouds in `dim` dimensions, positives first.
pub fn svm_problem(pos: usize, neg: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut g = rng(seed);
    let x = (0..pos + neg)
        .map(|i| {
            let shift = if i < pos { 0.3 } else { -0.3 };
            (0..dim).map(|_| g.random_range(-1.0..1.0) + shift).collect()
        })
        .collect();
    (x, (0..pos + neg).map(|i| i < pos).collect())
}

/// Scores for `writers` writers with `per_class` genuine and skilled samples each.
pub fn score_set(writers: u32, per_class: usize, seed: u64) -> ScoreSet {
    let mut g = rng(seed);
    let mut records = Vec::new();
    for w in 0..writers {
        for (class, mu) in [(ScoreClass::Genuine, 0.5), (ScoreClass::Skilled, -0.5)] {
            for i in 0..per_class {
                records.push(ScoreRecord {
                    writer: w,
                    id: format!("{w}/{class:?}/{i}"),
                    class,
                    score: mu + g.random_range(-1.0..1.0),
                });
            }
        }
    }
    ScoreSet::from_records(&records).expect("both classes present")
}
