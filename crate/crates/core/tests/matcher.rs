//! Cross-attention against a straight-line evaluation of
//! `softmax(Q K^T / sqrt(d)) V` written without the tape.

// index loops mirror the formula
#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kws_core::encoders::{AudioEmbedding, PhonemeQuery};
use kws_core::matcher::{cross_attend, MatcherParams};
use kws_core::tape::Mat;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn to_mat(v: &[Vec<f64>]) -> Mat {
    Mat::from_shape_fn((v.len(), v[0].len()), |(i, j)| v[i][j])
}

fn project(x: &[Vec<f64>], w: &Mat) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..w.ncols())
                .map(|j| row.iter().enumerate().map(|(k, v)| v * w[[k, j]]).sum())
                .collect()
        })
        .collect()
}

#[test]
fn attention_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let p = MatcherParams::init(&mut rng);
    let t = random(&mut rng, 3, 128);
    let a = random(&mut rng, 4, 128);
    let j = cross_attend(
        &PhonemeQuery { phoneme_ids: vec![0, 1, 2], e_t: to_mat(&t) },
        &AudioEmbedding { e_a: to_mat(&a) },
        &p,
    )
    .unwrap();

    let q = project(&t, p.set.get("attn.wq").unwrap());
    let k = project(&a, p.set.get("attn.wk").unwrap());
    let v = project(&a, p.set.get("attn.wv").unwrap());
    for i in 0..3 {
        let scores: Vec<f64> = (0..4)
            .map(|r| q[i].iter().zip(&k[r]).map(|(x, y)| x * y).sum::<f64>() / 128f64.sqrt())
            .collect();
        let max = scores.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        let w: Vec<f64> = scores.iter().map(|s| (s - max).exp() / z).collect();
        for r in 0..4 {
            assert!((j.attn[[i, r]] - w[r]).abs() < 1e-12);
        }
        for c in 0..128 {
            let want: f64 = (0..4).map(|r| w[r] * v[r][c]).sum();
            assert!((j.e_joint[[i, c]] - want).abs() < 1e-12, "row {i} col {c}");
        }
    }
}
