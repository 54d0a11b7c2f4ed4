//! Pattern extractor and discriminator.
//!
//! Single-head cross-attention lets each phoneme query attend over audio
//! frames; a GRU scans the attended sequence in query order, with a sigmoid
//! head on the final state (`q_utt`) and one on every step (`q_phon`).

use ndarray::Axis;
use rand::Rng;

use crate::encoders::{AudioEmbedding, PhonemeQuery, EMBED_DIM};
use crate::error::{KwsError, Result};
use crate::params::{xavier_uniform, Bound, ParamSet};
use crate::tape::{Mat, Tape, Var};

pub const HIDDEN: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct MatcherParams {
    pub set: ParamSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointRepresentation {
    /// `T_t x 128`
    pub e_joint: Mat,
    /// `T_t x T_a`, rows sum to one.
    pub attn: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchOutput {
    pub q_utt: f64,
    pub q_phon: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    /// Rows are audio, columns are text.
    pub s_utt: Mat,
    pub match_mask: Mat,
}

impl MatcherParams {
    pub fn init(rng: &mut impl Rng) -> Self {
        let mut set = ParamSet::new();
        for name in ["attn.wq", "attn.wk", "attn.wv"] {
            set.insert(name, xavier_uniform(rng, EMBED_DIM, EMBED_DIM, 1.0));
        }
        let bound = 1.0 / (HIDDEN as f64).sqrt();
        let mut uniform = |r: usize, c: usize| {
            Mat::from_shape_simple_fn((r, c), || rng.gen_range(-bound..=bound))
        };
        set.insert("gru.w_ih", uniform(EMBED_DIM, 3 * HIDDEN));
        set.insert("gru.w_hh", uniform(HIDDEN, 3 * HIDDEN));
        set.insert("gru.b_ih", uniform(1, 3 * HIDDEN));
        set.insert("gru.b_hh", uniform(1, 3 * HIDDEN));
        set.insert("head.utt.w", uniform(HIDDEN, 1));
        set.insert("head.utt.b", Mat::zeros((1, 1)));
        set.insert("head.phon.w", uniform(HIDDEN, 1));
        set.insert("head.phon.b", Mat::zeros((1, 1)));
        Self { set }
    }

    pub fn zeros() -> Self {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        Self {
            set: Self::init(&mut rng).set.zeros_like(),
        }
    }

    pub fn from_set(set: ParamSet) -> Result<Self> {
        let reference = Self::zeros();
        if reference.set.len() != set.len() {
            return Err(KwsError::ShapeMismatch(format!(
                "matcher expects {} tensors, got {}",
                reference.set.len(),
                set.len()
            )));
        }
        for (name, m) in reference.set.iter() {
            match set.get(name) {
                Some(v) if v.dim() == m.dim() => {}
                _ => return Err(KwsError::ShapeMismatch(format!("bad or missing tensor {name}"))),
            }
        }
        Ok(Self { set })
    }

    pub fn param_count(&self) -> usize {
        self.set.param_count()
    }
}

fn check_dim(m: &Mat, what: &str) -> Result<()> {
    if m.ncols() != EMBED_DIM || m.nrows() == 0 {
        return Err(KwsError::ShapeMismatch(format!(
            "{what} must be non-empty with {EMBED_DIM} columns, got {:?}",
            m.dim()
        )));
    }
    Ok(())
}

/// `attn = softmax(E_t Wq (E_a Wk)^T / sqrt(128))`, `e_joint = attn E_a Wv`.
pub fn attend_forward(tape: &mut Tape, bound: &Bound, e_t: Var, e_a: Var) -> (Var, Var) {
    let q = tape.matmul(e_t, bound.var("attn.wq"));
    let k = tape.matmul(e_a, bound.var("attn.wk"));
    let v = tape.matmul(e_a, bound.var("attn.wv"));
    let scores = tape.matmul_t(q, k);
    let scores = tape.affine(scores, 1.0 / (EMBED_DIM as f64).sqrt(), 0.0);
    let attn = tape.softmax_rows(scores);
    let joint = tape.matmul(attn, v);
    (joint, attn)
}

/// Tape handles of the discriminator heads.
pub struct MatchVars {
    /// `1 x 1`
    pub q_utt: Var,
    /// `T_t x 1`
    pub q_phon: Var,
}

pub fn discriminate_forward(tape: &mut Tape, bound: &Bound, e_joint: Var) -> MatchVars {
    let steps = tape.value(e_joint).nrows();
    let gi = tape.matmul(e_joint, bound.var("gru.w_ih"));
    let gi = tape.add_row(gi, bound.var("gru.b_ih"));
    let mut h = tape.leaf(Mat::zeros((1, HIDDEN)));
    let mut states = Vec::with_capacity(steps);
    for t in 0..steps {
        let gh = tape.matmul(h, bound.var("gru.w_hh"));
        let gh = tape.add_row(gh, bound.var("gru.b_hh"));
        let x_t = tape.slice_rows(gi, t, t + 1);

        let (xr, hr) = (tape.slice_cols(x_t, 0, HIDDEN), tape.slice_cols(gh, 0, HIDDEN));
        let r = tape.add(xr, hr);
        let r = tape.sigmoid(r);
        let (xz, hz) = (
            tape.slice_cols(x_t, HIDDEN, 2 * HIDDEN),
            tape.slice_cols(gh, HIDDEN, 2 * HIDDEN),
        );
        let z = tape.add(xz, hz);
        let z = tape.sigmoid(z);
        let (xn, hn) = (
            tape.slice_cols(x_t, 2 * HIDDEN, 3 * HIDDEN),
            tape.slice_cols(gh, 2 * HIDDEN, 3 * HIDDEN),
        );
        let rh = tape.mul(r, hn);
        let n = tape.add(xn, rh);
        let n = tape.tanh(n);
        // h' = (1 - z) * n + z * h
        let keep_new = tape.affine(z, -1.0, 1.0);
        let a = tape.mul(keep_new, n);
        let b = tape.mul(z, h);
        h = tape.add(a, b);
        states.push(h);
    }
    let hs = tape.concat_rows(&states);
    let phon = tape.matmul(hs, bound.var("head.phon.w"));
    let phon = tape.add_row(phon, bound.var("head.phon.b"));
    let q_phon = tape.sigmoid(phon);
    let utt = tape.matmul(h, bound.var("head.utt.w"));
    let utt = tape.add_row(utt, bound.var("head.utt.b"));
    let q_utt = tape.sigmoid(utt);
    MatchVars { q_utt, q_phon }
}

/// Scaled dot products of mean-pooled embeddings, `M x M`.
pub fn pooled_similarity_forward(tape: &mut Tape, audio: &[Var], text: &[Var]) -> Var {
    let pa: Vec<Var> = audio.iter().map(|&a| tape.mean_rows(a)).collect();
    let pt: Vec<Var> = text.iter().map(|&t| tape.mean_rows(t)).collect();
    let a = tape.concat_rows(&pa);
    let t = tape.concat_rows(&pt);
    let s = tape.matmul_t(a, t);
    tape.affine(s, 1.0 / (EMBED_DIM as f64).sqrt(), 0.0)
}

pub fn cross_attend(
    e_t: &PhonemeQuery,
    e_a: &AudioEmbedding,
    p: &MatcherParams,
) -> Result<JointRepresentation> {
    check_dim(&e_t.e_t, "E_t")?;
    check_dim(&e_a.e_a, "E_a")?;
    let mut tape = Tape::no_grad();
    let bound = p.set.bind(&mut tape);
    let (t, a) = (tape.leaf(e_t.e_t.clone()), tape.leaf(e_a.e_a.clone()));
    let (joint, attn) = attend_forward(&mut tape, &bound, t, a);
    Ok(JointRepresentation {
        e_joint: tape.value(joint).clone(),
        attn: tape.value(attn).clone(),
    })
}

pub fn discriminate(j: &JointRepresentation, p: &MatcherParams) -> Result<MatchOutput> {
    check_dim(&j.e_joint, "E_joint")?;
    let mut tape = Tape::no_grad();
    let bound = p.set.bind(&mut tape);
    let x = tape.leaf(j.e_joint.clone());
    let out = discriminate_forward(&mut tape, &bound, x);
    Ok(MatchOutput {
        q_utt: tape.scalar(out.q_utt),
        q_phon: tape.value(out.q_phon).iter().copied().collect(),
    })
}

fn check_batches(audio: &[AudioEmbedding], text: &[PhonemeQuery]) -> Result<()> {
    if audio.is_empty() || text.is_empty() {
        return Err(KwsError::EmptyBatch);
    }
    if audio.len() != text.len() {
        return Err(KwsError::LengthMismatch(audio.len(), text.len()));
    }
    for a in audio {
        check_dim(&a.e_a, "E_a")?;
    }
    for t in text {
        check_dim(&t.e_t, "E_t")?;
    }
    Ok(())
}

/// Raw scaled-dot similarity of pooled embeddings with the diagonal as the
/// match mask. Use [`SimilarityMatrix::with_mask`] when several items share a
/// keyword.
pub fn pooled_similarity(audio: &[AudioEmbedding], text: &[PhonemeQuery]) -> Result<SimilarityMatrix> {
    check_batches(audio, text)?;
    let mut tape = Tape::no_grad();
    let a: Vec<Var> = audio.iter().map(|x| tape.leaf(x.e_a.clone())).collect();
    let t: Vec<Var> = text.iter().map(|x| tape.leaf(x.e_t.clone())).collect();
    let s = pooled_similarity_forward(&mut tape, &a, &t);
    Ok(SimilarityMatrix {
        s_utt: tape.value(s).clone(),
        match_mask: Mat::eye(audio.len()),
    })
}

/// Cosine similarity of pooled embeddings, the quantity plotted in the
/// similarity-matrix figure.
pub fn cosine_similarity(audio: &[AudioEmbedding], text: &[PhonemeQuery]) -> Result<SimilarityMatrix> {
    check_batches(audio, text)?;
    let pool = |m: &Mat| {
        let v = m.mean_axis(Axis(0)).expect("non-empty");
        let n = v.dot(&v).sqrt().max(1e-12);
        v / n
    };
    let pa: Vec<_> = audio.iter().map(|a| pool(&a.e_a)).collect();
    let pt: Vec<_> = text.iter().map(|t| pool(&t.e_t)).collect();
    let s = Mat::from_shape_fn((pa.len(), pt.len()), |(v, r)| pa[v].dot(&pt[r]));
    Ok(SimilarityMatrix {
        s_utt: s,
        match_mask: Mat::eye(audio.len()),
    })
}

impl SimilarityMatrix {
    pub fn with_mask(mut self, mask: Mat) -> Result<Self> {
        if mask.dim() != self.s_utt.dim() || mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(KwsError::ShapeMismatch("mask must be a binary matrix of the same shape".into()));
        }
        self.match_mask = mask;
        Ok(self)
    }

    pub fn size(&self) -> usize {
        self.s_utt.nrows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_key_attends_fully() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MatcherParams::init(&mut rng);
        let t = PhonemeQuery {
            phoneme_ids: vec![0, 1, 2],
            e_t: rand_mat(&mut rng, 3, 128),
        };
        let a = AudioEmbedding {
            e_a: rand_mat(&mut rng, 1, 128),
        };
        let j = cross_attend(&t, &a, &p).unwrap();
        assert!(j.attn.iter().all(|&w| (w - 1.0).abs() < 1e-15));
        let v = a.e_a.dot(p.set.get("attn.wv").unwrap());
        for row in j.e_joint.rows() {
            for (x, y) in row.iter().zip(v.row(0).iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MatcherParams::init(&mut rng);
        let row = rand_mat(&mut rng, 1, 128);
        let a = AudioEmbedding {
            e_a: ndarray::concatenate(Axis(0), &[row.view(), row.view()]).unwrap(),
        };
        let t = PhonemeQuery {
            phoneme_ids: vec![0],
            e_t: rand_mat(&mut rng, 1, 128),
        };
        let j = cross_attend(&t, &a, &p).unwrap();
        assert!((j.attn[[0, 0]] - 0.5).abs() < 1e-15 && (j.attn[[0, 1]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_give_half() {
        let p = MatcherParams::zeros();
        let j = JointRepresentation {
            e_joint: Mat::from_elem((4, 128), 0.3),
            attn: Mat::from_elem((4, 2), 0.5),
        };
        let out = discriminate(&j, &p).unwrap();
        assert_eq!(out.q_utt, 0.5);
        assert_eq!(out.q_phon, vec![0.5; 4]);
    }

    #[test]
    fn single_step_matches_closed_form_gru() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MatcherParams::init(&mut rng);
        let x = rand_mat(&mut rng, 1, 128);
        let j = JointRepresentation {
            e_joint: x.clone(),
            attn: Mat::ones((1, 1)),
        };
        let out = discriminate(&j, &p).unwrap();
        assert_eq!(out.q_phon.len(), 1);

        // h0 = 0, so W_hh only contributes through b_hh.
        let g = |n: &str| p.set.get(n).unwrap();
        let (w, bi, bh) = (g("gru.w_ih"), g("gru.b_ih"), g("gru.b_hh"));
        let mut h = vec![0.0; 128];
        for c in 0..128 {
            let dot = |col: usize| (0..128).map(|i| x[[0, i]] * w[[i, col]]).sum::<f64>() + bi[[0, col]];
            let r = sigmoid(dot(c) + bh[[0, c]]);
            let z = sigmoid(dot(128 + c) + bh[[0, 128 + c]]);
            let n = (dot(256 + c) + r * bh[[0, 256 + c]]).tanh();
            h[c] = (1.0 - z) * n;
        }
        let head = |w: &Mat, b: &Mat| sigmoid((0..128).map(|i| h[i] * w[[i, 0]]).sum::<f64>() + b[[0, 0]]);
        let q_phon = head(g("head.phon.w"), g("head.phon.b"));
        let q_utt = head(g("head.utt.w"), g("head.utt.b"));
        assert!((out.q_phon[0] - q_phon).abs() < 1e-12);
        assert!((out.q_utt - q_utt).abs() < 1e-12);
    }

    #[test]
    fn similarity_examples() {
        let mut a = Mat::zeros((1, 128));
        a[[0, 0]] = 1.0;
        let mut t = Mat::zeros((1, 128));
        t[[0, 1]] = 1.0;
        let s = pooled_similarity(
            &[AudioEmbedding { e_a: a.clone() }],
            &[PhonemeQuery {
                phoneme_ids: vec![0],
                e_t: t,
            }],
        )
        .unwrap();
        assert_eq!(s.s_utt[[0, 0]], 0.0);

        let unit = Mat::from_elem((2, 128), 1.0);
        let s = pooled_similarity(
            &[AudioEmbedding { e_a: unit.clone() }],
            &[PhonemeQuery {
                phoneme_ids: vec![0, 1],
                e_t: unit,
            }],
        )
        .unwrap();
        assert!((s.s_utt[[0, 0]] - 128f64.sqrt()).abs() < 1e-12);
        assert!(matches!(pooled_similarity(&[], &[]), Err(KwsError::EmptyBatch)));
    }

    #[test]
    fn similarity_scales_with_audio() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let audio: Vec<_> = (0..3)
            .map(|_| AudioEmbedding {
                e_a: rand_mat(&mut rng, 5, 128),
            })
            .collect();
        let text: Vec<_> = (0..3)
            .map(|_| PhonemeQuery {
                phoneme_ids: vec![1, 2],
                e_t: rand_mat(&mut rng, 2, 128),
            })
            .collect();
        let base = pooled_similarity(&audio, &text).unwrap();
        let scaled: Vec<_> = audio
            .iter()
            .map(|a| AudioEmbedding { e_a: &a.e_a * 2.5 })
            .collect();
        let s2 = pooled_similarity(&scaled, &text).unwrap();
        for (x, y) in base.s_utt.iter().zip(s2.s_utt.iter()) {
            assert!((2.5 * x - y).abs() < 1e-12);
        }
        let cos = cosine_similarity(&audio, &text).unwrap();
        assert!(cos.s_utt.iter().all(|c| c.abs() <= 1.0 + 1e-12));
    }
}
