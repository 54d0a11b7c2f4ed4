//! CTC forward-backward loss, Viterbi best-path alignment and the per-pair
//! alignment confidence used by the phoneme-level contrastive term.
//!
//! All recursions run in log space over the blank-interleaved label
//! `[b, y1, b, y2, ..., yU, b]`. Both `alpha` and `beta` include the emission
//! of their own frame.

use crate::encoders::CtcLogits;
use crate::error::{KwsError, Result};
use crate::tape::Mat;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CtcTarget {
    y: Vec<usize>,
}

impl CtcTarget {
    pub fn new(y: Vec<usize>, blank_id: usize) -> Result<Self> {
        if y.is_empty() {
            return Err(KwsError::BadArgument("empty CTC target".into()));
        }
        if y.contains(&blank_id) {
            return Err(KwsError::BadArgument(format!(
                "CTC target contains the blank id {blank_id}"
            )));
        }
        Ok(Self { y })
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Adjacent equal labels, each of which needs a separating blank frame.
    pub fn repeats(&self) -> usize {
        self.y.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Shortest frame count that admits a valid alignment.
    pub fn min_frames(&self) -> usize {
        self.y.len() + self.repeats()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtcLoss {
    pub loss: f64,
    /// Gradient of `loss` with respect to the raw logits.
    pub grad: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentResult {
    /// Extended-label index (`0..2U+1`) occupied at each frame.
    pub path: Vec<usize>,
    pub logprob_path: f64,
    pub confidence: f64,
}

impl AlignmentResult {
    /// Label id emitted at each frame (blank or a target phoneme).
    pub fn frame_labels(&self, target: &CtcTarget, blank_id: usize) -> Vec<usize> {
        self.path
            .iter()
            .map(|&s| extended_label(target.labels(), blank_id, s))
            .collect()
    }
}

fn extended_label(y: &[usize], blank: usize, s: usize) -> usize {
    if s.is_multiple_of(2) {
        blank
    } else {
        y[s / 2]
    }
}

pub fn log_softmax_rows(z: &Mat) -> Mat {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn check_feasible(frames: usize, target: &CtcTarget) -> Result<()> {
    if frames == 0 || frames < target.min_frames() {
        return Err(KwsError::InfeasibleTarget {
            frames,
            target_len: target.len(),
            repeats: target.repeats(),
        });
    }
    Ok(())
}

fn check_labels(z: &Mat, target: &CtcTarget) -> Result<usize> {
    let blank = z.ncols() - 1;
    if let Some(&bad) = target.labels().iter().find(|&&l| l >= blank) {
        return Err(KwsError::UnknownPhonemeId(bad));
    }
    Ok(blank)
}

/// Whether the lattice allows skipping from `s - 2` to `s`.
fn can_skip(y: &[usize], blank: usize, s: usize) -> bool {
    s >= 2 && s % 2 == 1 && extended_label(y, blank, s) != extended_label(y, blank, s - 2)
}

/// Negative log-likelihood of `target` under logits `z` and its gradient.
pub fn ctc_loss(z: &CtcLogits, target: &CtcTarget) -> Result<CtcLoss> {
    ctc_loss_raw(&z.z, target)
}

pub fn ctc_loss_raw(z: &Mat, target: &CtcTarget) -> Result<CtcLoss> {
    let blank = check_labels(z, target)?;
    let t_len = z.nrows();
    check_feasible(t_len, target)?;
    let y = target.labels();
    let s_len = 2 * y.len() + 1;
    let lp = log_softmax_rows(z);
    let emit = |t: usize, s: usize| lp[[t, extended_label(y, blank, s)]];

    let neg = f64::NEG_INFINITY;
    let mut alpha = Mat::from_elem((t_len, s_len), neg);
    alpha[[0, 0]] = emit(0, 0);
    alpha[[0, 1]] = emit(0, 1);
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = log_add(acc, alpha[[t - 1, s - 1]]);
            }
            if can_skip(y, blank, s) {
                acc = log_add(acc, alpha[[t - 1, s - 2]]);
            }
            if acc > neg {
                alpha[[t, s]] = acc + emit(t, s);
            }
        }
    }
    let log_p = log_add(alpha[[t_len - 1, s_len - 1]], alpha[[t_len - 1, s_len - 2]]);

    let mut beta = Mat::from_elem((t_len, s_len), neg);
    beta[[t_len - 1, s_len - 1]] = emit(t_len - 1, s_len - 1);
    beta[[t_len - 1, s_len - 2]] = emit(t_len - 1, s_len - 2);
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[[t + 1, s]];
            if s + 1 < s_len {
                acc = log_add(acc, beta[[t + 1, s + 1]]);
            }
            if s + 2 < s_len && can_skip(y, blank, s + 2) {
                acc = log_add(acc, beta[[t + 1, s + 2]]);
            }
            if acc > neg {
                beta[[t, s]] = acc + emit(t, s);
            }
        }
    }

    // d(-log p)/dz[t,k] = softmax(z)[t,k] - sum over s with label k of the
    // state posterior at (t, s).
    let mut grad = lp.mapv(f64::exp);
    for t in 0..t_len {
        for s in 0..s_len {
            let a = alpha[[t, s]];
            let b = beta[[t, s]];
            if a == neg || b == neg {
                continue;
            }
            let post = (a + b - emit(t, s) - log_p).exp();
            grad[[t, extended_label(y, blank, s)]] -= post;
        }
    }
    Ok(CtcLoss { loss: -log_p, grad })
}

/// Best single path through the CTC lattice.
///
/// `confidence = exp(logprob_path / T)`, the per-frame geometric mean of the
/// path probability.
pub fn viterbi_align(z: &CtcLogits, target: &CtcTarget) -> Result<AlignmentResult> {
    viterbi_align_raw(&z.z, target)
}

pub fn viterbi_align_raw(z: &Mat, target: &CtcTarget) -> Result<AlignmentResult> {
    let blank = check_labels(z, target)?;
    let t_len = z.nrows();
    check_feasible(t_len, target)?;
    let y = target.labels();
    let s_len = 2 * y.len() + 1;
    let lp = log_softmax_rows(z);
    let emit = |t: usize, s: usize| lp[[t, extended_label(y, blank, s)]];

    let neg = f64::NEG_INFINITY;
    let mut delta = Mat::from_elem((t_len, s_len), neg);
    let mut back = vec![vec![0usize; s_len]; t_len];
    delta[[0, 0]] = emit(0, 0);
    delta[[0, 1]] = emit(0, 1);
    for t in 1..t_len {
        for s in 0..s_len {
            let mut best = delta[[t - 1, s]];
            let mut arg = s;
            if s >= 1 && delta[[t - 1, s - 1]] > best {
                best = delta[[t - 1, s - 1]];
                arg = s - 1;
            }
            if can_skip(y, blank, s) && delta[[t - 1, s - 2]] > best {
                best = delta[[t - 1, s - 2]];
                arg = s - 2;
            }
            if best > neg {
                delta[[t, s]] = best + emit(t, s);
                back[t][s] = arg;
            }
        }
    }
    let (mut s, logprob_path) = if delta[[t_len - 1, s_len - 1]] >= delta[[t_len - 1, s_len - 2]] {
        (s_len - 1, delta[[t_len - 1, s_len - 1]])
    } else {
        (s_len - 2, delta[[t_len - 1, s_len - 2]])
    };
    let mut path = vec![0; t_len];
    for t in (0..t_len).rev() {
        path[t] = s;
        if t > 0 {
            s = back[t][s];
        }
    }
    Ok(AlignmentResult {
        path,
        logprob_path,
        confidence: (logprob_path / t_len as f64).exp(),
    })
}

/// Gradient of the Viterbi confidence with respect to the logits, holding the
/// best path fixed.
pub fn confidence_grad(z: &Mat, target: &CtcTarget, result: &AlignmentResult) -> Mat {
    let blank = z.ncols() - 1;
    let t_len = z.nrows() as f64;
    let scale = result.confidence / t_len;
    let mut grad = log_softmax_rows(z).mapv(|l| -l.exp() * scale);
    for (t, &s) in result.path.iter().enumerate() {
        grad[[t, extended_label(target.labels(), blank, s)]] += scale;
    }
    grad
}

/// One `(z, y, m)` item for [`batch_confidences`].
pub struct ConfidencePair<'a> {
    pub logits: &'a CtcLogits,
    pub target: &'a CtcTarget,
    pub matched: bool,
}

/// Viterbi confidences per pair. Unmatched pairs whose target cannot fit
/// score 0; matched pairs propagate the error.
pub fn batch_confidences(pairs: &[ConfidencePair<'_>]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|p| match viterbi_align(p.logits, p.target) {
            Ok(r) => Ok(r.confidence),
            Err(KwsError::InfeasibleTarget { .. }) if !p.matched => Ok(0.0),
            Err(e) => Err(e),
        })
        .collect()
}
