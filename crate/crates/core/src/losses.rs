//! Training objectives. Each loss returns its value together with the exact
//! gradient with respect to its direct inputs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::matcher::SimilarityMatrix;
use crate::params::ParamSet;
use crate::tape::{sigmoid, Mat};

pub const PROB_CLAMP: f64 = 1e-7;
pub const LOGIT_CLAMP: f64 = 30.0;

/// Value and gradient of a loss over a vector input.
#[derive(Clone, Debug, PartialEq)]
pub struct Loss {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Value and gradient of a loss over a matrix input.
#[derive(Clone, Debug, PartialEq)]
pub struct MatLoss {
    pub value: f64,
    pub grad: Mat,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaConfig {
    pub gamma: f64,
    pub delta: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for FaConfig {
    fn default() -> Self {
        Self {
            gamma: 7.0,
            delta: 0.035,
            alpha: 0.9,
            lambda: 10.0,
            epsilon: 1e-7,
        }
    }
}

impl FaConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0 && self.alpha > 0.0 && self.alpha <= 1.0 && self.lambda >= 0.0;
        if !ok {
            return Err(KwsError::BadArgument(format!("invalid FA config {self:?}")));
        }
        Ok(())
    }

    /// `1 + gamma * delta`
    pub fn bound_scale(&self) -> f64 {
        1.0 + self.gamma * self.delta
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(KwsError::LengthMismatch(a, b));
    }
    Ok(())
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(pred: &[f64], label: &[f64]) -> Result<Loss> {
    check_len(pred.len(), label.len())?;
    if pred.is_empty() {
        return Err(KwsError::EmptyBatch);
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p_raw, &y) in pred.iter().zip(label) {
        let p = p_raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        value -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        let inside = p_raw > PROB_CLAMP && p_raw < 1.0 - PROB_CLAMP;
        grad.push(if inside {
            (-y / p + (1.0 - y) / (1.0 - p)) / n
        } else {
            0.0
        });
    }
    Ok(Loss {
        value: value / n,
        grad,
    })
}

/// `(1/N) sum [m (1 - s)^2 + (1 - m) s^2]`
pub fn pcl_loss(s: &[f64], m: &[f64]) -> Result<Loss> {
    check_len(s.len(), m.len())?;
    if s.is_empty() {
        return Err(KwsError::EmptyBatch);
    }
    let n = s.len() as f64;
    let value = s
        .iter()
        .zip(m)
        .map(|(&s, &m)| m * (1.0 - s).powi(2) + (1.0 - m) * s * s)
        .sum::<f64>()
        / n;
    let grad = s
        .iter()
        .zip(m)
        .map(|(&s, &m)| (-2.0 * m * (1.0 - s) + 2.0 * (1.0 - m) * s) / n)
        .collect();
    Ok(Loss { value, grad })
}

// log(1 + e^x) without overflow
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bidirectional sigmoid contrastive loss over an `M x M` similarity matrix.
///
/// `l = -(1/M) sum_v sum_r [m log sigmoid(s) + (1 - m) log(1 - sigmoid(s))]`,
/// summed once text-major and once audio-major; the result is their mean.
pub fn ucl_loss(sim: &SimilarityMatrix) -> Result<MatLoss> {
    ucl_loss_raw(&sim.s_utt, &sim.match_mask)
}

pub fn ucl_loss_raw(scores: &Mat, mask: &Mat) -> Result<MatLoss> {
    let (rows, cols) = scores.dim();
    if rows != cols {
        return Err(KwsError::NotSquare(rows, cols));
    }
    if mask.dim() != scores.dim() {
        return Err(KwsError::ShapeMismatch(format!(
            "mask {:?} vs scores {:?}",
            mask.dim(),
            scores.dim()
        )));
    }
    if rows == 0 {
        return Err(KwsError::EmptyBatch);
    }
    let m_size = rows as f64;
    let term = |v: usize, r: usize| {
        let s = scores[[v, r]].clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        let m = mask[[v, r]];
        // -log sigmoid(s) = softplus(-s), -log(1 - sigmoid(s)) = softplus(s)
        m * softplus(-s) + (1.0 - m) * softplus(s)
    };
    let mut l_audio = 0.0;
    for v in 0..rows {
        for r in 0..cols {
            l_audio += term(v, r);
        }
    }
    let mut l_text = 0.0;
    for r in 0..cols {
        for v in 0..rows {
            l_text += term(v, r);
        }
    }
    let value = 0.5 * (l_text / m_size + l_audio / m_size);
    let grad = Mat::from_shape_fn((rows, cols), |(v, r)| {
        let raw = scores[[v, r]];
        if raw.abs() > LOGIT_CLAMP {
            return 0.0;
        }
        let m = mask[[v, r]];
        (sigmoid(raw) - m) / m_size
    });
    Ok(MatLoss { value, grad })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothCounts {
    pub tp: f64,
    pub fp: f64,
    pub d_tp: Vec<f64>,
    pub d_fp: Vec<f64>,
}

/// Sigmoid-bounded true/false positive counts:
/// `TP = sum (1 + g d) sigmoid(g x - d) t`, `FP = sum (1 + g d) sigmoid(g x + d) (1 - t)`.
pub fn smooth_counts(x: &[f64], x_true: &[f64], cfg: &FaConfig) -> Result<SmoothCounts> {
    check_len(x.len(), x_true.len())?;
    let c = cfg.bound_scale();
    let (g, d) = (cfg.gamma, cfg.delta);
    let mut out = SmoothCounts {
        tp: 0.0,
        fp: 0.0,
        d_tp: Vec::with_capacity(x.len()),
        d_fp: Vec::with_capacity(x.len()),
    };
    for (&xi, &ti) in x.iter().zip(x_true) {
        let sp = sigmoid(g * xi - d);
        let sn = sigmoid(g * xi + d);
        out.tp += c * sp * ti;
        out.fp += c * sn * (1.0 - ti);
        out.d_tp.push(c * g * sp * (1.0 - sp) * ti);
        out.d_fp.push(c * g * sn * (1.0 - sn) * (1.0 - ti));
    }
    Ok(out)
}

/// `-log(P) + lambda * max(0, alpha - P)` for a given precision.
pub fn fa_objective(precision: f64, cfg: &FaConfig) -> f64 {
    -precision.ln() + cfg.lambda * (cfg.alpha - precision).max(0.0)
}

/// Precision-constrained false-alarm loss over scores `x` in `[0, 1]`.
///
/// `Precision = TP / (TP + FP + eps)`. A batch without positive labels has no
/// defined precision and contributes zero.
pub fn fa_loss(x: &[f64], x_true: &[f64], cfg: &FaConfig) -> Result<Loss> {
    let counts = smooth_counts(x, x_true, cfg)?;
    if !x_true.iter().any(|&t| t > 0.0) {
        return Ok(Loss {
            value: 0.0,
            grad: vec![0.0; x.len()],
        });
    }
    let denom = counts.tp + counts.fp + cfg.epsilon;
    let precision = counts.tp / denom;
    let value = fa_objective(precision, cfg);
    // hinge subgradient is 0 at the kink
    let hinge = if cfg.alpha - precision > 0.0 { cfg.lambda } else { 0.0 };
    let d_prec = -1.0 / precision - hinge;
    let dp_dtp = (counts.fp + cfg.epsilon) / (denom * denom);
    let dp_dfp = -counts.tp / (denom * denom);
    let grad = counts
        .d_tp
        .iter()
        .zip(&counts.d_fp)
        .map(|(a, b)| d_prec * (dp_dtp * a + dp_dfp * b))
        .collect();
    Ok(Loss { value, grad })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    Utt,
    Phon,
    Ctc,
    Pcl,
    Ucl,
    Fa,
}

impl Term {
    pub const ALL: [Term; 6] = [Term::Utt, Term::Phon, Term::Ctc, Term::Pcl, Term::Ucl, Term::Fa];

    pub fn name(self) -> &'static str {
        match self {
            Term::Utt => "utt",
            Term::Phon => "phon",
            Term::Ctc => "ctc",
            Term::Pcl => "pcl",
            Term::Ucl => "ucl",
            Term::Fa => "fa",
        }
    }

    pub fn parse(s: &str) -> Option<Term> {
        Term::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which of the six terms enter the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermSet {
    enabled: [bool; 6],
}

impl Default for TermSet {
    fn default() -> Self {
        Self::all()
    }
}

impl TermSet {
    pub fn all() -> Self {
        Self { enabled: [true; 6] }
    }

    pub fn without(mut self, t: Term) -> Self {
        self.enabled[t as usize] = false;
        self
    }

    pub fn contains(&self, t: Term) -> bool {
        self.enabled[t as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = Term> + '_ {
        Term::ALL.into_iter().filter(|&t| self.contains(t))
    }
}

/// Per-term values; `None` marks a term excluded from the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TermValues {
    values: [Option<f64>; 6],
}

impl TermValues {
    pub fn set(&mut self, t: Term, v: f64) {
        self.values[t as usize] = Some(v);
    }

    pub fn get(&self, t: Term) -> Option<f64> {
        self.values[t as usize]
    }

    pub fn from_array(values: [Option<f64>; 6]) -> Self {
        Self { values }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Term, f64)> + '_ {
        Term::ALL
            .into_iter()
            .filter_map(|t| self.get(t).map(|v| (t, v)))
    }

    /// Sum of the present terms; `0.0` (not `-0.0`) when none are.
    pub fn total(&self) -> f64 {
        self.iter().fold(0.0, |acc, (_, v)| acc + v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub l_utt: Option<f64>,
    pub l_phon: Option<f64>,
    pub l_ctc: Option<f64>,
    pub l_pcl: Option<f64>,
    pub l_ucl: Option<f64>,
    pub l_fa: Option<f64>,
    pub l_total: f64,
    pub gradients: ParamSet,
}

impl LossReport {
    pub fn terms(&self) -> TermValues {
        TermValues::from_array([
            self.l_utt,
            self.l_phon,
            self.l_ctc,
            self.l_pcl,
            self.l_ucl,
            self.l_fa,
        ])
    }
}

/// Adds `src` into `acc` tensor by tensor, inserting missing names.
pub fn accumulate(acc: &mut ParamSet, src: &ParamSet) {
    for (name, g) in src.iter() {
        match acc.get_mut(name) {
            Some(a) => *a += g,
            None => acc.insert(name.clone(), g.clone()),
        }
    }
}

/// Unweighted sum of the active terms; gradients summed per named tensor.
pub fn total_loss(parts: TermValues, gradients: impl IntoIterator<Item = ParamSet>) -> Result<LossReport> {
    for (t, v) in parts.iter() {
        if !v.is_finite() {
            return Err(KwsError::NonFiniteTerm(t.name()));
        }
    }
    let l_total = parts.total();
    let mut acc = ParamSet::new();
    for g in gradients {
        accumulate(&mut acc, &g);
    }
    Ok(LossReport {
        l_utt: parts.get(Term::Utt),
        l_phon: parts.get(Term::Phon),
        l_ctc: parts.get(Term::Ctc),
        l_pcl: parts.get(Term::Pcl),
        l_ucl: parts.get(Term::Ucl),
        l_fa: parts.get(Term::Fa),
        l_total,
        gradients: acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bce_examples() {
        assert!(bce(&[1.0 - 1e-7], &[1.0]).unwrap().value < 1e-6);
        assert_abs_diff_eq!(bce(&[0.5, 0.5], &[1.0, 0.0]).unwrap().value, 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(bce(&[0.9], &[0.0]).unwrap().value, 10f64.ln(), epsilon = 1e-12);
        assert!(matches!(bce(&[0.5], &[1.0, 0.0]), Err(KwsError::LengthMismatch(1, 2))));
        // clamped far outside the open interval: finite value, zero gradient
        let l = bce(&[0.0], &[1.0]).unwrap();
        assert!(l.value.is_finite());
        assert_eq!(l.grad, vec![0.0]);
    }

    #[test]
    fn pcl_zero_cases() {
        assert_eq!(pcl_loss(&[1.0], &[1.0]).unwrap().value, 0.0);
        assert_eq!(pcl_loss(&[0.0], &[0.0]).unwrap().value, 0.0);
        assert!(matches!(pcl_loss(&[], &[]), Err(KwsError::EmptyBatch)));
    }

    #[test]
    fn ucl_rejects_non_square() {
        let r = ucl_loss_raw(&Mat::zeros((2, 3)), &Mat::zeros((2, 3)));
        assert!(matches!(r, Err(KwsError::NotSquare(2, 3))));
    }

    #[test]
    fn smooth_counts_empty() {
        let c = smooth_counts(&[], &[], &FaConfig::default()).unwrap();
        assert_eq!((c.tp, c.fp), (0.0, 0.0));
        assert_abs_diff_eq!(FaConfig::default().bound_scale(), 1.245, epsilon = 1e-15);
    }

    #[test]
    fn fa_objective_at_full_precision_is_zero() {
        assert_eq!(fa_objective(1.0, &FaConfig::default()), 0.0);
    }

    #[test]
    fn fa_without_positives_is_zero() {
        let l = fa_loss(&[0.2, 0.9], &[0.0, 0.0], &FaConfig::default()).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn total_loss_sums_and_rejects_non_finite() {
        let zero = TermValues::from_array([Some(0.0); 6]);
        assert_eq!(total_loss(zero, []).unwrap().l_total, 0.0);
        let ones = TermValues::from_array([Some(1.0); 6]);
        assert_eq!(total_loss(ones, []).unwrap().l_total, 6.0);
        let mut bad = ones;
        bad.set(Term::Ctc, f64::NAN);
        assert!(matches!(total_loss(bad, []), Err(KwsError::NonFiniteTerm("ctc"))));
        let dropped = TermValues::from_array([Some(1.0), Some(1.0), Some(1.0), Some(1.0), Some(1.0), None]);
        let r = total_loss(dropped, []).unwrap();
        assert_eq!(r.l_total, 5.0);
        assert_eq!(r.l_fa, None);
    }

    #[test]
    fn gradients_accumulate_by_name() {
        let mut a = ParamSet::new();
        a.insert("w", Mat::from_elem((1, 2), 1.0));
        let mut b = ParamSet::new();
        b.insert("w", Mat::from_elem((1, 2), 2.0));
        b.insert("v", Mat::from_elem((1, 1), 5.0));
        let r = total_loss(TermValues::default(), [a, b]).unwrap();
        assert_eq!(r.gradients.get("w").unwrap()[[0, 1]], 3.0);
        assert_eq!(r.gradients.get("v").unwrap()[[0, 0]], 5.0);
    }

    #[test]
    fn term_names_round_trip() {
        for t in Term::ALL {
            assert_eq!(Term::parse(t.name()), Some(t));
        }
        let set = TermSet::all().without(Term::Pcl);
        assert!(!set.contains(Term::Pcl));
        assert_eq!(set.iter().count(), 5);
    }
}
