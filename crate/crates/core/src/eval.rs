//! Detection metrics, score files and figure emitters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::matcher::{JointRepresentation, SimilarityMatrix};
use crate::tape::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialScore {
    pub audio_id: String,
    pub keyword_id: String,
    pub score: f64,
    #[serde(with = "bool_as_int")]
    pub label: bool,
}

mod bool_as_int {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            x => Err(serde::de::Error::custom(format!("label must be 0 or 1, got {x}"))),
        }
    }
}

fn split(scores: &[TrialScore]) -> (Vec<f64>, Vec<f64>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for s in scores {
        if s.label {
            pos.push(s.score);
        } else {
            neg.push(s.score);
        }
    }
    (pos, neg)
}

fn both_classes(scores: &[TrialScore]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (pos, neg) = split(scores);
    if pos.is_empty() || neg.is_empty() {
        return Err(KwsError::DegenerateLabels);
    }
    Ok((pos, neg))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[TrialScore]) -> Result<f64> {
    let (pos, mut neg) = both_classes(scores)?;
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for p in &pos {
        let below = neg.partition_point(|&n| n < *p);
        let not_above = neg.partition_point(|&n| n <= *p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (pos.len() as f64 * neg.len() as f64))
}

/// Fraction of negatives with `score >= threshold`.
pub fn far(scores: &[TrialScore], threshold: f64) -> Result<f64> {
    let (_, neg) = split(scores);
    if neg.is_empty() {
        return Err(KwsError::NoNegatives);
    }
    Ok(neg.iter().filter(|&&s| s >= threshold).count() as f64 / neg.len() as f64)
}

/// Fraction of positives with `score < threshold`.
fn frr(pos: &[f64], threshold: f64) -> f64 {
    pos.iter().filter(|&&s| s < threshold).count() as f64 / pos.len() as f64
}

/// `(threshold, FAR, FRR)` at a point below every score, at every midpoint
/// between distinct scores, and above every score.
pub fn far_frr_sweep(scores: &[TrialScore]) -> Result<Vec<(f64, f64, f64)>> {
    let (pos, neg) = both_classes(scores)?;
    let mut uniq: Vec<f64> = scores.iter().map(|s| s.score).collect();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let mut ts = vec![uniq[0] - 1.0];
    ts.extend(uniq.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    ts.push(uniq[uniq.len() - 1] + 1.0);
    let far_at = |t: f64| neg.iter().filter(|&&s| s >= t).count() as f64 / neg.len() as f64;
    Ok(ts.into_iter().map(|t| (t, far_at(t), frr(&pos, t))).collect())
}

/// Equal error rate and its threshold, interpolated linearly between the
/// two sweep points where `FAR - FRR` changes sign.
pub fn eer(scores: &[TrialScore]) -> Result<(f64, f64)> {
    let sweep = far_frr_sweep(scores)?;
    for w in sweep.windows(2) {
        let (t0, a0, r0) = w[0];
        let (t1, a1, r1) = w[1];
        let (d0, d1) = (a0 - r0, a1 - r1);
        if d0 == 0.0 {
            return Ok((a0, t0));
        }
        if d0 > 0.0 && d1 <= 0.0 {
            let k = d0 / (d0 - d1);
            return Ok((a0 + k * (a1 - a0), t0 + k * (t1 - t0)));
        }
    }
    // the sweep starts at FAR = 1, FRR = 0 and ends at FAR = 0, FRR = 1
    unreachable!("FAR - FRR changes sign within the sweep")
}

/// Closed-set accuracy: an audio counts when its true keyword's score is
/// strictly greater than every other candidate's.
pub fn acc_n(grouped: &[Vec<f64>], truth: &[usize]) -> Result<f64> {
    if grouped.len() != truth.len() {
        return Err(KwsError::InconsistentCandidates(format!(
            "{} score lists for {} truths",
            grouped.len(),
            truth.len()
        )));
    }
    let Some(n) = grouped.first().map(Vec::len) else {
        return Err(KwsError::EmptyBatch);
    };
    let mut correct = 0;
    for (row, &t) in grouped.iter().zip(truth) {
        if row.len() != n || t >= n {
            return Err(KwsError::InconsistentCandidates(format!(
                "expected {n} candidates with truth inside, got {} with truth {t}",
                row.len()
            )));
        }
        let best_other = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != t)
            .map(|(_, &s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        if row[t] > best_other {
            correct += 1;
        }
    }
    Ok(correct as f64 / grouped.len() as f64)
}

/// [`acc_n`] over a score list where every audio was scored against the same
/// keyword set; the positive trial of each audio marks its truth.
pub fn acc_n_from_scores(scores: &[TrialScore]) -> Result<f64> {
    let mut by_audio: BTreeMap<&str, BTreeMap<&str, (f64, bool)>> = BTreeMap::new();
    for s in scores {
        by_audio
            .entry(&s.audio_id)
            .or_default()
            .insert(&s.keyword_id, (s.score, s.label));
    }
    let mut keys: Option<Vec<&str>> = None;
    let mut grouped = Vec::new();
    let mut truth = Vec::new();
    for (audio, row) in &by_audio {
        let k: Vec<&str> = row.keys().copied().collect();
        match &keys {
            None => keys = Some(k),
            Some(prev) if *prev != k => {
                return Err(KwsError::InconsistentCandidates(format!(
                    "audio {audio} has a different candidate set"
                )))
            }
            _ => {}
        }
        let t: Vec<usize> = row.values().enumerate().filter(|(_, v)| v.1).map(|(i, _)| i).collect();
        if t.len() != 1 {
            return Err(KwsError::InconsistentCandidates(format!(
                "audio {audio} has {} true keywords",
                t.len()
            )));
        }
        truth.push(t[0]);
        grouped.push(row.values().map(|v| v.0).collect());
    }
    acc_n(&grouped, &truth)
}

/// Metric bundle; undefined metrics serialize as `"n/a"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(with = "or_na")]
    pub auc: Option<f64>,
    #[serde(with = "or_na")]
    pub eer: Option<f64>,
    #[serde(with = "or_na")]
    pub eer_threshold: Option<f64>,
    #[serde(with = "or_na")]
    pub far_at_threshold: Option<f64>,
    #[serde(with = "or_na")]
    pub acc_n: Option<f64>,
    pub threshold: f64,
    pub n_trials: usize,
    pub n_positive: usize,
    pub n_negative: usize,
}

mod or_na {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("n/a"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(Some(x)),
            Repr::Text(t) if t == "n/a" => Ok(None),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected number or \"n/a\", got {t}"))),
        }
    }
}

impl MetricReport {
    /// AUC/EER need both classes and FAR needs negatives; whatever is
    /// undefined is left as `None`. `acc_n` is filled in by the caller.
    pub fn compute(scores: &[TrialScore], threshold: f64) -> Result<Self> {
        for s in scores {
            if !s.score.is_finite() {
                return Err(KwsError::BadArgument(format!("non-finite score for {}", s.audio_id)));
            }
        }
        let (pos, neg) = split(scores);
        let defined = !pos.is_empty() && !neg.is_empty();
        let (eer_v, eer_t) = if defined {
            let (e, t) = eer(scores)?;
            (Some(e), Some(t))
        } else {
            (None, None)
        };
        Ok(Self {
            auc: if defined { Some(auc(scores)?) } else { None },
            eer: eer_v,
            eer_threshold: eer_t,
            far_at_threshold: if neg.is_empty() { None } else { Some(far(scores, threshold)?) },
            acc_n: None,
            threshold,
            n_trials: scores.len(),
            n_positive: pos.len(),
            n_negative: neg.len(),
        })
    }
}

pub fn write_scores_csv(path: &Path, scores: &[TrialScore]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| KwsError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for s in scores {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| KwsError::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<TrialScore>> {
    let file = std::fs::File::open(path).map_err(|e| KwsError::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    r.deserialize().map(|row| Ok(row?)).collect()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| KwsError::io(path, e))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Labelled matrix CSV: a header of column labels, then one labelled row
/// per matrix row.
pub fn matrix_csv(m: &Mat, row_labels: &[String], col_labels: &[String]) -> String {
    let mut out = String::from("label");
    for l in col_labels {
        out.push(',');
        out.push_str(&csv_field(l));
    }
    out.push('\n');
    for (r, label) in row_labels.iter().enumerate() {
        out.push_str(&csv_field(label));
        for c in 0..m.ncols() {
            write!(out, ",{}", m[[r, c]]).expect("write to string");
        }
        out.push('\n');
    }
    out
}

/// Parses [`matrix_csv`] output back into `(matrix, row labels, column labels)`.
pub fn parse_matrix_csv(text: &str) -> Result<(Mat, Vec<String>, Vec<String>)> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let cols: Vec<String> = r.headers()?.iter().skip(1).map(String::from).collect();
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(rec.get(0).unwrap_or_default().to_string());
        for v in rec.iter().skip(1) {
            values.push(
                v.parse::<f64>()
                    .map_err(|_| KwsError::BadArgument(format!("bad matrix value `{v}`")))?,
            );
        }
    }
    let m = Mat::from_shape_vec((rows.len(), cols.len()), values)
        .map_err(|_| KwsError::BadArgument("ragged matrix CSV".into()))?;
    Ok((m, rows, cols))
}

const CELL: usize = 24;
const MARGIN: usize = 90;

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Heatmap SVG; `intensity(value)` in `[0, 1]` maps to a grey level where
/// `bright_high` decides whether 1 is white or black.
fn heatmap_svg(
    m: &Mat,
    row_labels: &[String],
    col_labels: &[String],
    intensity: impl Fn(f64) -> f64,
    bright_high: bool,
) -> String {
    let (rows, cols) = m.dim();
    let (w, h) = (MARGIN + cols * CELL + 10, MARGIN + rows * CELL + 10);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"monospace\" font-size=\"10\">\n"
    );
    for (c, l) in col_labels.iter().enumerate() {
        let x = MARGIN + c * CELL + CELL / 2;
        writeln!(
            s,
            "<text x=\"{x}\" y=\"{}\" transform=\"rotate(-60 {x} {})\">{}</text>",
            MARGIN - 6,
            MARGIN - 6,
            xml_escape(l)
        )
        .expect("write to string");
    }
    for (r, l) in row_labels.iter().enumerate() {
        writeln!(
            s,
            "<text x=\"4\" y=\"{}\">{}</text>",
            MARGIN + r * CELL + CELL / 2 + 4,
            xml_escape(l)
        )
        .expect("write to string");
        for c in 0..cols {
            let v = intensity(m[[r, c]]).clamp(0.0, 1.0);
            let level = if bright_high { v } else { 1.0 - v };
            let g = (level * 255.0).round() as u8;
            writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({g},{g},{g})\" data-value=\"{}\"/>",
                MARGIN + c * CELL,
                MARGIN + r * CELL,
                m[[r, c]]
            )
            .expect("write to string");
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<stem>.csv` and `<stem>.svg`. Cells are shaded by min-max
/// normalised value, darkest for the largest; a constant matrix is mid grey.
pub fn emit_similarity_matrix(sim: &SimilarityMatrix, labels: &[String], stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let (rows, cols) = sim.s_utt.dim();
    if rows != cols {
        return Err(KwsError::NotSquare(rows, cols));
    }
    if labels.len() != rows {
        return Err(KwsError::LengthMismatch(labels.len(), rows));
    }
    let lo = sim.s_utt.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sim.s_utt.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm = move |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    let csv_path = stem.with_extension("csv");
    let svg_path = stem.with_extension("svg");
    write_file(&csv_path, &matrix_csv(&sim.s_utt, labels, labels))?;
    write_file(&svg_path, &heatmap_svg(&sim.s_utt, labels, labels, norm, false))?;
    Ok((csv_path, svg_path))
}

/// Writes `<stem>.csv` and `<stem>.svg` with phonemes as rows and frames as
/// columns. Brightness is the attention weight itself, so one-hot rows are
/// white and uniform rows over two frames are mid grey.
pub fn emit_alignment_heatmap(j: &JointRepresentation, phoneme_labels: &[String], stem: &Path) -> Result<(PathBuf, PathBuf)> {
    if phoneme_labels.len() != j.attn.nrows() {
        return Err(KwsError::LengthMismatch(phoneme_labels.len(), j.attn.nrows()));
    }
    let frames: Vec<String> = (0..j.attn.ncols()).map(|t| format!("f{t}")).collect();
    let csv_path = stem.with_extension("csv");
    let svg_path = stem.with_extension("svg");
    write_file(&csv_path, &matrix_csv(&j.attn, phoneme_labels, &frames))?;
    write_file(&svg_path, &heatmap_svg(&j.attn, phoneme_labels, &frames, |v| v, true))?;
    Ok((csv_path, svg_path))
}

/// Mean Shannon entropy (nats) of the attention rows.
pub fn mean_row_entropy(attn: &Mat) -> f64 {
    let total: f64 = attn
        .rows()
        .into_iter()
        .map(|row| -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
        .sum();
    total / attn.nrows().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(pos: &[f64], neg: &[f64]) -> Vec<TrialScore> {
        let mk = |s: f64, label: bool, i: usize| TrialScore {
            audio_id: format!("a{i}"),
            keyword_id: "k".into(),
            score: s,
            label,
        };
        pos.iter()
            .enumerate()
            .map(|(i, &s)| mk(s, true, i))
            .chain(neg.iter().enumerate().map(|(i, &s)| mk(s, false, 100 + i)))
            .collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&ts(&[0.9], &[0.1])).unwrap(), 1.0);
        assert_eq!(auc(&ts(&[0.5, 0.5], &[0.5])).unwrap(), 0.5);
        assert_eq!(auc(&ts(&[0.8, 0.4], &[0.6, 0.2])).unwrap(), 0.75);
        assert!(matches!(auc(&ts(&[0.8], &[])), Err(KwsError::DegenerateLabels)));
    }

    #[test]
    fn eer_examples() {
        assert_eq!(eer(&ts(&[0.9, 0.8], &[0.2, 0.1])).unwrap().0, 0.0);
        assert_eq!(eer(&ts(&[0.6, 0.2], &[0.6, 0.2])).unwrap().0, 0.5);
        let (e, t) = eer(&ts(&[0.9, 0.7, 0.3], &[0.8, 0.2, 0.1])).unwrap();
        assert!((e - 1.0 / 3.0).abs() < 1e-12);
        assert!(t > 0.3 && t < 0.7);
    }

    #[test]
    fn far_examples() {
        assert_eq!(far(&ts(&[], &[0.2, 0.99]), 1.0).unwrap(), 0.0);
        assert_eq!(far(&ts(&[], &[0.2, 0.0]), 0.0).unwrap(), 1.0);
        let mut neg = vec![0.1; 1000];
        neg[17] = 0.7;
        assert_eq!(far(&ts(&[], &neg), 0.5).unwrap(), 0.001);
        assert!(matches!(far(&ts(&[0.3], &[]), 0.5), Err(KwsError::NoNegatives)));
    }

    #[test]
    fn acc_examples() {
        assert_eq!(acc_n(&[vec![0.1, 0.9, 0.3]], &[1]).unwrap(), 1.0);
        assert_eq!(acc_n(&[vec![0.9, 0.9, 0.3]], &[1]).unwrap(), 0.0);
        let g = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.7, 0.3]];
        assert!((acc_n(&g, &[0, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            acc_n(&[vec![0.1, 0.2], vec![0.3]], &[0, 0]),
            Err(KwsError::InconsistentCandidates(_))
        ));
    }

    #[test]
    fn report_marks_missing_negatives() {
        let r = MetricReport::compute(&ts(&[0.9, 0.4], &[]), 0.5).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"far_at_threshold\":\"n/a\""), "{json}");
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn entropy_of_rows() {
        let m = Mat::from_shape_vec((2, 2), vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        assert!((mean_row_entropy(&m) - 0.5 * 2f64.ln()).abs() < 1e-15);
    }
}
