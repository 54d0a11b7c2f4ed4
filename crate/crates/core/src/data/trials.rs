//! Trial construction (positives, easy and hard negatives) and the trial CSV.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::lexicon::{phoneme_id, symbols};
use crate::error::{KwsError, Result};
use crate::seed::{rng_for, Stream};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Keyword {
    pub text: String,
    pub phonemes: Vec<usize>,
}

impl Keyword {
    pub fn new(text: impl Into<String>, phonemes: Vec<usize>) -> Self {
        Self { text: text.into(), phonemes }
    }
}

/// Levenshtein distance over phoneme ids.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Audio id of utterance `i` of keyword `k`.
pub fn audio_id(k: usize, i: usize) -> String {
    format!("kw{k:02}_u{i:03}")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialPair {
    /// Audio id (file stem under `audio/`).
    pub audio: String,
    pub keyword: String,
    pub phoneme_ids: Vec<usize>,
    pub match_flag: bool,
    pub hard_negative: bool,
}

impl TrialPair {
    pub fn label(&self) -> f64 {
        if self.match_flag {
            1.0
        } else {
            0.0
        }
    }
}

/// For each keyword `k`, `n_per_kw` positives over utterances `kw{k}_u000..`
/// plus `round(n_per_kw * neg_ratio)` negatives reusing the same audio. Of
/// those, `round(n_neg * hard_neg_fraction)` pair the audio with a keyword at
/// minimal non-zero edit distance; the rest pick any other keyword.
pub fn build_trials(
    keywords: &[Keyword],
    n_per_kw: usize,
    neg_ratio: f64,
    hard_neg_fraction: f64,
    seed: u64,
) -> Result<Vec<TrialPair>> {
    if keywords.len() < 2 {
        return Err(KwsError::InsufficientKeywords(keywords.len()));
    }
    if !(neg_ratio >= 0.0 && neg_ratio.is_finite()) || !(0.0..=1.0).contains(&hard_neg_fraction) {
        return Err(KwsError::BadArgument(
            "neg_ratio must be >= 0 and hard_neg_fraction in [0, 1]".into(),
        ));
    }
    let mut rng = rng_for(seed, Stream::Trials, 0);
    let n_neg = (n_per_kw as f64 * neg_ratio).round() as usize;
    let n_hard = (n_neg as f64 * hard_neg_fraction).round() as usize;
    let mut out = Vec::with_capacity(keywords.len() * (n_per_kw + n_neg));
    for (k, kw) in keywords.iter().enumerate() {
        for i in 0..n_per_kw {
            out.push(TrialPair {
                audio: audio_id(k, i),
                keyword: kw.text.clone(),
                phoneme_ids: kw.phonemes.clone(),
                match_flag: true,
                hard_negative: false,
            });
        }
        let others: Vec<usize> = (0..keywords.len())
            .filter(|&j| j != k && keywords[j].phonemes != kw.phonemes)
            .collect();
        if others.is_empty() && n_neg > 0 {
            return Err(KwsError::InsufficientKeywords(1));
        }
        let nearest = others
            .iter()
            .map(|&j| edit_distance(&kw.phonemes, &keywords[j].phonemes))
            .min()
            .unwrap_or(0);
        let hard_pool: Vec<usize> = others
            .iter()
            .copied()
            .filter(|&j| edit_distance(&kw.phonemes, &keywords[j].phonemes) == nearest)
            .collect();
        for j in 0..n_neg {
            let hard = j < n_hard;
            let pool = if hard { &hard_pool } else { &others };
            let other = &keywords[*pool.choose(&mut rng).expect("non-empty pool")];
            out.push(TrialPair {
                audio: audio_id(k, j % n_per_kw),
                keyword: other.text.clone(),
                phoneme_ids: other.phonemes.clone(),
                match_flag: false,
                hard_negative: hard,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct TrialRow {
    audio_path: String,
    keyword: String,
    phonemes: String,
    #[serde(rename = "match")]
    match_flag: u8,
    #[serde(default)]
    hard_negative: u8,
}

/// Writes `audio_path,keyword,phonemes,match,hard_negative`; audio paths are
/// `audio/<id>.wav`, relative to the corpus directory.
pub fn write_trials_csv(path: &Path, trials: &[TrialPair]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| KwsError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for t in trials {
        w.serialize(TrialRow {
            audio_path: format!("audio/{}.wav", t.audio),
            keyword: t.keyword.clone(),
            phonemes: symbols(&t.phoneme_ids),
            match_flag: u8::from(t.match_flag),
            hard_negative: u8::from(t.hard_negative),
        })?;
    }
    w.flush().map_err(|e| KwsError::io(path, e))?;
    Ok(())
}

/// Reads the trial CSV; the `hard_negative` column is optional.
pub fn read_trials_csv(path: &Path) -> Result<Vec<TrialPair>> {
    let file = std::fs::File::open(path).map_err(|e| KwsError::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: TrialRow = row?;
        let phoneme_ids = row
            .phonemes
            .split_whitespace()
            .map(|p| phoneme_id(p).ok_or_else(|| KwsError::OutOfVocabulary(p.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let audio = row
            .audio_path
            .rsplit('/')
            .next()
            .unwrap_or(&row.audio_path)
            .trim_end_matches(".wav")
            .to_string();
        if row.match_flag > 1 || row.hard_negative > 1 {
            return Err(KwsError::BadArgument(format!("bad flag in trial row for {}", row.audio_path)));
        }
        out.push(TrialPair {
            audio,
            keyword: row.keyword,
            phoneme_ids,
            match_flag: row.match_flag == 1,
            hard_negative: row.hard_negative == 1,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::lexicon::phoneme_id;
    use proptest::prelude::*;

    fn kw(text: &str) -> Keyword {
        let ids = text.split_whitespace().map(|p| phoneme_id(p).unwrap()).collect();
        Keyword::new(text, ids)
    }

    #[test]
    fn distance_examples() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(edit_distance(&[], &[4, 5]), 2);
        assert_eq!(edit_distance(&[1, 2], &[2, 1]), 2);
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(
            a in prop::collection::vec(0usize..5, 0..6),
            b in prop::collection::vec(0usize..5, 0..6),
            c in prop::collection::vec(0usize..5, 0..6),
        ) {
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        }
    }

    #[test]
    fn no_negatives_means_all_matched() {
        let t = build_trials(&[kw("HH EY"), kw("K AE T")], 4, 0.0, 0.5, 1).unwrap();
        assert_eq!(t.len(), 8);
        assert!(t.iter().all(|p| p.match_flag));
    }

    #[test]
    fn hard_negatives_pick_the_nearest_keyword() {
        let kws = [kw("HH EY"), kw("HH AY"), kw("S T R IY T")];
        let t = build_trials(&kws, 5, 1.0, 1.0, 3).unwrap();
        for p in t.iter().filter(|p| !p.match_flag) {
            assert!(p.hard_negative);
            let own = &kws[p.audio[2..4].parse::<usize>().unwrap()].text;
            match own.as_str() {
                "HH EY" => assert_eq!(p.keyword, "HH AY"),
                "HH AY" => assert_eq!(p.keyword, "HH EY"),
                _ => {}
            }
        }
    }

    #[test]
    fn counts_add_up() {
        let kws: Vec<Keyword> = ["HH EY", "K AE T", "D AO G", "B ER D", "F IH SH"].iter().map(|s| kw(s)).collect();
        let t = build_trials(&kws, 10, 1.0, 0.3, 0).unwrap();
        assert_eq!(t.iter().filter(|p| p.match_flag).count(), 50);
        assert_eq!(t.iter().filter(|p| !p.match_flag).count(), 50);
        assert_eq!(t.iter().filter(|p| p.hard_negative).count(), 15);
        for p in &t {
            let own = &kws[p.audio[2..4].parse::<usize>().unwrap()];
            assert_eq!(p.match_flag, own.text == p.keyword);
        }
    }

    #[test]
    fn seeded_and_validated() {
        let kws = [kw("HH EY"), kw("K AE T"), kw("D AO G")];
        assert_eq!(build_trials(&kws, 6, 1.0, 0.5, 9).unwrap(), build_trials(&kws, 6, 1.0, 0.5, 9).unwrap());
        assert!(matches!(
            build_trials(&kws[..1], 6, 1.0, 0.5, 9),
            Err(KwsError::InsufficientKeywords(1))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let kws = [kw("HH EY"), kw("K AE T"), kw("D AO G")];
        let t = build_trials(&kws, 3, 1.0, 0.5, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.csv");
        write_trials_csv(&path, &t).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("audio_path,keyword,phonemes,match"));
        assert_eq!(read_trials_csv(&path).unwrap(), t);
    }
}
