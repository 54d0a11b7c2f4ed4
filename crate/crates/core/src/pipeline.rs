//! End-to-end helpers shared by the command-line tool and the experiments:
//! scoring a corpus, the metric report and the figure set.

use std::path::Path;

use crate::data::lexicon::symbols;
use crate::data::Corpus;
use crate::error::{KwsError, Result};
use crate::eval::{acc_n_from_scores, emit_alignment_heatmap, emit_similarity_matrix, MetricReport, TrialScore};
use crate::matcher::cosine_similarity;
use crate::model::{FeatureBank, Model, Scorer};

/// `q_utt` for every trial of the corpus.
pub fn score_trials(model: &Model, corpus: &Corpus, features: &FeatureBank) -> Result<Vec<TrialScore>> {
    let mut scorer = Scorer::new(model);
    corpus
        .trials
        .iter()
        .map(|t| {
            Ok(TrialScore {
                audio_id: t.audio.clone(),
                keyword_id: t.keyword.clone(),
                score: scorer.score(&t.audio, features.get(&t.audio)?, &t.phoneme_ids)?,
                label: t.match_flag,
            })
        })
        .collect()
}

/// Every audio with a positive trial scored against every corpus keyword.
pub fn closed_set_scores(model: &Model, corpus: &Corpus, features: &FeatureBank) -> Result<Vec<TrialScore>> {
    let mut scorer = Scorer::new(model);
    let mut out = Vec::new();
    for t in corpus.trials.iter().filter(|t| t.match_flag) {
        for kw in &corpus.keywords {
            out.push(TrialScore {
                audio_id: t.audio.clone(),
                keyword_id: kw.text.clone(),
                score: scorer.score(&t.audio, features.get(&t.audio)?, &kw.phonemes)?,
                label: kw.text == t.keyword,
            });
        }
    }
    Ok(out)
}

/// Metric report on the corpus trials; ACC_N uses all corpus keywords as
/// candidates and is omitted when it is undefined.
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    features: &FeatureBank,
    threshold: f64,
) -> Result<(MetricReport, Vec<TrialScore>)> {
    let scores = score_trials(model, corpus, features)?;
    let mut report = MetricReport::compute(&scores, threshold)?;
    if corpus.keywords.len() >= 2 {
        report.acc_n = match acc_n_from_scores(&closed_set_scores(model, corpus, features)?) {
            Ok(a) => Some(a),
            Err(KwsError::InconsistentCandidates(_) | KwsError::EmptyBatch) => None,
            Err(e) => return Err(e),
        };
    }
    Ok((report, scores))
}

/// Writes `similarity.{csv,svg}` (cosine similarity of pooled embeddings,
/// first positive audio of up to `max_keywords` keywords against their
/// keyword texts) and `alignment.{csv,svg}` for the first positive trial.
pub fn emit_figures(
    model: &Model,
    corpus: &Corpus,
    features: &FeatureBank,
    out_dir: &Path,
    max_keywords: usize,
) -> Result<()> {
    let mut scorer = Scorer::new(model);
    let mut audio = Vec::new();
    let mut text = Vec::new();
    let mut labels = Vec::new();
    for kw in corpus.keywords.iter().take(max_keywords) {
        if let Some(t) = corpus.trials.iter().find(|t| t.match_flag && t.keyword == kw.text) {
            let ins = scorer.inspect(&t.audio, features.get(&t.audio)?, &t.phoneme_ids)?;
            audio.push(ins.audio);
            text.push(ins.text);
            labels.push(kw.text.clone());
        }
    }
    if !audio.is_empty() {
        let sim = cosine_similarity(&audio, &text)?;
        emit_similarity_matrix(&sim, &labels, &out_dir.join("similarity"))?;
    }
    if let Some(t) = corpus.trials.iter().find(|t| t.match_flag) {
        let ins = scorer.inspect(&t.audio, features.get(&t.audio)?, &t.phoneme_ids)?;
        let phonemes: Vec<String> = symbols(&t.phoneme_ids).split(' ').map(String::from).collect();
        emit_alignment_heatmap(&ins.joint, &phonemes, &out_dir.join("alignment"))?;
    }
    Ok(())
}
