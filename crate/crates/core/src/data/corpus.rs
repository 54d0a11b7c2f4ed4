//! A corpus is keywords + audio + trials, in memory or as a directory:
//! `audio/<id>.wav`, `trials.csv`, `lexicon.txt`, `keywords.txt`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::data::lexicon::{to_phonemes, Lexicon};
use crate::data::synth::{synth_clip, SynthSpec};
use crate::data::trials::{audio_id, build_trials, read_trials_csv, write_trials_csv, Keyword, TrialPair};
use crate::data::wav::{load_wav, write_wav};
use crate::dsp::Waveform;
use crate::error::{KwsError, Result};
use crate::seed::{rng_for, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub keywords: Vec<Keyword>,
    pub lexicon: Lexicon,
    /// Audio by id.
    pub audio: BTreeMap<String, Waveform>,
    pub trials: Vec<TrialPair>,
}

/// Trial layout knobs for [`Corpus::synthesize`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialLayout {
    pub n_per_kw: usize,
    pub neg_ratio: f64,
    pub hard_neg_fraction: f64,
}

impl Default for TrialLayout {
    fn default() -> Self {
        Self { n_per_kw: 20, neg_ratio: 1.0, hard_neg_fraction: 0.5 }
    }
}

pub fn resolve_keywords(texts: &[String], lex: &Lexicon) -> Result<Vec<Keyword>> {
    texts
        .iter()
        .map(|t| Ok(Keyword::new(t.trim(), to_phonemes(t, lex)?)))
        .collect()
}

/// Seed of utterance `i` of keyword `k` under corpus seed `seed`.
fn utterance_seed(seed: u64, k: usize, i: usize) -> u64 {
    rng_for(seed, Stream::Corpus, (1 << 40) | ((k as u64) << 20) | i as u64).gen()
}

impl Corpus {
    /// Renders `layout.n_per_kw` clips per keyword of `spec.keywords` and
    /// builds the matching trial list. Deterministic in `spec.seed`.
    pub fn synthesize(spec: &SynthSpec, lexicon: Lexicon, layout: TrialLayout) -> Result<Self> {
        let keywords = resolve_keywords(&spec.keywords, &lexicon)?;
        let trials = build_trials(
            &keywords,
            layout.n_per_kw,
            layout.neg_ratio,
            layout.hard_neg_fraction,
            spec.seed,
        )?;
        let mut audio = BTreeMap::new();
        for (k, kw) in keywords.iter().enumerate() {
            for i in 0..layout.n_per_kw {
                let w = synth_clip(&kw.phonemes, spec, utterance_seed(spec.seed, k, i))?;
                audio.insert(audio_id(k, i), w);
            }
        }
        Ok(Self { keywords, lexicon, audio, trials })
    }

    pub fn waveform(&self, id: &str) -> Result<&Waveform> {
        self.audio
            .get(id)
            .ok_or_else(|| KwsError::BadArgument(format!("trial references missing audio `{id}`")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let audio_dir = dir.join("audio");
        std::fs::create_dir_all(&audio_dir).map_err(|e| KwsError::io(&audio_dir, e))?;
        for (id, w) in &self.audio {
            write_wav(&audio_dir.join(format!("{id}.wav")), w)?;
        }
        write_trials_csv(&dir.join("trials.csv"), &self.trials)?;
        let lex_path = dir.join("lexicon.txt");
        std::fs::write(&lex_path, self.lexicon.to_text()).map_err(|e| KwsError::io(&lex_path, e))?;
        let kw_path = dir.join("keywords.txt");
        let kw_text: String = self.keywords.iter().map(|k| format!("{}\n", k.text)).collect();
        std::fs::write(&kw_path, kw_text).map_err(|e| KwsError::io(&kw_path, e))?;
        Ok(())
    }

    /// Loads a corpus directory. `lexicon.txt` and `keywords.txt` are
    /// optional (builtin lexicon; keywords taken from the trials).
    pub fn load(dir: &Path) -> Result<Self> {
        Self::load_trials(&dir.join("trials.csv"))
    }

    /// Loads from a trial list; audio, lexicon and keyword files are looked
    /// up next to it.
    pub fn load_trials(trials_path: &Path) -> Result<Self> {
        let dir = trials_path.parent().unwrap_or_else(|| Path::new("."));
        let trials = read_trials_csv(trials_path)?;
        let lex_path = dir.join("lexicon.txt");
        let lexicon = if lex_path.exists() { Lexicon::load(&lex_path)? } else { Lexicon::builtin() };
        let kw_path = dir.join("keywords.txt");
        let keywords = if kw_path.exists() {
            resolve_keywords(&read_lines(&kw_path)?, &lexicon)?
        } else {
            let mut seen: Vec<Keyword> = Vec::new();
            for t in &trials {
                if !seen.iter().any(|k| k.text == t.keyword) {
                    seen.push(Keyword::new(t.keyword.clone(), t.phoneme_ids.clone()));
                }
            }
            seen
        };
        let mut audio = BTreeMap::new();
        for t in &trials {
            if !audio.contains_key(&t.audio) {
                let w = load_wav(&dir.join("audio").join(format!("{}.wav", t.audio)))?;
                audio.insert(t.audio.clone(), w);
            }
        }
        Ok(Self { keywords, lexicon, audio, trials })
    }
}

/// Non-empty, non-comment lines of a text file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| KwsError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}
