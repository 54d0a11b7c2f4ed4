//! Pronunciation lexicon standing in for a G2P model.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{KwsError, Result};

/// ARPAbet phoneme inventory; the index is the phoneme id.
pub const PHONEMES: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH",
    "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH",
    "UW", "V", "W", "Y", "Z", "ZH",
];

const DEFAULT_LEXICON: &str = include_str!("../../data/lexicon.txt");

pub fn phoneme_id(symbol: &str) -> Option<usize> {
    // tolerate CMU-style stress digits
    let base = symbol.trim_end_matches(|c: char| c.is_ascii_digit());
    PHONEMES.iter().position(|&p| p.eq_ignore_ascii_case(base))
}

pub fn phoneme_symbol(id: usize) -> Option<&'static str> {
    PHONEMES.get(id).copied()
}

pub fn vocab_size() -> usize {
    PHONEMES.len()
}

pub fn symbols(ids: &[usize]) -> String {
    ids.iter()
        .map(|&i| phoneme_symbol(i).unwrap_or("?"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    words: HashMap<String, Vec<usize>>,
}

impl Lexicon {
    /// The bundled ~200-word lexicon.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }

    /// One entry per line: `WORD P1 P2 ...`. Blank lines and lines starting
    /// with `;;;` or `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut words = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with(";;;") || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().expect("non-empty line").to_uppercase();
            let ids = parts
                .map(|p| {
                    phoneme_id(p).ok_or_else(|| {
                        KwsError::BadArgument(format!("lexicon line {}: unknown phoneme {p}", n + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if ids.is_empty() {
                return Err(KwsError::BadArgument(format!(
                    "lexicon line {}: `{word}` has no phonemes",
                    n + 1
                )));
            }
            words.insert(word, ids);
        }
        Ok(Self { words })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KwsError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn lookup(&self, word: &str) -> Option<&[usize]> {
        self.words.get(&word.to_uppercase()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Serialized in the same line format [`Lexicon::parse`] reads, sorted.
    pub fn to_text(&self) -> String {
        let mut entries: Vec<_> = self.words.iter().collect();
        entries.sort();
        entries
            .into_iter()
            .map(|(w, ids)| format!("{w} {}\n", symbols(ids)))
            .collect()
    }
}

/// Converts a word, a phrase, or direct `/P1 P2 .../` notation to phoneme ids.
pub fn to_phonemes(text: &str, lex: &Lexicon) -> Result<Vec<usize>> {
    let trimmed = text.trim();
    if let Some(inner) = trimmed.strip_prefix('/').and_then(|s| s.strip_suffix('/')) {
        let ids = inner
            .split_whitespace()
            .map(|p| phoneme_id(p).ok_or_else(|| KwsError::OutOfVocabulary(p.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(KwsError::BadArgument("empty phoneme notation".into()));
        }
        return Ok(ids);
    }
    let mut out = Vec::new();
    for word in trimmed.split_whitespace() {
        let ids = lex
            .lookup(word)
            .ok_or_else(|| KwsError::OutOfVocabulary(word.to_string()))?;
        out.extend_from_slice(ids);
    }
    if out.is_empty() {
        return Err(KwsError::BadArgument("empty keyword".into()));
    }
    Ok(out)
}
