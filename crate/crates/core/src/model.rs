//! The full model: encoders plus matcher over one parameter set, the batch
//! objective used for training, and inference helpers.

use std::collections::{BTreeMap, HashMap};

use crate::alignment::{confidence_grad, ctc_loss_raw, viterbi_align_raw, AlignmentResult, CtcTarget};
use crate::data::lexicon::vocab_size;
use crate::data::{Corpus, TrialPair};
use crate::dsp::{compute_logmel, DEFAULT_N_MELS};
use crate::encoders::{audio_forward, text_forward, AudioEmbedding, CtcLogits, EncoderConfig, EncoderParams, PhonemeQuery};
use crate::error::{KwsError, Result};
use crate::losses::{bce, fa_loss, pcl_loss, total_loss, ucl_loss_raw, FaConfig, Loss, LossReport, Term, TermSet, TermValues};
use crate::matcher::{attend_forward, discriminate_forward, pooled_similarity_forward, JointRepresentation, MatchOutput, MatcherParams};
use crate::params::{Bound, ParamSet};
use crate::seed::{rng_for, Stream};
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

fn is_encoder_tensor(name: &str) -> bool {
    ["audio.", "mel.", "ctc.", "text."].iter().any(|p| name.starts_with(p))
}

impl Model {
    pub fn default_config() -> EncoderConfig {
        EncoderConfig::new(DEFAULT_N_MELS, vocab_size())
    }

    /// Fresh weights; encoder and matcher draw from separate init streams.
    pub fn init(config: EncoderConfig, seed: u64) -> Self {
        let enc = EncoderParams::init(config, &mut rng_for(seed, Stream::Init, 0));
        let mat = MatcherParams::init(&mut rng_for(seed, Stream::Init, 1));
        let mut params = enc.set;
        for (name, m) in mat.set.iter() {
            params.insert(name.clone(), m.clone());
        }
        Self { config, params }
    }

    /// Rebuilds from named tensors, checking every name and shape.
    pub fn from_params(config: EncoderConfig, params: ParamSet) -> Result<Self> {
        let (enc, mat) = split(&params);
        EncoderParams::from_set(config, enc)?;
        MatcherParams::from_set(mat)?;
        Ok(Self { config, params })
    }

    pub fn encoder(&self) -> EncoderParams {
        EncoderParams { config: self.config, set: split(&self.params).0 }
    }

    pub fn matcher(&self) -> MatcherParams {
        MatcherParams { set: split(&self.params).1 }
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }
}

fn split(params: &ParamSet) -> (ParamSet, ParamSet) {
    let (mut enc, mut mat) = (ParamSet::new(), ParamSet::new());
    for (name, m) in params.iter() {
        if is_encoder_tensor(name) {
            enc.insert(name.clone(), m.clone());
        } else {
            mat.insert(name.clone(), m.clone());
        }
    }
    (enc, mat)
}

/// Log-mel frames per audio id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureBank {
    frames: BTreeMap<String, Mat>,
}

impl FeatureBank {
    pub fn from_corpus(corpus: &Corpus, n_mels: usize) -> Result<Self> {
        let mut frames = BTreeMap::new();
        for (id, w) in &corpus.audio {
            frames.insert(id.clone(), compute_logmel(w, n_mels)?.frames);
        }
        Ok(Self { frames })
    }

    pub fn insert(&mut self, id: impl Into<String>, frames: Mat) {
        self.frames.insert(id.into(), frames);
    }

    pub fn get(&self, id: &str) -> Result<&Mat> {
        self.frames
            .get(id)
            .ok_or_else(|| KwsError::BadArgument(format!("no features for audio `{id}`")))
    }
}

/// Knobs of the batch objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub terms: TermSet,
    pub fa: FaConfig,
    /// Group size for the utterance-level contrastive term.
    pub ucl_group: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { terms: TermSet::all(), fa: FaConfig::default(), ucl_group: 5 }
    }
}

/// Everything the forward pass produced for one batch, kept on the tape.
struct BatchGraph {
    logits: HashMap<String, Var>,
    e_a: HashMap<String, Var>,
    e_t: Vec<Var>,
    q_utt: Vec<Var>,
    q_phon: Vec<Var>,
}

fn scalar_node(tape: &mut Tape, input: Var, value: f64, grad: Mat) -> Var {
    tape.custom(
        Mat::from_elem((1, 1), value),
        &[input],
        Box::new(move |g, _, _| vec![&grad * g[[0, 0]]]),
    )
}

fn column_loss(tape: &mut Tape, input: Var, loss: Loss) -> Var {
    let n = loss.grad.len();
    let grad = Mat::from_shape_vec((n, 1), loss.grad).expect("column gradient");
    scalar_node(tape, input, loss.value, grad)
}

fn column_values(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).iter().copied().collect()
}

fn forward_batch(
    tape: &mut Tape,
    bound: &Bound,
    config: &EncoderConfig,
    features: &FeatureBank,
    batch: &[&TrialPair],
) -> Result<BatchGraph> {
    let mut logits = HashMap::new();
    let mut e_a = HashMap::new();
    for t in batch {
        if !e_a.contains_key(&t.audio) {
            let out = audio_forward(tape, bound, config, features.get(&t.audio)?)?;
            e_a.insert(t.audio.clone(), out.e_a);
            logits.insert(t.audio.clone(), out.logits);
        }
    }
    let mut text_cache: HashMap<&[usize], Var> = HashMap::new();
    let mut g = BatchGraph { logits, e_a, e_t: Vec::new(), q_utt: Vec::new(), q_phon: Vec::new() };
    for t in batch {
        let e_t = match text_cache.get(t.phoneme_ids.as_slice()) {
            Some(&v) => v,
            None => {
                let v = text_forward(tape, bound, config, &t.phoneme_ids)?;
                text_cache.insert(&t.phoneme_ids, v);
                v
            }
        };
        let (joint, _) = attend_forward(tape, bound, e_t, g.e_a[&t.audio]);
        let out = discriminate_forward(tape, bound, joint);
        g.e_t.push(e_t);
        g.q_utt.push(out.q_utt);
        g.q_phon.push(out.q_phon);
    }
    Ok(g)
}

fn mean_of(tape: &mut Tape, parts: &[Var]) -> Option<Var> {
    if parts.is_empty() {
        return None;
    }
    let s = tape.sum_scalars(parts);
    Some(tape.affine(s, 1.0 / parts.len() as f64, 0.0))
}

/// Builds every active term on `tape`. Returns the term nodes in
/// [`Term::ALL`] order (`None` for inactive terms).
fn objective_terms(
    tape: &mut Tape,
    g: &BatchGraph,
    batch: &[&TrialPair],
    blank: usize,
    cfg: &ObjectiveConfig,
) -> Result<Vec<(Term, Var)>> {
    let labels: Vec<f64> = batch.iter().map(|t| t.label()).collect();
    let mut terms = Vec::new();

    let q_utt = tape.concat_rows(&g.q_utt);
    let q_utt_vals = column_values(tape, q_utt);
    if cfg.terms.contains(Term::Utt) {
        let l = bce(&q_utt_vals, &labels)?;
        terms.push((Term::Utt, column_loss(tape, q_utt, l)));
    }
    if cfg.terms.contains(Term::Phon) {
        let q_phon = tape.concat_rows(&g.q_phon);
        let vals = column_values(tape, q_phon);
        let phon_labels: Vec<f64> = batch
            .iter()
            .flat_map(|t| std::iter::repeat_n(t.label(), t.phoneme_ids.len()))
            .collect();
        let l = bce(&vals, &phon_labels)?;
        terms.push((Term::Phon, column_loss(tape, q_phon, l)));
    }
    if cfg.terms.contains(Term::Ctc) {
        let mut parts = Vec::new();
        for t in batch.iter().filter(|t| t.match_flag) {
            let z = g.logits[&t.audio];
            let target = CtcTarget::new(t.phoneme_ids.clone(), blank)?;
            let l = ctc_loss_raw(tape.value(z), &target)?;
            parts.push(scalar_node(tape, z, l.loss, l.grad));
        }
        let v = mean_of(tape, &parts).unwrap_or_else(|| tape.leaf(Mat::zeros((1, 1))));
        terms.push((Term::Ctc, v));
    }
    if cfg.terms.contains(Term::Pcl) {
        let mut s = Vec::with_capacity(batch.len());
        for t in batch {
            let z = g.logits[&t.audio];
            let target = CtcTarget::new(t.phoneme_ids.clone(), blank)?;
            match viterbi_align_raw(tape.value(z), &target) {
                Ok(r) => {
                    let grad = confidence_grad(tape.value(z), &target, &r);
                    s.push(scalar_node(tape, z, r.confidence, grad));
                }
                Err(KwsError::InfeasibleTarget { .. }) if !t.match_flag => {
                    s.push(tape.leaf(Mat::zeros((1, 1))));
                }
                Err(e) => return Err(e),
            }
        }
        let s = tape.concat_rows(&s);
        let l = pcl_loss(&column_values(tape, s), &labels)?;
        terms.push((Term::Pcl, column_loss(tape, s, l)));
    }
    if cfg.terms.contains(Term::Ucl) {
        let matched: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].match_flag).collect();
        let mut parts = Vec::new();
        if cfg.ucl_group > 0 {
            for group in matched.chunks_exact(cfg.ucl_group) {
                let audio: Vec<Var> = group.iter().map(|&i| g.e_a[&batch[i].audio]).collect();
                let text: Vec<Var> = group.iter().map(|&i| g.e_t[i]).collect();
                let s = pooled_similarity_forward(tape, &audio, &text);
                let mask = Mat::from_shape_fn((group.len(), group.len()), |(v, r)| {
                    f64::from(u8::from(batch[group[v]].keyword == batch[group[r]].keyword))
                });
                let l = ucl_loss_raw(tape.value(s), &mask)?;
                parts.push(scalar_node(tape, s, l.value, l.grad));
            }
        }
        let v = mean_of(tape, &parts).unwrap_or_else(|| tape.leaf(Mat::zeros((1, 1))));
        terms.push((Term::Ucl, v));
    }
    if cfg.terms.contains(Term::Fa) {
        let l = fa_loss(&q_utt_vals, &labels, &cfg.fa)?;
        terms.push((Term::Fa, column_loss(tape, q_utt, l)));
    }
    Ok(terms)
}

/// Loss terms, total and parameter gradients for one batch of trials.
pub fn batch_loss(
    model: &Model,
    features: &FeatureBank,
    batch: &[&TrialPair],
    cfg: &ObjectiveConfig,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(KwsError::EmptyBatch);
    }
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let g = forward_batch(&mut tape, &bound, &model.config, features, batch)?;
    let terms = objective_terms(&mut tape, &g, batch, model.config.blank_id(), cfg)?;
    let mut values = TermValues::default();
    for &(t, v) in &terms {
        values.set(t, tape.scalar(v));
    }
    let vars: Vec<Var> = terms.iter().map(|&(_, v)| v).collect();
    let root = tape.sum_scalars(&vars);
    let grads = tape.backward(root);
    total_loss(values, [model.params.gradients(&bound, &grads)])
}

/// Term values only, without gradients.
pub fn batch_terms(
    model: &Model,
    features: &FeatureBank,
    batch: &[&TrialPair],
    cfg: &ObjectiveConfig,
) -> Result<TermValues> {
    if batch.is_empty() {
        return Err(KwsError::EmptyBatch);
    }
    let mut tape = Tape::no_grad();
    let bound = model.params.bind(&mut tape);
    let g = forward_batch(&mut tape, &bound, &model.config, features, batch)?;
    let terms = objective_terms(&mut tape, &g, batch, model.config.blank_id(), cfg)?;
    let mut values = TermValues::default();
    for (t, v) in terms {
        values.set(t, tape.scalar(v));
    }
    Ok(values)
}

/// Total objective without gradients (finite-difference probes).
pub fn batch_loss_value(
    model: &Model,
    features: &FeatureBank,
    batch: &[&TrialPair],
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    Ok(batch_terms(model, features, batch, cfg)?.total())
}

/// Per-pair inference output, kept for figures.
#[derive(Clone, Debug, PartialEq)]
pub struct Inspection {
    pub audio: AudioEmbedding,
    pub logits: CtcLogits,
    pub text: PhonemeQuery,
    pub joint: JointRepresentation,
    pub output: MatchOutput,
}

impl Inspection {
    /// Viterbi alignment of the keyword's phonemes against the CTC logits.
    pub fn alignment(&self) -> Result<AlignmentResult> {
        let target = CtcTarget::new(self.text.phoneme_ids.clone(), self.logits.blank_id())?;
        viterbi_align_raw(&self.logits.z, &target)
    }
}

/// Scores audio/keyword pairs, caching embeddings across calls.
pub struct Scorer<'a> {
    model: &'a Model,
    audio: HashMap<String, (AudioEmbedding, CtcLogits)>,
    text: HashMap<Vec<usize>, PhonemeQuery>,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self { model, audio: HashMap::new(), text: HashMap::new() }
    }

    fn audio(&mut self, id: &str, frames: &Mat) -> Result<&(AudioEmbedding, CtcLogits)> {
        if !self.audio.contains_key(id) {
            let mut tape = Tape::no_grad();
            let bound = self.model.params.bind(&mut tape);
            let out = audio_forward(&mut tape, &bound, &self.model.config, frames)?;
            let entry = (
                AudioEmbedding { e_a: tape.value(out.e_a).clone() },
                CtcLogits { z: tape.value(out.logits).clone() },
            );
            self.audio.insert(id.to_string(), entry);
        }
        Ok(&self.audio[id])
    }

    fn text(&mut self, ids: &[usize]) -> Result<&PhonemeQuery> {
        if !self.text.contains_key(ids) {
            let mut tape = Tape::no_grad();
            let bound = self.model.params.bind(&mut tape);
            let e_t = text_forward(&mut tape, &bound, &self.model.config, ids)?;
            let q = PhonemeQuery { phoneme_ids: ids.to_vec(), e_t: tape.value(e_t).clone() };
            self.text.insert(ids.to_vec(), q);
        }
        Ok(&self.text[ids])
    }

    /// Full forward for one pair; `audio_id` keys the embedding cache.
    pub fn inspect(&mut self, audio_id: &str, frames: &Mat, phoneme_ids: &[usize]) -> Result<Inspection> {
        let (audio, logits) = self.audio(audio_id, frames)?.clone();
        let text = self.text(phoneme_ids)?.clone();
        let mut tape = Tape::no_grad();
        let bound = self.model.params.bind(&mut tape);
        let (t, a) = (tape.leaf(text.e_t.clone()), tape.leaf(audio.e_a.clone()));
        let (joint, attn) = attend_forward(&mut tape, &bound, t, a);
        let out = discriminate_forward(&mut tape, &bound, joint);
        let joint = JointRepresentation {
            e_joint: tape.value(joint).clone(),
            attn: tape.value(attn).clone(),
        };
        let output = MatchOutput {
            q_utt: tape.scalar(out.q_utt),
            q_phon: column_values(&tape, out.q_phon),
        };
        Ok(Inspection { audio, logits, text, joint, output })
    }

    pub fn score(&mut self, audio_id: &str, frames: &Mat, phoneme_ids: &[usize]) -> Result<f64> {
        Ok(self.inspect(audio_id, frames, phoneme_ids)?.output.q_utt)
    }

    /// `q_utt` for every trial.
    pub fn score_trials(&mut self, features: &FeatureBank, trials: &[TrialPair]) -> Result<Vec<f64>> {
        trials
            .iter()
            .map(|t| self.score(&t.audio, features.get(&t.audio)?, &t.phoneme_ids))
            .collect()
    }
}
