//! Adam and the training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::{Corpus, TrialPair};
use crate::error::{KwsError, Result};
use crate::losses::{FaConfig, Term, TermSet, TermValues};
use crate::model::{batch_loss, batch_terms, FeatureBank, Model, ObjectiveConfig};
use crate::params::ParamSet;
use crate::seed::{rng_for, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub ucl_minibatch: usize,
    pub seed: u64,
    pub fa: FaConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 64,
            ucl_minibatch: 5,
            seed: 0,
            fa: FaConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(KwsError::BadArgument("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.ucl_minibatch == 0 || self.ucl_minibatch > self.batch_size {
            return Err(KwsError::BadArgument(
                "need 0 < ucl_minibatch <= batch_size".into(),
            ));
        }
        self.fa.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let shape_ok = |s: &ParamSet| s.get(name).map(|g| g.dim()) == Some(p.dim());
        if !shape_ok(grads) || !shape_ok(&state.m) || !shape_ok(&state.v) {
            return Err(KwsError::ShapeMismatch(format!("adam: tensor {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked");
        let m = state.m.get_mut(name).expect("checked");
        m.zip_mut_with(g, |m, &g| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
        let v = state.v.get_mut(name).expect("checked");
        v.zip_mut_with(g, |v, &g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
        let m = state.m.get(name).expect("checked");
        let v = state.v.get(name).expect("checked");
        ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
            *p -= lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        });
    }
    Ok(())
}

/// Epoch-mean loss terms. Epoch 0 is the untrained model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub terms: TermValues,
    pub total: f64,
}

impl EpochLog {
    /// One JSON object with the active terms only, e.g.
    /// `{"epoch":1,"utt":0.69,...,"total":3.2}`.
    pub fn to_json(&self) -> String {
        let num = |x: f64| serde_json::Value::from(x).to_string();
        let mut fields = vec![format!("\"epoch\":{}", self.epoch)];
        fields.extend(self.terms.iter().map(|(t, v)| format!("\"{}\":{}", t.name(), num(v))));
        fields.push(format!("\"total\":{}", num(self.total)));
        format!("{{{}}}", fields.join(","))
    }

    pub fn from_json(line: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let obj = v
            .as_object()
            .ok_or_else(|| KwsError::BadArgument("log line is not an object".into()))?;
        let num = |k: &str| obj.get(k).and_then(|x| x.as_f64());
        let mut terms = TermValues::default();
        for t in Term::ALL {
            if let Some(x) = num(t.name()) {
                terms.set(t, x);
            }
        }
        Ok(Self {
            epoch: num("epoch").ok_or_else(|| KwsError::BadArgument("log line without epoch".into()))? as usize,
            terms,
            total: num("total").ok_or_else(|| KwsError::BadArgument("log line without total".into()))?,
        })
    }
}

fn mean_log(epoch: usize, terms: &TermSet, reports: &[(TermValues, f64)]) -> EpochLog {
    let n = reports.len().max(1) as f64;
    let mut mean = TermValues::default();
    for t in terms.iter() {
        mean.set(t, reports.iter().map(|(r, _)| r.get(t).unwrap_or(0.0)).sum::<f64>() / n);
    }
    EpochLog { epoch, terms: mean, total: reports.iter().fold(0.0, |acc, (_, x)| acc + x) / n }
}

pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Trains a fresh model (init stream of `config.seed`) on every trial of the
/// corpus. `on_epoch` sees each log entry as soon as it exists.
pub fn train(
    config: &TrainConfig,
    corpus: &Corpus,
    terms: TermSet,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Model::init(Model::default_config(), config.seed);
    let features = FeatureBank::from_corpus(corpus, model.config.n_mels)?;
    train_model(config, model, &features, &corpus.trials, terms, &mut on_epoch)
}

pub fn train_model(
    config: &TrainConfig,
    mut model: Model,
    features: &FeatureBank,
    trials: &[TrialPair],
    terms: TermSet,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if trials.is_empty() {
        return Err(KwsError::DataExhausted);
    }
    let objective = ObjectiveConfig { terms, fa: config.fa, ucl_group: config.ucl_minibatch };
    let mut state = AdamState::new(&model.params);
    let mut log = Vec::with_capacity(config.epochs + 1);
    let order = |epoch: usize| {
        let mut idx: Vec<usize> = (0..trials.len()).collect();
        idx.shuffle(&mut rng_for(config.seed, Stream::Shuffle, epoch as u64));
        idx
    };
    let batches = |idx: &[usize]| -> Vec<Vec<&TrialPair>> {
        idx.chunks(config.batch_size)
            .map(|c| c.iter().map(|&i| &trials[i]).collect())
            .collect()
    };

    if config.epochs > 0 {
        let mut reports = Vec::new();
        for batch in batches(&order(1)) {
            let values = batch_terms(&model, features, &batch, &objective)?;
            let total = values.total();
            reports.push((values, total));
        }
        let entry = mean_log(0, &terms, &reports);
        on_epoch(&entry);
        log.push(entry);
    }

    for epoch in 1..=config.epochs {
        let mut reports = Vec::new();
        for (b, batch) in batches(&order(epoch)).iter().enumerate() {
            let report = batch_loss(&model, features, batch, &objective).map_err(|e| match e {
                KwsError::NonFiniteTerm(t) => KwsError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("term {t} is not finite"),
                },
                other => other,
            })?;
            if !report.gradients.all_finite() {
                return Err(KwsError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: "gradient is not finite".into(),
                });
            }
            adam_step(&mut model.params, &report.gradients, &mut state, config.learning_rate, AdamConfig::default())?;
            reports.push((report.terms(), report.l_total));
        }
        let entry = mean_log(epoch, &terms, &reports);
        on_epoch(&entry);
        log.push(entry);
    }

    let checkpoint = Checkpoint::new(
        &model.params,
        Some(CheckpointMeta { epoch: config.epochs, train_config: config.clone() }),
    );
    Ok(TrainOutcome { model, checkpoint, log })
}

/// Restores a model from a checkpoint written by [`train`].
pub fn model_from_checkpoint(c: &Checkpoint) -> Result<Model> {
    Model::from_params(Model::default_config(), c.tensors.clone())
        .map_err(|e| KwsError::BadCheckpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn one(name: &str, v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, array![[v]]);
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one("w", 0.7);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &one("w", 0.0), &mut s, 1e-3, AdamConfig::default()).unwrap();
        assert_eq!(p.get("w").unwrap()[[0, 0]], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02] {
            let mut p = one("w", 0.0);
            let mut s = AdamState::new(&p);
            adam_step(&mut p, &one("w", g), &mut s, 1e-3, AdamConfig::default()).unwrap();
            let moved = p.get("w").unwrap()[[0, 0]];
            assert!((moved + 1e-3 * f64::signum(g)).abs() < 1e-9, "{moved}");
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = one("w", 0.0);
        let mut s = AdamState::new(&p);
        assert!(matches!(
            adam_step(&mut p, &one("v", 1.0), &mut s, 1e-3, AdamConfig::default()),
            Err(KwsError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn config_validation_and_json() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { ucl_minibatch: 65, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "fa": {"alpha": 0.8}}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.fa.alpha, 0.8);
        assert_eq!(c.fa.gamma, 7.0);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn log_lines_list_active_terms() {
        let mut terms = TermValues::default();
        terms.set(Term::Utt, 0.5);
        terms.set(Term::Ctc, 1.5);
        let e = EpochLog { epoch: 2, terms, total: 2.0 };
        let line = e.to_json();
        assert_eq!(line, r#"{"epoch":2,"utt":0.5,"ctc":1.5,"total":2.0}"#);
        assert_eq!(EpochLog::from_json(&line).unwrap(), e);
    }
}
