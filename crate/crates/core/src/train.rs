//! Minibatch SGD training, model checkpoints, decoding and the model-level
//! gradient check.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::crf::CrfParams;
use crate::data::{evaluate, prune_long_entities, read_conll_blocks, Corpus, EvalReport};
use crate::encoder::{Encoder, EncoderConfig, EncoderParams, Mode, Vocabulary, UNK};
use crate::gradcheck::{self, BlockReport};
use crate::hscrf::{BaselineScrf, Hscrf, DEFAULT_MAX_SEGMENT_LEN, DEFAULT_POSITION_DIM};
use crate::joint::{JointDecodeTrace, JointModel};
use crate::labels::{
    labels_from_segmentation, segmentation_from_labels, EntityLabelSet, SegLabel, Segment, Segmentation, Sentence,
    WordTagSequence,
};
use crate::math::{Matrix, Params};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Crf,
    Hscrf,
    ScrfBaseline,
    Joint,
}

impl Variant {
    pub fn is_semi_markov(self) -> bool {
        !matches!(self, Variant::Crf)
    }

    pub fn default_decode_mode(self) -> DecodeMode {
        match self {
            Variant::Crf => DecodeMode::Crf,
            Variant::Hscrf | Variant::ScrfBaseline => DecodeMode::Hscrf,
            Variant::Joint => DecodeMode::Joint,
        }
    }

    pub fn supports(self, mode: DecodeMode) -> bool {
        match self {
            Variant::Crf => mode == DecodeMode::Crf,
            Variant::Hscrf | Variant::ScrfBaseline => mode == DecodeMode::Hscrf,
            Variant::Joint => true,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Crf => "crf",
            Variant::Hscrf => "hscrf",
            Variant::ScrfBaseline => "scrf-baseline",
            Variant::Joint => "joint",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crf" => Ok(Variant::Crf),
            "hscrf" => Ok(Variant::Hscrf),
            "scrf-baseline" => Ok(Variant::ScrfBaseline),
            "joint" => Ok(Variant::Joint),
            _ => Err(Error::Usage(format!(
                "unknown variant {s:?} (expected crf, hscrf, scrf-baseline or joint)"
            ))),
        }
    }
}

/// Which output layer produces predictions. `Hscrf` means the semi-Markov
/// layer, whichever scorer it uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Crf,
    Hscrf,
    Joint,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Crf => "crf",
            DecodeMode::Hscrf => "hscrf",
            DecodeMode::Joint => "joint",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crf" => Ok(DecodeMode::Crf),
            "hscrf" => Ok(DecodeMode::Hscrf),
            "joint" => Ok(DecodeMode::Joint),
            _ => Err(Error::Usage(format!(
                "unknown decode mode {s:?} (expected crf, hscrf or joint)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Maximum global gradient norm per batch.
    pub gradient_clip: f64,
    /// `lr_t = lr_0 / (1 + decay_rate * t)` with `t` completed epochs.
    pub decay_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    /// `None` picks the variant's natural mode.
    pub decode_mode: Option<DecodeMode>,
    pub max_segment_len: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub use_recurrent_layer: bool,
    pub dropout_rate: f64,
    pub position_dim: usize,
    /// Half-width of the uniform initialization of output-layer weights.
    pub init_scale: f64,
    pub min_count: usize,
    /// Probability of replacing a training-set singleton by the unknown
    /// word during training, so the unknown-word row gets trained.
    pub unk_rate: f64,
    pub embeddings: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 10,
            gradient_clip: 5.0,
            decay_rate: 0.05,
            epochs: 50,
            seed: 0,
            variant: Variant::Joint,
            decode_mode: None,
            max_segment_len: DEFAULT_MAX_SEGMENT_LEN,
            embedding_dim: 100,
            hidden_dim: 300,
            use_recurrent_layer: true,
            dropout_rate: 0.5,
            position_dim: DEFAULT_POSITION_DIM,
            init_scale: 0.1,
            min_count: 1,
            unk_rate: 0.5,
            embeddings: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "learning_rate",
        "batch_size",
        "gradient_clip",
        "decay_rate",
        "epochs",
        "seed",
        "variant",
        "decode_mode",
        "max_segment_len",
        "embedding_dim",
        "hidden_dim",
        "use_recurrent_layer",
        "dropout_rate",
        "position_dim",
        "init_scale",
        "min_count",
        "unk_rate",
        "embeddings",
    ];

    pub fn decode_mode(&self) -> DecodeMode {
        self.decode_mode.unwrap_or_else(|| self.variant.default_decode_mode())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate / (1.0 + self.decay_rate * epoch as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("gradient_clip", self.gradient_clip),
            ("init_scale", self.init_scale),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Usage(format!("{k} must be positive, got {v}")));
            }
        }
        if !(self.decay_rate >= 0.0) {
            return Err(Error::Usage(format!("decay_rate must be non-negative, got {}", self.decay_rate)));
        }
        if self.max_segment_len < 1 {
            return Err(Error::Usage("max_segment_len must be at least 1".into()));
        }
        for (k, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
            ("position_dim", self.position_dim),
        ] {
            if v == 0 {
                return Err(Error::Usage(format!("{k} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.unk_rate) {
            return Err(Error::Usage(format!("unk_rate {} outside [0, 1]", self.unk_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Usage(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        let mode = self.decode_mode();
        if !self.variant.supports(mode) {
            return Err(Error::Usage(format!(
                "decode mode {mode} is not available for the {} variant",
                self.variant
            )));
        }
        Ok(())
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "gradient_clip" => self.gradient_clip = parse_value(key, value)?,
            "decay_rate" => self.decay_rate = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "variant" => self.variant = value.parse()?,
            "decode_mode" => {
                self.decode_mode = match value {
                    "" | "default" => None,
                    v => Some(v.parse()?),
                }
            }
            "max_segment_len" => self.max_segment_len = parse_value(key, value)?,
            "embedding_dim" => self.embedding_dim = parse_value(key, value)?,
            "hidden_dim" => self.hidden_dim = parse_value(key, value)?,
            "use_recurrent_layer" => self.use_recurrent_layer = parse_value(key, value)?,
            "dropout_rate" => self.dropout_rate = parse_value(key, value)?,
            "position_dim" => self.position_dim = parse_value(key, value)?,
            "init_scale" => self.init_scale = parse_value(key, value)?,
            "min_count" => self.min_count = parse_value(key, value)?,
            "unk_rate" => self.unk_rate = parse_value(key, value)?,
            "embeddings" => self.embeddings = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(Error::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are ignored.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Usage(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_kv(&fs::read_to_string(path)?)
    }

    pub fn to_kv(&self) -> String {
        let mode = self.decode_mode.map(|m| m.to_string()).unwrap_or_else(|| "default".into());
        let emb = self
            .embeddings
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let values = [
            self.learning_rate.to_string(),
            self.batch_size.to_string(),
            self.gradient_clip.to_string(),
            self.decay_rate.to_string(),
            self.epochs.to_string(),
            self.seed.to_string(),
            self.variant.to_string(),
            mode,
            self.max_segment_len.to_string(),
            self.embedding_dim.to_string(),
            self.hidden_dim.to_string(),
            self.use_recurrent_layer.to_string(),
            self.dropout_rate.to_string(),
            self.position_dim.to_string(),
            self.init_scale.to_string(),
            self.min_count.to_string(),
            self.unk_rate.to_string(),
            emb,
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            embedding_dim: self.embedding_dim,
            hidden_dim: self.hidden_dim,
            use_recurrent_layer: self.use_recurrent_layer,
            dropout_rate: self.dropout_rate,
            seed: self.seed,
        }
    }
}

/// Output layers of a model.
#[derive(Debug, Clone, PartialEq)]
pub enum Heads {
    Crf(CrfParams),
    Hscrf(Hscrf),
    Baseline(BaselineScrf),
    Joint(JointModel),
}

impl Params for Heads {
    fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            Heads::Crf(p) => p.blocks(),
            Heads::Hscrf(p) => p.blocks(),
            Heads::Baseline(p) => p.blocks(),
            Heads::Joint(p) => p.blocks(),
        }
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        match self {
            Heads::Crf(p) => p.blocks_mut(),
            Heads::Hscrf(p) => p.blocks_mut(),
            Heads::Baseline(p) => p.blocks_mut(),
            Heads::Joint(p) => p.blocks_mut(),
        }
    }
}

impl Heads {
    fn new<R: Rng>(config: &TrainConfig, labels: &EntityLabelSet, dim: usize, random: bool, rng: &mut R) -> Self {
        let (t, l, p, s) = (labels.num_types(), config.max_segment_len, config.position_dim, config.init_scale);
        let crf = |rng: &mut R| {
            if random {
                CrfParams::random(labels, dim, s, rng)
            } else {
                CrfParams::zeros(labels, dim)
            }
        };
        let hscrf = |rng: &mut R| {
            if random {
                Hscrf::hybrid_random(t, dim, l, p, s, rng)
            } else {
                Hscrf::hybrid_zeros(t, dim, l, p)
            }
        };
        match config.variant {
            Variant::Crf => Heads::Crf(crf(rng)),
            Variant::Hscrf => Heads::Hscrf(hscrf(rng)),
            Variant::ScrfBaseline => Heads::Baseline(if random {
                BaselineScrf::baseline_random(t, dim, l, p, s, rng)
            } else {
                BaselineScrf::baseline_zeros(t, dim, l, p)
            }),
            Variant::Joint => Heads::Joint(JointModel {
                crf: crf(rng),
                hscrf: hscrf(rng),
            }),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Heads::Crf(p) => Heads::Crf(p.zeros_like()),
            Heads::Hscrf(p) => Heads::Hscrf(p.zeros_like()),
            Heads::Baseline(p) => Heads::Baseline(p.zeros_like()),
            Heads::Joint(p) => Heads::Joint(p.zeros_like()),
        }
    }

    pub fn loss(&self, w: &Matrix, y: &WordTagSequence, s: &Segmentation) -> Result<f64> {
        match self {
            Heads::Crf(p) => p.nll(w, y),
            Heads::Hscrf(p) => p.nll(w, s),
            Heads::Baseline(p) => p.nll(w, s),
            Heads::Joint(p) => p.loss(w, y, s),
        }
    }

    /// Loss and `dL/dw`, adding parameter gradients into `grads`, which must
    /// have come from [`Heads::zeros_like`] on `self`.
    pub fn loss_backward(
        &self,
        w: &Matrix,
        y: &WordTagSequence,
        s: &Segmentation,
        grads: &mut Heads,
    ) -> Result<(f64, Matrix)> {
        match (self, grads) {
            (Heads::Crf(p), Heads::Crf(g)) => p.nll_backward(w, y, g),
            (Heads::Hscrf(p), Heads::Hscrf(g)) => p.nll_backward(w, s, g),
            (Heads::Baseline(p), Heads::Baseline(g)) => p.nll_backward(w, s, g),
            (Heads::Joint(p), Heads::Joint(g)) => p.loss_backward(w, y, s, g),
            _ => Err(Error::Usage("gradient buffer does not match the model heads".into())),
        }
    }

    pub fn decode(&self, w: &Matrix, mode: DecodeMode) -> Result<(Segmentation, Option<JointDecodeTrace>)> {
        let from_crf = |p: &CrfParams| {
            let (y, _) = p.viterbi(w);
            segmentation_from_labels(&y).expect("constrained CRF decoding yields legal sequences")
        };
        Ok(match (self, mode) {
            (Heads::Crf(p), DecodeMode::Crf) => (from_crf(p), None),
            (Heads::Hscrf(p), DecodeMode::Hscrf) => (p.viterbi(w).0, None),
            (Heads::Baseline(p), DecodeMode::Hscrf) => (p.viterbi(w).0, None),
            (Heads::Joint(p), DecodeMode::Crf) => (from_crf(&p.crf), None),
            (Heads::Joint(p), DecodeMode::Hscrf) => (p.hscrf.viterbi(w).0, None),
            (Heads::Joint(p), DecodeMode::Joint) => {
                let t = p.decode(w);
                (t.output(), Some(t))
            }
            _ => return Err(Error::Usage(format!("decode mode {mode} does not match the model heads"))),
        })
    }
}

/// Gradient buffer for a [`Model`], block-aligned with it.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub encoder: EncoderParams,
    pub heads: Heads,
}

impl Params for Gradients {
    fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        let mut v = self.encoder.blocks();
        v.extend(self.heads.blocks());
        v
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut v = self.encoder.blocks_mut();
        v.extend(self.heads.blocks_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub labels: EntityLabelSet,
    pub vocab: Vocabulary,
    pub encoder: Encoder,
    pub heads: Heads,
}

impl Params for Model {
    fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        let mut v = self.encoder.params.blocks();
        v.extend(self.heads.blocks());
        v
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut v = self.encoder.params.blocks_mut();
        v.extend(self.heads.blocks_mut());
        v
    }
}

impl Model {
    /// Randomly initialized model.
    pub fn new(config: TrainConfig, labels: EntityLabelSet, vocab: Vocabulary) -> Result<Self> {
        Self::build(config, labels, vocab, true)
    }

    /// All-zero parameters, with illegal CRF transitions still pinned.
    pub fn zeros(config: TrainConfig, labels: EntityLabelSet, vocab: Vocabulary) -> Result<Self> {
        Self::build(config, labels, vocab, false)
    }

    fn build(config: TrainConfig, labels: EntityLabelSet, vocab: Vocabulary, random: bool) -> Result<Self> {
        config.validate()?;
        let enc_config = config.encoder_config(vocab.len());
        let encoder = if random {
            Encoder::new(enc_config)?
        } else {
            Encoder::zeros(enc_config)?
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let heads = Heads::new(&config, &labels, encoder.output_dim(), random, &mut rng);
        Ok(Self {
            config,
            labels,
            vocab,
            encoder,
            heads,
        })
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            encoder: self.encoder.params.zeros_like(),
            heads: self.heads.zeros_like(),
        }
    }

    pub fn loss(&self, sentence: &Sentence, gold: &Segmentation) -> Result<f64> {
        let y = labels_from_segmentation(gold, sentence.len())?;
        let out = self.encoder.encode(&self.vocab.ids(sentence), Mode::Eval);
        self.heads.loss(&out.w, &y, gold)
    }

    /// Adds the gradient of one sentence's loss into `grads`.
    pub fn loss_backward(
        &self,
        sentence: &Sentence,
        gold: &Segmentation,
        mode: Mode<'_>,
        grads: &mut Gradients,
    ) -> Result<f64> {
        self.loss_backward_ids(&self.vocab.ids(sentence), gold, mode, grads)
    }

    /// Like [`Model::loss_backward`] on already-mapped word ids.
    pub fn loss_backward_ids(
        &self,
        ids: &[usize],
        gold: &Segmentation,
        mode: Mode<'_>,
        grads: &mut Gradients,
    ) -> Result<f64> {
        let y = labels_from_segmentation(gold, ids.len())?;
        let out = self.encoder.encode(ids, mode);
        let (loss, gw) = self.heads.loss_backward(&out.w, &y, gold, &mut grads.heads)?;
        self.encoder.accumulate_backward(&out, &gw, &mut grads.encoder)?;
        Ok(loss)
    }

    pub fn decode(&self, sentence: &Sentence, mode: DecodeMode) -> Result<(Segmentation, Option<JointDecodeTrace>)> {
        let out = self.encoder.encode(&self.vocab.ids(sentence), Mode::Eval);
        self.heads.decode(&out.w, mode)
    }

    pub fn predict(&self, corpus: &Corpus, mode: DecodeMode) -> Result<Vec<Segmentation>> {
        corpus
            .sentences
            .iter()
            .map(|s| self.decode(&s.sentence, mode).map(|(seg, _)| seg))
            .collect()
    }

    pub fn evaluate(&self, corpus: &Corpus, mode: DecodeMode) -> Result<EvalReport> {
        if corpus.labels != self.labels {
            return Err(Error::Usage("corpus entity types differ from the model's".into()));
        }
        evaluate(corpus, &self.predict(corpus, mode)?)
    }
}

/// Scales `grads` to have global norm at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<P: Params>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, m) in grads.blocks_mut() {
            m.scale(s);
        }
    }
    norm
}

/// `params -= lr * grads`, block by block.
pub fn sgd_step<P: Params, G: Params>(params: &mut P, grads: &G, lr: f64) {
    for ((_, p), (_, g)) in params.blocks_mut().into_iter().zip(grads.blocks()) {
        p.axpy(-lr, g);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub dev_f1: Option<f64>,
    pub best: bool,
}

impl EpochRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain record")
    }
}

pub struct TrainOutcome {
    /// The model with the best dev F1, or the final model without dev data.
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub pruned: usize,
    pub best_epoch: usize,
}

/// Trains a fresh model on `train`, selecting on `dev` F1 when given.
pub fn train(config: &TrainConfig, train: &Corpus, dev: Option<&Corpus>) -> Result<TrainOutcome> {
    train_with(config, train, dev, |_, _| {})
}

/// Like [`train`], calling `on_epoch` after every epoch with the record and
/// the current model.
pub fn train_with(
    config: &TrainConfig,
    train: &Corpus,
    dev: Option<&Corpus>,
    mut on_epoch: impl FnMut(&EpochRecord, &Model),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Usage("training corpus is empty".into()));
    }
    let (train, pruned) = if config.variant.is_semi_markov() {
        let (c, dropped) = prune_long_entities(train, config.max_segment_len)?;
        if dropped > 0 {
            log::info!(
                "pruned {dropped} of {} training sentences with entities longer than {}",
                train.len(),
                config.max_segment_len
            );
        }
        (c, dropped)
    } else {
        (train.clone(), 0)
    };
    if train.is_empty() {
        return Err(Error::Usage("no training sentences left after pruning".into()));
    }
    let vocab = Vocabulary::build(train.sentences.iter().map(|s| &s.sentence), config.min_count);
    let mut model = Model::new(config.clone(), train.labels.clone(), vocab)?;
    if let Some(path) = &config.embeddings {
        let n = model.encoder.load_pretrained_embeddings(&model.vocab, path)?;
        log::info!("loaded {n} pretrained embedding rows");
    }
    let mut singleton = vec![false; model.vocab.len()];
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for s in &train.sentences {
        for id in model.vocab.ids(&s.sentence) {
            *counts.entry(id).or_default() += 1;
        }
    }
    for (id, c) in counts {
        singleton[id] = c == 1 && id != UNK;
    }
    let mode = config.decode_mode();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grads = model.zero_gradients();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Model, usize)> = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads.zero_grad();
            for &i in batch {
                let s = &train.sentences[i];
                let mut ids = model.vocab.ids(&s.sentence);
                for id in &mut ids {
                    if singleton[*id] && rng.gen_bool(config.unk_rate) {
                        *id = UNK;
                    }
                }
                total += model.loss_backward_ids(&ids, &s.gold, Mode::Train(&mut rng), &mut grads)?;
            }
            clip_global_norm(&mut grads, config.gradient_clip);
            sgd_step(&mut model, &grads, lr);
        }
        let dev_f1 = dev.map(|d| model.evaluate(d, mode)).transpose()?.map(|r| r.f1);
        let improved = match (&best, dev_f1) {
            (None, _) => true,
            (Some((b, _, _)), Some(f)) => f > *b,
            (Some(_), None) => true,
        };
        if improved {
            best = Some((dev_f1.unwrap_or(0.0), model.clone(), epoch + 1));
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            learning_rate: lr,
            train_loss: total,
            dev_f1,
            best: improved,
        };
        log::info!(
            "epoch {} loss {:.4} dev f1 {} ({:.1}s)",
            record.epoch,
            record.train_loss,
            dev_f1.map(|f| format!("{f:.4}")).unwrap_or_else(|| "-".into()),
            started.elapsed().as_secs_f64()
        );
        on_epoch(&record, &model);
        log.push(record);
    }
    let (_, model, best_epoch) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        log,
        pruned,
        best_epoch,
    })
}

const MAGIC: &[u8; 8] = b"HSCRFCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {n}")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn strings(&mut self) -> Result<Vec<String>> {
        (0..self.len()?).map(|_| self.string()).collect()
    }
}

impl Model {
    /// Serializes config, entity types, vocabulary and every parameter
    /// block with its shape.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_str(&mut out, &self.config.to_kv());
        put_u64(&mut out, self.labels.num_types() as u64);
        for t in self.labels.types() {
            put_str(&mut out, t);
        }
        put_u64(&mut out, self.vocab.len() as u64);
        for w in self.vocab.words() {
            put_str(&mut out, w);
        }
        let blocks = self.blocks();
        put_u64(&mut out, blocks.len() as u64);
        for (name, m) in blocks {
            put_str(&mut out, name);
            put_u64(&mut out, m.rows() as u64);
            put_u64(&mut out, m.cols() as u64);
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a model checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let config = TrainConfig::from_kv(&r.string()?)?;
        let labels = EntityLabelSet::new(r.strings()?)?;
        let words = r.strings()?;
        if words.is_empty() {
            return Err(Error::Checkpoint("checkpoint has no vocabulary".into()));
        }
        let vocab = Vocabulary::from_words(&words[1..]);
        if vocab.words() != words.as_slice() {
            return Err(Error::Checkpoint("malformed vocabulary".into()));
        }
        let mut model = Model::zeros(config, labels, vocab)?;
        let count = r.len()?;
        let expected = model.blocks().len();
        if count != expected {
            return Err(Error::Checkpoint(format!("expected {expected} parameter blocks, found {count}")));
        }
        for (name, m) in model.blocks_mut() {
            let stored = r.string()?;
            if stored != name {
                return Err(Error::Checkpoint(format!("expected block {name}, found {stored}")));
            }
            let shape = (r.len()?, r.len()?);
            if shape != m.shape() {
                return Err(Error::Checkpoint(format!(
                    "block {name} has shape {shape:?}, expected {:?}",
                    m.shape()
                )));
            }
            let raw = r.take(shape.0 * shape.1 * 8)?;
            for (dst, chunk) in m.as_mut_slice().iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

pub struct DecodedFile {
    /// The input lines with a predicted BIOES column appended.
    pub conll: String,
    pub predictions: Vec<Segmentation>,
    /// One per sentence in joint mode, empty otherwise.
    pub traces: Vec<JointDecodeTrace>,
}

/// Decodes every sentence of a CoNLL file, appending the predicted tags as
/// a new last column.
pub fn decode_conll(model: &Model, path: &Path, mode: DecodeMode) -> Result<DecodedFile> {
    if !model.config.variant.supports(mode) {
        return Err(Error::Usage(format!(
            "decode mode {mode} is not available for a {} model",
            model.config.variant
        )));
    }
    let mut conll = String::new();
    let mut predictions = Vec::new();
    let mut traces = Vec::new();
    for block in read_conll_blocks(path, 0)? {
        let Some(tokens) = block.tokens else {
            for l in &block.lines {
                conll.push_str(l);
                conll.push('\n');
            }
            continue;
        };
        let sentence = Sentence::new(tokens)?;
        let (seg, trace) = model.decode(&sentence, mode)?;
        let tags = labels_from_segmentation(&seg, sentence.len())?.names(&model.labels);
        for (line, tag) in block.lines.iter().zip(tags) {
            conll.push_str(line);
            conll.push(' ');
            conll.push_str(&tag);
            conll.push('\n');
        }
        predictions.push(seg);
        traces.extend(trace);
    }
    Ok(DecodedFile {
        conll,
        predictions,
        traces,
    })
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Start from all-zero parameters.
    pub zero_init: bool,
    /// Adds a constant to the analytic gradient of the named block, to
    /// exercise the failure path.
    pub corrupt_block: Option<String>,
}

/// Finite-difference check of a whole model (encoder and output layers)
/// built from `config` with its dimensions shrunk to at most 8.
pub fn gradcheck(config: &TrainConfig, options: &GradcheckOptions) -> Result<Vec<BlockReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let small = TrainConfig {
        embedding_dim: config.embedding_dim.min(rng.gen_range(2..=8)),
        hidden_dim: config.hidden_dim.min(rng.gen_range(1..=4)),
        position_dim: config.position_dim.min(rng.gen_range(1..=4)),
        max_segment_len: config.max_segment_len.min(3),
        dropout_rate: 0.0,
        init_scale: 0.5,
        seed: options.seed,
        decode_mode: None,
        ..config.clone()
    };
    let labels = EntityLabelSet::new(["A", "B"])?;
    let vocab = Vocabulary::from_words((0..6).map(|i| format!("w{i}")));
    let mut model = if options.zero_init {
        Model::zeros(small, labels, vocab)?
    } else {
        Model::new(small, labels, vocab)?
    };
    let n = rng.gen_range(2..=6);
    let sentence = Sentence::new((0..n).map(|_| format!("w{}", rng.gen_range(0..7))))?;
    let mut segs = Vec::new();
    let mut b = 1;
    while b <= n {
        let len = rng.gen_range(1..=model.config.max_segment_len.min(n - b + 1));
        let label = if rng.gen_bool(0.5) {
            SegLabel::Entity(rng.gen_range(0..2))
        } else {
            SegLabel::Outside
        };
        let len = if label.is_entity() { len } else { 1 };
        segs.push(Segment::new(b, b + len - 1, label));
        b += len;
    }
    let gold = Segmentation::new(segs, n)?;

    let mut grads = model.zero_gradients();
    model.loss_backward(&sentence, &gold, Mode::Eval, &mut grads)?;
    if let Some(target) = &options.corrupt_block {
        let mut found = false;
        for (name, m) in grads.blocks_mut() {
            if name == target {
                m.as_mut_slice().iter_mut().for_each(|v| *v += 0.1);
                found = true;
            }
        }
        if !found {
            return Err(Error::Usage(format!("no parameter block named {target}")));
        }
    }
    Ok(gradcheck::check(
        &mut model,
        &grads,
        |m| m.loss(&sentence, &gold).expect("gold fits the model"),
        gradcheck::DEFAULT_STEP,
        gradcheck::DEFAULT_TOLERANCE,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate_at(0), 0.01);
        assert!((c.learning_rate_at(20) - 0.005).abs() < 1e-15);
        for t in 0..100 {
            assert!(c.learning_rate_at(t + 1) < c.learning_rate_at(t));
        }
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut g = crate::gradcheck::Input(Matrix::from_rows(&[vec![6.0, 8.0]]));
        let norm = clip_global_norm(&mut g, 5.0);
        assert_eq!(norm, 10.0);
        assert_eq!(g.0.as_slice(), &[3.0, 4.0]);
        let norm = clip_global_norm(&mut g, 5.0);
        assert_eq!(norm, 5.0);
        assert_eq!(g.0.as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn config_kv_round_trip() {
        let c = TrainConfig {
            learning_rate: 0.02,
            variant: Variant::ScrfBaseline,
            decode_mode: Some(DecodeMode::Hscrf),
            embeddings: Some(PathBuf::from("vectors.txt")),
            use_recurrent_layer: false,
            unk_rate: 0.25,
            ..Default::default()
        };
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
        assert_eq!(TrainConfig::from_kv(&TrainConfig::default().to_kv()).unwrap(), TrainConfig::default());
        let c = TrainConfig::from_kv("# comment\nepochs = 3\n\nvariant = crf # inline\n").unwrap();
        assert_eq!((c.epochs, c.variant), (3, Variant::Crf));
        assert!(TrainConfig::from_kv("nope = 1").is_err());
        assert!(TrainConfig::from_kv("epochs = many").is_err());
        assert!(TrainConfig::from_kv("epochs").is_err());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { max_segment_len: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { dropout_rate: 1.0, ..Default::default() },
            TrainConfig { unk_rate: 1.5, ..Default::default() },
            TrainConfig { variant: Variant::Crf, decode_mode: Some(DecodeMode::Joint), ..Default::default() },
            TrainConfig { variant: Variant::Hscrf, decode_mode: Some(DecodeMode::Crf), ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Usage(_))), "{c:?}");
        }
        for mode in [DecodeMode::Crf, DecodeMode::Hscrf, DecodeMode::Joint] {
            assert!(Variant::Joint.supports(mode));
        }
        for v in ["crf", "hscrf", "scrf-baseline", "joint"] {
            assert_eq!(v.parse::<Variant>().unwrap().to_string(), v);
        }
    }

    fn tiny(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            embedding_dim: 4,
            hidden_dim: 3,
            position_dim: 2,
            max_segment_len: 3,
            ..Default::default()
        }
    }

    #[test]
    fn gradcheck_passes_for_every_variant() {
        for v in [Variant::Crf, Variant::Hscrf, Variant::ScrfBaseline, Variant::Joint] {
            for seed in 0..3 {
                let options = GradcheckOptions { seed, ..Default::default() };
                for r in gradcheck(&tiny(v), &options).unwrap() {
                    assert!(r.passed, "{v} seed {seed}: {r}");
                }
            }
        }
    }

    #[test]
    fn corrupted_gradient_names_block() {
        let options = GradcheckOptions {
            corrupt_block: Some("hscrf.positions".into()),
            ..Default::default()
        };
        let reports = gradcheck(&tiny(Variant::Joint), &options).unwrap();
        let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        assert_eq!(failed, ["hscrf.positions"]);
        let options = GradcheckOptions {
            corrupt_block: Some("missing".into()),
            ..Default::default()
        };
        assert!(gradcheck(&tiny(Variant::Joint), &options).is_err());
    }

    #[test]
    fn zero_model_gradcheck_is_exact_where_constant() {
        let options = GradcheckOptions {
            zero_init: true,
            ..Default::default()
        };
        let reports = gradcheck(&tiny(Variant::Crf), &options).unwrap();
        for r in &reports {
            assert!(r.passed, "{r}");
        }
        // With every weight zero the loss does not depend on the embeddings.
        let emb = reports.iter().find(|r| r.name == "encoder.embedding").unwrap();
        assert_eq!(emb.relative_error, 0.0);
        assert_eq!(emb.max_abs_error, 0.0);
    }

    #[test]
    fn heads_reject_foreign_gradients() {
        let labels = EntityLabelSet::new(["A"]).unwrap();
        let vocab = Vocabulary::from_words(["x"]);
        let crf = Model::new(tiny(Variant::Crf), labels.clone(), vocab.clone()).unwrap();
        let hs = Model::new(tiny(Variant::Hscrf), labels, vocab).unwrap();
        let s = Sentence::new(["x"]).unwrap();
        let gold = Segmentation::outside(1);
        let mut g = hs.zero_gradients();
        assert!(crf.loss_backward(&s, &gold, Mode::Eval, &mut g).is_err());
        assert!(crf.decode(&s, DecodeMode::Hscrf).is_err());
    }
}
