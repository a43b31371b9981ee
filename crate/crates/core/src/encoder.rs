//! Word representations: a lowercased word embedding optionally followed by
//! a single bidirectional tanh recurrent layer. Dropout is applied to the
//! encoder output in training mode only.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::math::{axpy, dot, Matrix, Params};
use crate::{Error, Result, Sentence};

/// Id reserved for out-of-vocabulary words.
pub const UNK: usize = 0;
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercased word vocabulary with a reserved UNK row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut vocab = Self {
            words: vec![UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        vocab.index.insert(UNK_TOKEN.to_string(), UNK);
        for w in words {
            vocab.insert(w.as_ref());
        }
        vocab
    }

    /// Every word seen at least `min_count` times, in first-seen order.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a Sentence>, min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut order = Vec::new();
        for s in sentences {
            for t in &s.tokens {
                let key = t.to_lowercase();
                let c = counts.entry(key.clone()).or_insert(0);
                if *c == 0 {
                    order.push(key);
                }
                *c += 1;
            }
        }
        Self::from_words(order.into_iter().filter(|w| counts[w] >= min_count.max(1)))
    }

    fn insert(&mut self, word: &str) -> usize {
        let key = word.to_lowercase();
        if let Some(&id) = self.index.get(&key) {
            return id;
        }
        let id = self.words.len();
        self.words.push(key.clone());
        self.index.insert(key, id);
        id
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(&word.to_lowercase()).copied()
    }

    pub fn id(&self, word: &str) -> usize {
        self.get(word).unwrap_or(UNK)
    }

    pub fn ids(&self, sentence: &Sentence) -> Vec<usize> {
        sentence.tokens.iter().map(|t| self.id(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    /// Hidden size of each recurrent direction.
    pub hidden_dim: usize,
    pub use_recurrent_layer: bool,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embedding_dim: 100,
            hidden_dim: 300,
            use_recurrent_layer: true,
            dropout_rate: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embedding_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Usage("encoder dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Usage(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Width of the word representations.
    pub fn output_dim(&self) -> usize {
        if self.use_recurrent_layer {
            2 * self.hidden_dim
        } else {
            self.embedding_dim
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnParams {
    pub input: Matrix,
    pub recurrent: Matrix,
    pub bias: Matrix,
}

impl RnnParams {
    fn random<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (hidden as f64).sqrt();
        Self {
            input: Matrix::random(hidden, input_dim, scale, rng),
            recurrent: Matrix::random(hidden, hidden, scale, rng),
            bias: Matrix::zeros(1, hidden),
        }
    }

    fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            input: Matrix::zeros(hidden, input_dim),
            recurrent: Matrix::zeros(hidden, hidden),
            bias: Matrix::zeros(1, hidden),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            input: self.input.zeros_like(),
            recurrent: self.recurrent.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    fn step(&self, x: &[f64], prev: Option<&[f64]>, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut a = self.bias.get(0, i) + dot(self.input.row(i), x);
            if let Some(h) = prev {
                a += dot(self.recurrent.row(i), h);
            }
            *o = a.tanh();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub embedding: Matrix,
    pub forward: Option<RnnParams>,
    pub backward: Option<RnnParams>,
}

impl EncoderParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            embedding: self.embedding.zeros_like(),
            forward: self.forward.as_ref().map(RnnParams::zeros_like),
            backward: self.backward.as_ref().map(RnnParams::zeros_like),
        }
    }
}

impl Params for EncoderParams {
    fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        let mut v = vec![("encoder.embedding", &self.embedding)];
        if let Some(r) = &self.forward {
            v.push(("encoder.fwd.input", &r.input));
            v.push(("encoder.fwd.recurrent", &r.recurrent));
            v.push(("encoder.fwd.bias", &r.bias));
        }
        if let Some(r) = &self.backward {
            v.push(("encoder.bwd.input", &r.input));
            v.push(("encoder.bwd.recurrent", &r.recurrent));
            v.push(("encoder.bwd.bias", &r.bias));
        }
        v
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut v = vec![("encoder.embedding", &mut self.embedding)];
        if let Some(r) = &mut self.forward {
            v.push(("encoder.fwd.input", &mut r.input));
            v.push(("encoder.fwd.recurrent", &mut r.recurrent));
            v.push(("encoder.fwd.bias", &mut r.bias));
        }
        if let Some(r) = &mut self.backward {
            v.push(("encoder.bwd.input", &mut r.input));
            v.push(("encoder.bwd.recurrent", &mut r.recurrent));
            v.push(("encoder.bwd.bias", &mut r.bias));
        }
        v
    }
}

/// Whether dropout is active. Training mode carries the RNG that draws the
/// dropout mask.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

#[derive(Debug, Clone)]
struct EncoderCache {
    ids: Vec<usize>,
    hidden_fwd: Option<Matrix>,
    hidden_bwd: Option<Matrix>,
    /// Inverted-dropout multipliers, one per output entry.
    dropout: Option<Matrix>,
}

/// `n × d` word representations plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub w: Matrix,
    cache: Option<EncoderCache>,
}

impl EncoderOutput {
    /// Wraps a matrix that did not come from an encoder. Such outputs can be
    /// fed to the output layers but not back-propagated into an encoder.
    pub fn detached(w: Matrix) -> Self {
        Self { w, cache: None }
    }

    pub fn len(&self) -> usize {
        self.w.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.w.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let e = config.embedding_dim;
        let embedding = Matrix::random(config.vocab_size, e, (3.0 / e as f64).sqrt(), &mut rng);
        let (forward, backward) = if config.use_recurrent_layer {
            (
                Some(RnnParams::random(e, config.hidden_dim, &mut rng)),
                Some(RnnParams::random(e, config.hidden_dim, &mut rng)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            config,
            params: EncoderParams {
                embedding,
                forward,
                backward,
            },
        })
    }

    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let e = config.embedding_dim;
        let rnn = config
            .use_recurrent_layer
            .then(|| RnnParams::zeros(e, config.hidden_dim));
        Ok(Self {
            params: EncoderParams {
                embedding: Matrix::zeros(config.vocab_size, e),
                forward: rnn.clone(),
                backward: rnn,
            },
            config,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn encode(&self, ids: &[usize], mode: Mode<'_>) -> EncoderOutput {
        let n = ids.len();
        let e = self.config.embedding_dim;
        let mut x = Matrix::zeros(n, e);
        for (k, &id) in ids.iter().enumerate() {
            let id = if id < self.config.vocab_size { id } else { UNK };
            x.row_mut(k).copy_from_slice(self.params.embedding.row(id));
        }

        let (mut w, hidden_fwd, hidden_bwd) = match (&self.params.forward, &self.params.backward) {
            (Some(f), Some(b)) => {
                let h = self.config.hidden_dim;
                let mut hf = Matrix::zeros(n, h);
                let mut hb = Matrix::zeros(n, h);
                let mut buf = vec![0.0; h];
                for t in 0..n {
                    let prev = (t > 0).then(|| hf.row(t - 1).to_vec());
                    f.step(x.row(t), prev.as_deref(), &mut buf);
                    hf.row_mut(t).copy_from_slice(&buf);
                }
                for t in (0..n).rev() {
                    let prev = (t + 1 < n).then(|| hb.row(t + 1).to_vec());
                    b.step(x.row(t), prev.as_deref(), &mut buf);
                    hb.row_mut(t).copy_from_slice(&buf);
                }
                let mut w = Matrix::zeros(n, 2 * h);
                for t in 0..n {
                    w.row_mut(t)[..h].copy_from_slice(hf.row(t));
                    w.row_mut(t)[h..].copy_from_slice(hb.row(t));
                }
                (w, Some(hf), Some(hb))
            }
            _ => (x, None, None),
        };

        let p = self.config.dropout_rate;
        let dropout = match mode {
            Mode::Train(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mut mask = w.zeros_like();
                for m in mask.as_mut_slice() {
                    *m = if rng.gen::<f64>() < p { 0.0 } else { keep };
                }
                for (v, m) in w.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                    *v *= m;
                }
                Some(mask)
            }
            _ => None,
        };

        EncoderOutput {
            w,
            cache: Some(EncoderCache {
                ids: ids.to_vec(),
                hidden_fwd,
                hidden_bwd,
                dropout,
            }),
        }
    }

    /// Gradients of a scalar loss with respect to the encoder parameters.
    pub fn backward(&self, out: &EncoderOutput, grad_w: &Matrix) -> Result<EncoderParams> {
        let mut grads = self.params.zeros_like();
        self.accumulate_backward(out, grad_w, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Encoder::backward`] but adds into an existing gradient buffer.
    pub fn accumulate_backward(
        &self,
        out: &EncoderOutput,
        grad_w: &Matrix,
        grads: &mut EncoderParams,
    ) -> Result<()> {
        let cache = out
            .cache
            .as_ref()
            .ok_or_else(|| Error::Usage("encoder backward called without a forward pass".into()))?;
        if grad_w.shape() != out.w.shape() {
            return Err(Error::Usage(format!(
                "gradient shape {:?} does not match output shape {:?}",
                grad_w.shape(),
                out.w.shape()
            )));
        }
        let mut g = grad_w.clone();
        if let Some(mask) = &cache.dropout {
            for (v, m) in g.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *v *= m;
            }
        }
        let n = cache.ids.len();
        let vocab = self.config.vocab_size;
        let row_of = |id: usize| if id < vocab { id } else { UNK };

        match (
            &self.params.forward,
            &self.params.backward,
            &cache.hidden_fwd,
            &cache.hidden_bwd,
        ) {
            (Some(fp), Some(bp), Some(hf), Some(hb)) => {
                let h = self.config.hidden_dim;
                let e = self.config.embedding_dim;
                let mut dx = Matrix::zeros(n, e);
                let fg = grads.forward.as_mut().expect("gradient layout");
                bptt(fp, hf, &g, 0, (0..n).collect(), &self.params.embedding, &cache.ids, vocab, fg, &mut dx);
                let bg = grads.backward.as_mut().expect("gradient layout");
                bptt(bp, hb, &g, h, (0..n).rev().collect(), &self.params.embedding, &cache.ids, vocab, bg, &mut dx);
                for (k, &id) in cache.ids.iter().enumerate() {
                    axpy(grads.embedding.row_mut(row_of(id)), 1.0, dx.row(k));
                }
            }
            _ => {
                for (k, &id) in cache.ids.iter().enumerate() {
                    axpy(grads.embedding.row_mut(row_of(id)), 1.0, g.row(k));
                }
            }
        }
        Ok(())
    }

    /// Overwrites embedding rows of in-vocabulary words from a
    /// `word v1 ... vd` text file. Returns the number of rows written.
    pub fn load_pretrained_embeddings(&mut self, vocab: &Vocabulary, path: &Path) -> Result<usize> {
        let text = fs::read_to_string(path)?;
        let d = self.config.embedding_dim;
        let mut pending = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let values = fields
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("bad number: {e}"),
                })?;
            if values.len() != d {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected {d} values, found {}", values.len()),
                });
            }
            if let Some(id) = vocab.get(word).filter(|&id| id < self.config.vocab_size) {
                pending.push((id, values));
            }
        }
        // Validate the whole file before touching parameters.
        let mut rows = HashSet::new();
        for (id, values) in pending {
            self.params.embedding.row_mut(id).copy_from_slice(&values);
            rows.insert(id);
        }
        Ok(rows.len())
    }
}

/// Back-propagation through time for one direction. `order` is the order in
/// which the direction visited positions during the forward pass.
#[allow(clippy::too_many_arguments)]
fn bptt(
    params: &RnnParams,
    hidden: &Matrix,
    grad_out: &Matrix,
    offset: usize,
    order: Vec<usize>,
    embedding: &Matrix,
    ids: &[usize],
    vocab: usize,
    grads: &mut RnnParams,
    dx: &mut Matrix,
) {
    let h = params.bias.cols();
    let mut carry = vec![0.0; h];
    let mut da = vec![0.0; h];
    for step in (0..order.len()).rev() {
        let t = order[step];
        let ht = hidden.row(t);
        for i in 0..h {
            let dh = grad_out.get(t, offset + i) + carry[i];
            da[i] = dh * (1.0 - ht[i] * ht[i]);
        }
        let id = if ids[t] < vocab { ids[t] } else { UNK };
        let x = embedding.row(id);
        let prev = (step > 0).then(|| hidden.row(order[step - 1]));
        carry.iter_mut().for_each(|c| *c = 0.0);
        for i in 0..h {
            let a = da[i];
            if a == 0.0 {
                continue;
            }
            grads.bias.add_at(0, i, a);
            axpy(grads.input.row_mut(i), a, x);
            axpy(dx.row_mut(t), a, params.input.row(i));
            if let Some(p) = prev {
                axpy(grads.recurrent.row_mut(i), a, p);
                axpy(&mut carry, a, params.recurrent.row(i));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn config(recurrent: bool) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 7,
            embedding_dim: 3,
            hidden_dim: 2,
            use_recurrent_layer: recurrent,
            dropout_rate: 0.0,
            seed: 11,
        }
    }

    #[test]
    fn shapes() {
        for rec in [false, true] {
            let enc = Encoder::new(config(rec)).unwrap();
            let out = enc.encode(&[3], Mode::Eval);
            assert_eq!(out.w.shape(), (1, enc.output_dim()));
            assert!(out.w.all_finite());
        }
        assert_eq!(config(true).output_dim(), 4);
        assert_eq!(config(false).output_dim(), 3);
    }

    #[test]
    fn eval_is_deterministic() {
        let mut c = config(true);
        c.dropout_rate = 0.5;
        let enc = Encoder::new(c).unwrap();
        let a = enc.encode(&[1, 2, 3], Mode::Eval);
        let b = enc.encode(&[1, 2, 3], Mode::Eval);
        assert_eq!(a.w, b.w);
    }

    #[test]
    fn zero_embedding_passthrough() {
        let enc = Encoder::zeros(config(false)).unwrap();
        let out = enc.encode(&[1, 2], Mode::Eval);
        assert_eq!(out.w, Matrix::zeros(2, 3));
    }

    #[test]
    fn invalid_config() {
        let mut c = config(true);
        c.dropout_rate = 1.0;
        assert!(Encoder::new(c).is_err());
        let mut c = config(true);
        c.hidden_dim = 0;
        assert!(Encoder::new(c).is_err());
    }

    #[test]
    fn zero_upstream_gradient() {
        let enc = Encoder::new(config(true)).unwrap();
        let out = enc.encode(&[1, 4, 2], Mode::Eval);
        let g = enc.backward(&out, &out.w.zeros_like()).unwrap();
        assert_eq!(g.sq_norm(), 0.0);
    }

    #[test]
    fn embedding_gradient_is_row_sum() {
        let enc = Encoder::new(config(false)).unwrap();
        let ids = [2, 5, 2, 0];
        let out = enc.encode(&ids, Mode::Eval);
        let upstream = Matrix::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![0.5, 0.5, 0.5],
            vec![-1.0, 4.0, 0.0],
            vec![7.0, 7.0, 7.0],
        ]);
        let g = enc.backward(&out, &upstream).unwrap();
        assert_eq!(g.embedding.row(2), &[0.0, 6.0, 3.0]);
        assert_eq!(g.embedding.row(5), &[0.5, 0.5, 0.5]);
        assert_eq!(g.embedding.row(0), &[7.0, 7.0, 7.0]);
        assert_eq!(g.embedding.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_without_forward_is_usage_error() {
        let enc = Encoder::new(config(false)).unwrap();
        let out = EncoderOutput::detached(Matrix::zeros(2, 3));
        assert!(matches!(enc.backward(&out, &Matrix::zeros(2, 3)), Err(Error::Usage(_))));
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let mut c = config(false);
        c.dropout_rate = 0.5;
        let enc = Encoder::new(c).unwrap();
        let eval = enc.encode(&[1, 2, 3], Mode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train = enc.encode(&[1, 2, 3], Mode::Train(&mut rng));
        for (t, e) in train.w.as_slice().iter().zip(eval.w.as_slice()) {
            assert!(*t == 0.0 || (t - 2.0 * e).abs() < 1e-12);
        }
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let mut c = config(true);
        c.dropout_rate = 0.5;
        let enc = Encoder::new(c).unwrap();
        let ids = [1, 2, 3];
        let eval = enc.encode(&ids, Mode::Eval).w;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let samples = 20_000;
        let mut mean = eval.zeros_like();
        for _ in 0..samples {
            mean.axpy(1.0 / samples as f64, &enc.encode(&ids, Mode::Train(&mut rng)).w);
        }
        // Each sample is 0 or 2x with equal probability, so sigma = |x|.
        for (m, e) in mean.as_slice().iter().zip(eval.as_slice()) {
            let sigma = e.abs() / (samples as f64).sqrt();
            assert!((m - e).abs() <= 3.0 * sigma + 1e-12, "{m} vs {e}");
        }
    }

    #[test]
    fn vocabulary_lowercases_and_maps_unknown() {
        let s = Sentence::new(["The", "the", "Cat"]).unwrap();
        let v = Vocabulary::build([&s], 1);
        assert_eq!(v.len(), 3);
        assert_eq!(v.ids(&s), vec![1, 1, 2]);
        assert_eq!(v.id("dog"), UNK);
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn pretrained_embeddings() {
        let vocab = Vocabulary::from_words(["paris", "berlin"]);
        let mut c = config(false);
        c.vocab_size = vocab.len();
        let mut enc = Encoder::new(c).unwrap();
        let before = enc.params.clone();

        let empty = write_tmp("");
        assert_eq!(enc.load_pretrained_embeddings(&vocab, empty.path()).unwrap(), 0);
        assert_eq!(enc.params, before);

        let f = write_tmp("Paris 1 2 3\nrome 0 0 0\nberlin 4 5 6\n");
        assert_eq!(enc.load_pretrained_embeddings(&vocab, f.path()).unwrap(), 2);
        assert_eq!(enc.params.embedding.row(1), &[1.0, 2.0, 3.0]);
        assert_eq!(enc.params.embedding.row(2), &[4.0, 5.0, 6.0]);

        let bad = write_tmp("paris 1 2 3\nberlin 1 2\n");
        match enc.load_pretrained_embeddings(&vocab, bad.path()) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
