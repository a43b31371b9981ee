//! Word-level linear-chain CRF over BIOES classes.
//!
//! Illegal BIOES transitions are pinned to `-inf` in the transition, start
//! and stop tables, so every decoded sequence is legal and the partition
//! function only sums over legal sequences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::labels::{can_end, can_follow, EntityLabelSet, WordClass, WordTagSequence};
use crate::math::{axpy, dot, LogSumExp, Matrix, Params};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    /// `K × d`, one row per word class.
    pub emission: Matrix,
    /// `transitions[i][j]`: score of class `j` following class `i`.
    pub transitions: Matrix,
    pub start: Matrix,
    pub stop: Matrix,
}

impl Params for CrfParams {
    fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("crf.emission", &self.emission),
            ("crf.transitions", &self.transitions),
            ("crf.start", &self.start),
            ("crf.stop", &self.stop),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("crf.emission", &mut self.emission),
            ("crf.transitions", &mut self.transitions),
            ("crf.start", &mut self.start),
            ("crf.stop", &mut self.stop),
        ]
    }
}

impl CrfParams {
    /// Zero scores with the BIOES legality mask applied.
    pub fn zeros(labels: &EntityLabelSet, dim: usize) -> Self {
        let k = labels.num_word_classes();
        let mut p = Self {
            emission: Matrix::zeros(k, dim),
            transitions: Matrix::zeros(k, k),
            start: Matrix::zeros(1, k),
            stop: Matrix::zeros(1, k),
        };
        p.apply_mask();
        p
    }

    pub fn random<R: Rng>(labels: &EntityLabelSet, dim: usize, scale: f64, rng: &mut R) -> Self {
        let k = labels.num_word_classes();
        let mut p = Self {
            emission: Matrix::random(k, dim, scale, rng),
            transitions: Matrix::random(k, k, scale, rng),
            start: Matrix::random(1, k, scale, rng),
            stop: Matrix::random(1, k, scale, rng),
        };
        p.apply_mask();
        p
    }

    /// Gradient buffer with the same shapes and all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            emission: self.emission.zeros_like(),
            transitions: self.transitions.zeros_like(),
            start: self.start.zeros_like(),
            stop: self.stop.zeros_like(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.emission.rows()
    }

    pub fn dim(&self) -> usize {
        self.emission.cols()
    }

    /// Pins every transition rejected by BIOES legality to `-inf`.
    pub fn apply_mask(&mut self) {
        let k = self.num_classes();
        for i in 0..k {
            let ci = WordClass::from_index(i);
            if !can_follow(None, ci) {
                self.start.set(0, i, f64::NEG_INFINITY);
            }
            if !can_end(ci) {
                self.stop.set(0, i, f64::NEG_INFINITY);
            }
            for j in 0..k {
                if !can_follow(Some(ci), WordClass::from_index(j)) {
                    self.transitions.set(i, j, f64::NEG_INFINITY);
                }
            }
        }
    }

    /// `n × K` emission scores.
    pub fn emissions(&self, w: &Matrix) -> Matrix {
        assert_eq!(w.cols(), self.dim(), "word representation width");
        let k = self.num_classes();
        let mut out = Matrix::zeros(w.rows(), k);
        for t in 0..w.rows() {
            let wt = w.row(t);
            for c in 0..k {
                out.set(t, c, dot(self.emission.row(c), wt));
            }
        }
        out
    }

    fn forward(&self, emit: &Matrix) -> (Matrix, f64) {
        let (n, k) = emit.shape();
        let mut alpha = Matrix::zeros(n, k);
        for c in 0..k {
            alpha.set(0, c, self.start.get(0, c) + emit.get(0, c));
        }
        for t in 1..n {
            for c in 0..k {
                let mut acc = LogSumExp::new();
                for p in 0..k {
                    acc.push(alpha.get(t - 1, p) + self.transitions.get(p, c));
                }
                alpha.set(t, c, acc.value() + emit.get(t, c));
            }
        }
        let log_z = crate::math::log_sum_exp((0..k).map(|c| alpha.get(n - 1, c) + self.stop.get(0, c)));
        (alpha, log_z)
    }

    fn backward_messages(&self, emit: &Matrix) -> Matrix {
        let (n, k) = emit.shape();
        let mut beta = Matrix::zeros(n, k);
        for c in 0..k {
            beta.set(n - 1, c, self.stop.get(0, c));
        }
        for t in (0..n - 1).rev() {
            for c in 0..k {
                let mut acc = LogSumExp::new();
                for nx in 0..k {
                    acc.push(self.transitions.get(c, nx) + emit.get(t + 1, nx) + beta.get(t + 1, nx));
                }
                beta.set(t, c, acc.value());
            }
        }
        beta
    }

    /// `log Z` over all legal label sequences.
    pub fn log_partition(&self, w: &Matrix) -> f64 {
        assert!(w.rows() > 0, "empty sentence");
        self.forward(&self.emissions(w)).1
    }

    fn score_with(&self, emit: &Matrix, y: &WordTagSequence) -> Result<f64> {
        if y.len() != emit.rows() {
            return Err(Error::Structure(format!(
                "{} labels for {} words",
                y.len(),
                emit.rows()
            )));
        }
        let mut prev: Option<usize> = None;
        let mut s = 0.0;
        for (t, c) in y.labels.iter().enumerate() {
            let c = c.index();
            s += match prev {
                None => self.start.get(0, c),
                Some(p) => self.transitions.get(p, c),
            };
            s += emit.get(t, c);
            prev = Some(c);
        }
        if let Some(p) = prev {
            s += self.stop.get(0, p);
        }
        if s == f64::NEG_INFINITY {
            return Err(Error::Domain("label sequence violates BIOES legality".into()));
        }
        Ok(s)
    }

    /// Unnormalized log score of `y`.
    pub fn score(&self, w: &Matrix, y: &WordTagSequence) -> Result<f64> {
        self.score_with(&self.emissions(w), y)
    }

    pub fn nll(&self, w: &Matrix, y: &WordTagSequence) -> Result<f64> {
        let emit = self.emissions(w);
        let s = self.score_with(&emit, y)?;
        Ok(self.forward(&emit).1 - s)
    }

    /// `P(y_t = c)` for every position and class.
    pub fn marginals(&self, w: &Matrix) -> Matrix {
        let emit = self.emissions(w);
        let (alpha, log_z) = self.forward(&emit);
        let beta = self.backward_messages(&emit);
        let mut m = emit.zeros_like();
        for t in 0..emit.rows() {
            for c in 0..emit.cols() {
                m.set(t, c, (alpha.get(t, c) + beta.get(t, c) - log_z).exp());
            }
        }
        m
    }

    /// NLL of `y`, adding parameter gradients into `grads` and returning
    /// `dNLL/dw`.
    pub fn nll_backward(
        &self,
        w: &Matrix,
        y: &WordTagSequence,
        grads: &mut CrfParams,
    ) -> Result<(f64, Matrix)> {
        let emit = self.emissions(w);
        let gold = self.score_with(&emit, y)?;
        let (alpha, log_z) = self.forward(&emit);
        let beta = self.backward_messages(&emit);
        let (n, k) = emit.shape();

        // dNLL/d(emission score) = marginal - gold indicator.
        let mut g_emit = emit.zeros_like();
        for t in 0..n {
            for c in 0..k {
                g_emit.set(t, c, (alpha.get(t, c) + beta.get(t, c) - log_z).exp());
            }
            g_emit.add_at(t, y.labels[t].index(), -1.0);
        }
        for c in 0..k {
            let a = (self.start.get(0, c) + emit.get(0, c) + beta.get(0, c) - log_z).exp();
            grads.start.add_at(0, c, a);
            let b = (alpha.get(n - 1, c) + self.stop.get(0, c) - log_z).exp();
            grads.stop.add_at(0, c, b);
        }
        for t in 1..n {
            for p in 0..k {
                let ap = alpha.get(t - 1, p);
                if ap == f64::NEG_INFINITY {
                    continue;
                }
                for c in 0..k {
                    let tr = self.transitions.get(p, c);
                    if tr == f64::NEG_INFINITY {
                        continue;
                    }
                    let x = (ap + tr + emit.get(t, c) + beta.get(t, c) - log_z).exp();
                    grads.transitions.add_at(p, c, x);
                }
            }
        }
        let first = y.labels[0].index();
        grads.start.add_at(0, first, -1.0);
        grads.stop.add_at(0, y.labels[n - 1].index(), -1.0);
        for t in 1..n {
            grads
                .transitions
                .add_at(y.labels[t - 1].index(), y.labels[t].index(), -1.0);
        }

        let mut grad_w = w.zeros_like();
        for t in 0..n {
            let gt = g_emit.row(t);
            for c in 0..k {
                if gt[c] != 0.0 {
                    axpy(grads.emission.row_mut(c), gt[c], w.row(t));
                    axpy(grad_w.row_mut(t), gt[c], self.emission.row(c));
                }
            }
        }
        Ok((log_z - gold, grad_w))
    }

    /// Best legal sequence and its score. Ties go to the lower class index.
    pub fn viterbi(&self, w: &Matrix) -> (WordTagSequence, f64) {
        let emit = self.emissions(w);
        let (n, k) = emit.shape();
        assert!(n > 0, "empty sentence");
        let mut delta = Matrix::zeros(n, k);
        let mut back = vec![0usize; n * k];
        for c in 0..k {
            delta.set(0, c, self.start.get(0, c) + emit.get(0, c));
        }
        for t in 1..n {
            for c in 0..k {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for p in 0..k {
                    let v = delta.get(t - 1, p) + self.transitions.get(p, c);
                    if v > best {
                        best = v;
                        arg = p;
                    }
                }
                delta.set(t, c, best + emit.get(t, c));
                back[t * k + c] = arg;
            }
        }
        let mut best = f64::NEG_INFINITY;
        let mut last = 0;
        for c in 0..k {
            let v = delta.get(n - 1, c) + self.stop.get(0, c);
            if v > best {
                best = v;
                last = c;
            }
        }
        let mut path = vec![0usize; n];
        path[n - 1] = last;
        for t in (1..n).rev() {
            path[t - 1] = back[t * k + path[t]];
        }
        let labels = path.into_iter().map(WordClass::from_index).collect();
        (WordTagSequence::new(labels), best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::validate_bioes;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_type() -> EntityLabelSet {
        EntityLabelSet::new(["PER"]).unwrap()
    }

    #[test]
    fn single_word_unmasked_partition_is_log_k() {
        let labels = EntityLabelSet::conll();
        let k = labels.num_word_classes();
        let p = CrfParams {
            emission: Matrix::zeros(k, 2),
            transitions: Matrix::zeros(k, k),
            start: Matrix::zeros(1, k),
            stop: Matrix::zeros(1, k),
        };
        let w = Matrix::zeros(1, 2);
        assert!((p.log_partition(&w) - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn forced_single_path() {
        let labels = one_type();
        let mut p = CrfParams::zeros(&labels, 1);
        // Only O -> O -> O survives.
        let k = p.num_classes();
        for i in 0..k {
            for j in 0..k {
                if !(i == 0 && j == 0) {
                    p.transitions.set(i, j, f64::NEG_INFINITY);
                }
            }
            if i != 0 {
                p.start.set(0, i, f64::NEG_INFINITY);
            }
        }
        p.emission.set(0, 0, 0.7);
        let w = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![-1.0]]);
        let path_score = 0.7 * (1.0 + 2.0 - 1.0);
        assert!((p.log_partition(&w) - path_score).abs() < 1e-12);
        let y = WordTagSequence::new(vec![WordClass::O; 3]);
        assert!(p.nll(&w, &y).unwrap().abs() < 1e-12);
        let (best, score) = p.viterbi(&w);
        assert_eq!(best, y);
        assert!((score - path_score).abs() < 1e-12);
    }

    #[test]
    fn zero_parameters_score_zero() {
        let labels = EntityLabelSet::conll();
        let p = CrfParams::zeros(&labels, 3);
        let w = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, -1.0, 1.0]]);
        let y = WordTagSequence::new(vec![WordClass::B(2), WordClass::E(2)]);
        assert_eq!(p.score(&w, &y).unwrap(), 0.0);
    }

    #[test]
    fn illegal_sequence_is_domain_error() {
        let labels = one_type();
        let p = CrfParams::zeros(&labels, 1);
        let w = Matrix::zeros(2, 1);
        let y = WordTagSequence::new(vec![WordClass::O, WordClass::I(0)]);
        assert!(matches!(p.nll(&w, &y), Err(Error::Domain(_))));
        assert!(matches!(p.score(&w, &y), Err(Error::Domain(_))));
        let mut g = p.zeros_like();
        assert!(p.nll_backward(&w, &y, &mut g).is_err());
    }

    #[test]
    fn dominant_emissions_are_decoded() {
        let labels = EntityLabelSet::conll();
        let mut p = CrfParams::zeros(&labels, 4);
        let gold = [WordClass::B(1), WordClass::I(1), WordClass::E(1), WordClass::O];
        for (t, c) in gold.iter().enumerate() {
            p.emission.set(c.index(), t, 10.0);
        }
        let w = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ]);
        let (y, score) = p.viterbi(&w);
        assert_eq!(y.labels, gold);
        assert!((p.score(&w, &y).unwrap() - score).abs() < 1e-12);
        assert!(score <= p.log_partition(&w));
    }

    #[test]
    fn decoding_respects_mask() {
        let labels = EntityLabelSet::new(["A", "B"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = CrfParams::random(&labels, 3, 3.0, &mut rng);
            let w = Matrix::random(5, 3, 2.0, &mut rng);
            let (y, _) = p.viterbi(&w);
            assert!(validate_bioes(&y).is_valid());
            assert!(!y.labels.windows(2).any(|x| x[0] == WordClass::O && matches!(x[1], WordClass::I(_))));
        }
    }

    #[test]
    fn marginals_are_distributions() {
        let labels = one_type();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = CrfParams::random(&labels, 2, 1.0, &mut rng);
        let w = Matrix::random(4, 2, 1.0, &mut rng);
        let m = p.marginals(&w);
        for t in 0..4 {
            let s: f64 = m.row(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // First word can never be I or E.
        assert_eq!(m.get(0, WordClass::I(0).index()), 0.0);
        assert_eq!(m.get(0, WordClass::E(0).index()), 0.0);
    }
}
