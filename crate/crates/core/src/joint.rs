//! Joint CRF + HSCRF output layers.
//!
//! Training minimises the unweighted sum of both layers' NLLs on a shared
//! encoder output. Decoding produces one hypothesis per layer, scores each
//! hypothesis under both layers and keeps the one with the lower NLL sum.

use serde::{Deserialize, Serialize};

use crate::crf::CrfParams;
use crate::hscrf::Hscrf;
use crate::labels::{labels_from_segmentation, segmentation_from_labels, Segmentation, WordTagSequence};
use crate::math::{Matrix, Params};
use crate::{Error, Result};

/// Which hypothesis the joint decoder kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Crf,
    Hscrf,
}

/// Picks the first hypothesis unless the second has a strictly lower sum.
pub fn select(first_sum: f64, second_sum: f64) -> bool {
    first_sum <= second_sum
}

/// CRF and HSCRF layers reading the same word representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointModel {
    pub crf: CrfParams,
    pub hscrf: Hscrf,
}

impl Params for JointModel {
    fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        let mut v = self.crf.blocks();
        v.extend(self.hscrf.blocks());
        v
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut v = self.crf.blocks_mut();
        v.extend(self.hscrf.blocks_mut());
        v
    }
}

/// Everything the joint decoder computed for one sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDecodeTrace {
    pub crf_hypothesis: WordTagSequence,
    pub hscrf_hypothesis: Segmentation,
    pub nll_c: f64,
    pub nll_h: f64,
    pub nll_c_by_h: f64,
    pub nll_h_by_c: f64,
    pub chosen: Choice,
    /// The CRF hypothesis has an entity longer than the HSCRF lattice
    /// allows, so `nll_c_by_h` used clamped position embeddings.
    pub crf_outside_lattice: bool,
}

impl JointDecodeTrace {
    pub fn crf_sum(&self) -> f64 {
        self.nll_c + self.nll_c_by_h
    }

    pub fn hscrf_sum(&self) -> f64 {
        self.nll_h + self.nll_h_by_c
    }

    /// The selected hypothesis as a segmentation.
    pub fn output(&self) -> Segmentation {
        match self.chosen {
            Choice::Crf => segmentation_from_labels(&self.crf_hypothesis)
                .expect("constrained CRF decoding yields legal sequences"),
            Choice::Hscrf => self.hscrf_hypothesis.clone(),
        }
    }

    /// One-line diagnostic record.
    pub fn to_record(&self, sentence: usize) -> String {
        serde_json::json!({
            "sentence": sentence,
            "nll_c": self.nll_c,
            "nll_h": self.nll_h,
            "nll_c_by_h": self.nll_c_by_h,
            "nll_h_by_c": self.nll_h_by_c,
            "chosen": self.chosen,
            "crf_outside_lattice": self.crf_outside_lattice,
        })
        .to_string()
    }
}

impl JointModel {
    pub fn zeros_like(&self) -> Self {
        Self {
            crf: self.crf.zeros_like(),
            hscrf: self.hscrf.zeros_like(),
        }
    }

    fn check_pair(y: &WordTagSequence, s: &Segmentation) -> Result<()> {
        let expected = labels_from_segmentation(s, y.len())
            .map_err(|e| Error::Usage(format!("inconsistent gold pair: {e}")))?;
        if &expected != y {
            return Err(Error::Usage(
                "word labels and segmentation describe different annotations".into(),
            ));
        }
        Ok(())
    }

    pub fn loss(&self, w: &Matrix, y: &WordTagSequence, s: &Segmentation) -> Result<f64> {
        Self::check_pair(y, s)?;
        Ok(self.crf.nll(w, y)? + self.hscrf.nll(w, s)?)
    }

    /// Joint loss, adding parameter gradients into `grads` and returning the
    /// summed `dL/dw` of both layers.
    pub fn loss_backward(
        &self,
        w: &Matrix,
        y: &WordTagSequence,
        s: &Segmentation,
        grads: &mut JointModel,
    ) -> Result<(f64, Matrix)> {
        Self::check_pair(y, s)?;
        let (lc, mut gw) = self.crf.nll_backward(w, y, &mut grads.crf)?;
        let (lh, gh) = self.hscrf.nll_backward(w, s, &mut grads.hscrf)?;
        gw.axpy(1.0, &gh);
        Ok((lc + lh, gw))
    }

    pub fn decode(&self, w: &Matrix) -> JointDecodeTrace {
        let log_zc = self.crf.log_partition(w);
        let log_zh = self.hscrf.log_partition(w);

        let (s_c, score_c) = self.crf.viterbi(w);
        let (s_h, score_h) = self.hscrf.viterbi(w);

        let seg_c = segmentation_from_labels(&s_c).expect("constrained CRF decoding yields legal sequences");
        let crf_outside_lattice = !seg_c.fits_lattice(self.hscrf.max_len());
        let y_h = labels_from_segmentation(&s_h, w.rows()).expect("viterbi covers the sentence");

        let nll_c = log_zc - score_c;
        let nll_h = log_zh - score_h;
        let nll_c_by_h = log_zh
            - self
                .hscrf
                .score_segmentation(w, &seg_c)
                .expect("segmentation covers the sentence");
        let nll_h_by_c = log_zc - self.crf.score(w, &y_h).expect("lattice segmentations are legal");

        let chosen = if select(nll_c + nll_c_by_h, nll_h + nll_h_by_c) {
            Choice::Crf
        } else {
            Choice::Hscrf
        };
        if crf_outside_lattice {
            log::debug!("CRF hypothesis exceeds the segment lattice; cross-scored with clamped positions");
        }
        JointDecodeTrace {
            crf_hypothesis: s_c,
            hscrf_hypothesis: s_h,
            nll_c,
            nll_h,
            nll_c_by_h,
            nll_h_by_c,
            chosen,
            crf_outside_lattice,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{EntityLabelSet, SegLabel, WordClass};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64, d: usize, max_len: usize) -> (JointModel, EntityLabelSet) {
        let labels = EntityLabelSet::new(["A", "B"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = JointModel {
            crf: CrfParams::random(&labels, d, 1.0, &mut rng),
            hscrf: Hscrf::hybrid_random(2, d, max_len, 2, 1.0, &mut rng),
        };
        (m, labels)
    }

    #[test]
    fn loss_is_sum_of_layers() {
        let (m, _) = model(1, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Matrix::random(4, 3, 1.0, &mut rng);
        let s = Segmentation::from_triples(&[(1, 2, SegLabel::Entity(1)), (3, 4, SegLabel::Outside)], 4).unwrap();
        let y = labels_from_segmentation(&s, 4).unwrap();
        let joint = m.loss(&w, &y, &s).unwrap();
        assert_eq!(joint, m.crf.nll(&w, &y).unwrap() + m.hscrf.nll(&w, &s).unwrap());
        let mut g = m.zeros_like();
        let (l, _) = m.loss_backward(&w, &y, &s, &mut g).unwrap();
        assert!((l - joint).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_pair_is_usage_error() {
        let (m, _) = model(1, 2, 3);
        let w = Matrix::zeros(2, 2);
        let s = Segmentation::from_triples(&[(1, 2, SegLabel::Entity(0))], 2).unwrap();
        let y = WordTagSequence::new(vec![WordClass::O, WordClass::O]);
        assert!(matches!(m.loss(&w, &y, &s), Err(Error::Usage(_))));
    }

    #[test]
    fn degenerate_layers_give_zero_loss() {
        // One word, every option but O pinned away in both layers.
        let labels = EntityLabelSet::new(["A"]).unwrap();
        let mut crf = CrfParams::zeros(&labels, 1);
        for c in 1..labels.num_word_classes() {
            crf.start.set(0, c, f64::NEG_INFINITY);
        }
        let mut hscrf = Hscrf::hybrid_zeros(1, 1, 2, 1);
        hscrf.transitions.start.set(0, 1, f64::NEG_INFINITY);
        let m = JointModel { crf, hscrf };
        let w = Matrix::from_rows(&[vec![0.3]]);
        let s = Segmentation::outside(1);
        let y = labels_from_segmentation(&s, 1).unwrap();
        assert!(m.loss(&w, &y, &s).unwrap().abs() < 1e-12);
    }

    #[test]
    fn decode_trace_is_consistent() {
        for seed in 0..30 {
            let (m, _) = model(seed, 3, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let w = Matrix::random(6, 3, 1.5, &mut rng);
            let t = m.decode(&w);
            assert!(t.nll_c >= -1e-12 && t.nll_h >= -1e-12 && t.nll_h_by_c >= -1e-12);
            if !t.crf_outside_lattice {
                assert!(t.nll_c_by_h >= -1e-12);
            }
            let min = t.crf_sum().min(t.hscrf_sum());
            let kept = match t.chosen {
                Choice::Crf => t.crf_sum(),
                Choice::Hscrf => t.hscrf_sum(),
            };
            assert_eq!(kept, min);
            if segmentation_from_labels(&t.crf_hypothesis).unwrap() == t.hscrf_hypothesis {
                assert_eq!(t.output(), t.hscrf_hypothesis);
            }
            let rec: serde_json::Value = serde_json::from_str(&t.to_record(seed as usize)).unwrap();
            assert_eq!(rec["sentence"], seed);
        }
    }

    #[test]
    fn selection_ties_and_symmetry() {
        assert!(select(1.0, 1.0));
        assert!(select(0.5, 1.0));
        assert!(!select(1.5, 1.0));
        // Swapping the roles flips a strict decision.
        for (a, b) in [(0.5, 1.0), (2.0, 1.0)] {
            assert_ne!(select(a, b), select(b, a));
        }
    }
}
