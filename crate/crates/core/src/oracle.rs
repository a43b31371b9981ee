//! Brute-force references for the dynamic programs.
//!
//! Everything here enumerates hypotheses explicitly and scores them by
//! direct summation over model parameters. Nothing in this module calls the
//! forward/backward or Viterbi code of [`crate::crf`] or [`crate::hscrf`],
//! and segment scores are recomputed from explicitly assembled feature
//! vectors rather than through the scorers' precomputed tables.

use crate::crf::CrfParams;
use crate::hscrf::{BaselineScorer, HybridScorer, SegmentTransitions, SemiCrf};
use crate::labels::{validate_bioes, EntityLabelSet, SegLabel, Segment, Segmentation, WordClass, WordTagSequence};
use crate::math::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnumerationBudget {
    pub max_n: usize,
    pub max_len: usize,
    pub max_types: usize,
    pub max_hypotheses: usize,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self {
            max_n: 6,
            max_len: 3,
            max_types: 4,
            max_hypotheses: 1_000_000,
        }
    }
}

impl EnumerationBudget {
    fn check(&self, n: usize, max_len: Option<usize>, types: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::Usage("cannot enumerate an empty sentence".into()));
        }
        if n > self.max_n {
            return Err(Error::Budget(format!("n = {n} > {}", self.max_n)));
        }
        if let Some(l) = max_len {
            if l > self.max_len {
                return Err(Error::Budget(format!("L = {l} > {}", self.max_len)));
            }
        }
        if types > self.max_types {
            return Err(Error::Budget(format!("{types} entity types > {}", self.max_types)));
        }
        Ok(())
    }
}

/// Which label sequences to enumerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMask {
    /// Only BIOES-legal sequences.
    Bioes,
    /// Every sequence of word classes.
    Unconstrained,
}

fn locally_legal(prev: Option<WordClass>, next: WordClass) -> bool {
    use WordClass::*;
    match (prev, next) {
        (None, I(_) | E(_)) => false,
        (None, _) => true,
        (Some(B(t) | I(t)), I(u) | E(u)) => t == u,
        (Some(B(_) | I(_)), _) => false,
        (Some(_), I(_) | E(_)) => false,
        (Some(_), _) => true,
    }
}

/// All label sequences of length `n`, in lexicographic class-index order.
pub fn enumerate_label_sequences(
    n: usize,
    labels: &EntityLabelSet,
    mask: LabelMask,
    budget: &EnumerationBudget,
) -> Result<Vec<WordTagSequence>> {
    budget.check(n, None, labels.num_types())?;
    let k = labels.num_word_classes();
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(n);
    fn rec(
        n: usize,
        k: usize,
        mask: LabelMask,
        cap: usize,
        prefix: &mut Vec<WordClass>,
        out: &mut Vec<WordTagSequence>,
    ) -> Result<()> {
        if prefix.len() == n {
            let y = WordTagSequence::new(prefix.clone());
            if mask == LabelMask::Unconstrained || validate_bioes(&y).is_valid() {
                if out.len() >= cap {
                    return Err(Error::Budget(format!("more than {cap} hypotheses")));
                }
                out.push(y);
            }
            return Ok(());
        }
        for c in 0..k {
            let c = WordClass::from_index(c);
            if mask == LabelMask::Bioes && !locally_legal(prefix.last().copied(), c) {
                continue;
            }
            prefix.push(c);
            rec(n, k, mask, cap, prefix, out)?;
            prefix.pop();
        }
        Ok(())
    }
    rec(n, k, mask, budget.max_hypotheses, &mut prefix, &mut out)?;
    Ok(out)
}

/// Every segmentation with unit O segments and entity segments of length at
/// most `max_len`.
pub fn enumerate_segmentations(
    n: usize,
    max_len: usize,
    num_types: usize,
    budget: &EnumerationBudget,
) -> Result<Vec<Segmentation>> {
    budget.check(n, Some(max_len), num_types)?;
    let mut out = Vec::new();
    let mut prefix = Vec::new();
    fn rec(
        start: usize,
        n: usize,
        max_len: usize,
        types: usize,
        cap: usize,
        prefix: &mut Vec<Segment>,
        out: &mut Vec<Segmentation>,
    ) -> Result<()> {
        if start > n {
            if out.len() >= cap {
                return Err(Error::Budget(format!("more than {cap} hypotheses")));
            }
            out.push(Segmentation::new(prefix.clone(), n)?);
            return Ok(());
        }
        prefix.push(Segment::new(start, start, SegLabel::Outside));
        rec(start + 1, n, max_len, types, cap, prefix, out)?;
        prefix.pop();
        for len in 1..=max_len {
            let end = start + len - 1;
            if end > n {
                break;
            }
            for t in 0..types {
                prefix.push(Segment::new(start, end, SegLabel::Entity(t)));
                rec(end + 1, n, max_len, types, cap, prefix, out)?;
                prefix.pop();
            }
        }
        Ok(())
    }
    rec(1, n, max_len, num_types, budget.max_hypotheses, &mut prefix, &mut out)?;
    Ok(out)
}

fn naive_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn naive_log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Direct CRF score: emissions by dot product plus transitions.
pub fn crf_direct_score(p: &CrfParams, w: &Matrix, y: &WordTagSequence) -> f64 {
    let mut s = 0.0;
    for (t, c) in y.labels.iter().enumerate() {
        let c = c.index();
        s += naive_dot(p.emission.row(c), w.row(t));
        s += if t == 0 {
            p.start.get(0, c)
        } else {
            p.transitions.get(y.labels[t - 1].index(), c)
        };
    }
    s + p.stop.get(0, y.labels[y.len() - 1].index())
}

/// Segment score from an explicitly assembled feature vector.
pub trait DirectSegmentScore {
    fn direct_segment_score(&self, w: &Matrix, seg: Segment) -> f64;
}

impl DirectSegmentScore for HybridScorer {
    fn direct_segment_score(&self, w: &Matrix, seg: Segment) -> f64 {
        let big_l = self.positions.rows();
        let mut total = 0.0;
        for k in seg.begin..=seg.end {
            // w'_k = [w_k ; w_e - w_b ; phi(min(k - b + 1, L))]
            let mut feat: Vec<f64> = w.row(k - 1).to_vec();
            for i in 0..w.cols() {
                feat.push(w.get(seg.end - 1, i) - w.get(seg.begin - 1, i));
            }
            let pos = (k - seg.begin + 1).min(big_l);
            feat.extend_from_slice(self.positions.row(pos - 1));
            let class = WordClass::in_segment(seg.label, seg.begin, seg.end, k);
            total += naive_dot(self.class_weights.row(class.index()), &feat);
        }
        total
    }
}

impl DirectSegmentScore for BaselineScorer {
    fn direct_segment_score(&self, w: &Matrix, seg: Segment) -> f64 {
        let mut feat: Vec<f64> = w.row(seg.begin - 1).to_vec();
        feat.extend_from_slice(w.row(seg.end - 1));
        for i in 0..w.cols() {
            feat.push(w.get(seg.end - 1, i) - w.get(seg.begin - 1, i));
        }
        let len = seg.len().min(self.lengths.rows());
        feat.extend_from_slice(self.lengths.row(len - 1));
        naive_dot(self.label_weights.row(seg.label.index()), &feat)
    }
}

/// Direct semi-Markov score of a segmentation.
pub fn semi_direct_score<S: DirectSegmentScore>(layer: &SemiCrf<S>, w: &Matrix, s: &Segmentation) -> f64 {
    let tr: &SegmentTransitions = &layer.transitions;
    let segs = s.segments();
    let mut total = 0.0;
    for (i, seg) in segs.iter().enumerate() {
        total += layer.scorer.direct_segment_score(w, *seg);
        let l = seg.label.index();
        total += if i == 0 {
            tr.start.get(0, l)
        } else {
            tr.transitions.get(segs[i - 1].label.index(), l)
        };
    }
    total + tr.stop.get(0, segs[segs.len() - 1].label.index())
}

pub fn brute_crf_log_partition(
    p: &CrfParams,
    w: &Matrix,
    labels: &EntityLabelSet,
    budget: &EnumerationBudget,
) -> Result<f64> {
    let ys = enumerate_label_sequences(w.rows(), labels, LabelMask::Bioes, budget)?;
    let scores: Vec<f64> = ys.iter().map(|y| crf_direct_score(p, w, y)).collect();
    Ok(naive_log_sum_exp(&scores))
}

/// Highest-scoring legal label sequence (first in enumeration order on ties).
pub fn brute_crf_argmax(
    p: &CrfParams,
    w: &Matrix,
    labels: &EntityLabelSet,
    budget: &EnumerationBudget,
) -> Result<(WordTagSequence, f64)> {
    let ys = enumerate_label_sequences(w.rows(), labels, LabelMask::Bioes, budget)?;
    let mut best: Option<(WordTagSequence, f64)> = None;
    for y in ys {
        let s = crf_direct_score(p, w, &y);
        if best.as_ref().map_or(true, |(_, b)| s > *b) {
            best = Some((y, s));
        }
    }
    best.ok_or_else(|| Error::Domain("no legal sequence".into()))
}

pub fn brute_semi_log_partition<S: DirectSegmentScore>(
    layer: &SemiCrf<S>,
    w: &Matrix,
    max_len: usize,
    num_types: usize,
    budget: &EnumerationBudget,
) -> Result<f64> {
    let segs = enumerate_segmentations(w.rows(), max_len, num_types, budget)?;
    let scores: Vec<f64> = segs.iter().map(|s| semi_direct_score(layer, w, s)).collect();
    Ok(naive_log_sum_exp(&scores))
}

pub fn brute_semi_argmax<S: DirectSegmentScore>(
    layer: &SemiCrf<S>,
    w: &Matrix,
    max_len: usize,
    num_types: usize,
    budget: &EnumerationBudget,
) -> Result<(Segmentation, f64)> {
    let segs = enumerate_segmentations(w.rows(), max_len, num_types, budget)?;
    let mut best: Option<(Segmentation, f64)> = None;
    for s in segs {
        let v = semi_direct_score(layer, w, &s);
        if best.as_ref().map_or(true, |(_, b)| v > *b) {
            best = Some((s, v));
        }
    }
    best.ok_or_else(|| Error::Domain("empty lattice".into()))
}
