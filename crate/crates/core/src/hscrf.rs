//! Semi-Markov CRF output layers.
//!
//! A segmentation is scored as the sum of its segment scores `m_i` plus
//! segment-label transitions `b[l_{i-1}][l_i]` and start/stop terms. The
//! lattice admits entity segments of length `1..=L` and unit O segments.
//!
//! Two scorers plug into the same lattice code:
//!
//! * [`HybridScorer`] sums per-word class scores inside a segment. Word `k`
//!   of segment `(b, e, l)` gets the BIOES class implied by its position and
//!   the feature vector `[w_k ; w_e - w_b ; phi(k - b + 1)]`.
//! * [`BaselineScorer`] scores the segment as a whole from
//!   `[w_b ; w_e ; w_e - w_b ; phi(e - b + 1)]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::labels::{SegLabel, Segment, Segmentation, WordClass};
use crate::math::{axpy, dot, log_sum_exp, LogSumExp, Matrix, Params};
use crate::{Error, Result};

/// Default width of the position embedding.
pub const DEFAULT_POSITION_DIM: usize = 10;
/// Default maximum entity-segment length.
pub const DEFAULT_MAX_SEGMENT_LEN: usize = 6;

/// Scores of every lattice segment, indexed by `(end, len, label)` with
/// 1-based `end`. Entries outside the lattice are `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTable {
    n: usize,
    max_len: usize,
    labels: usize,
    data: Vec<f64>,
}

impl SegmentTable {
    pub fn new(n: usize, max_len: usize, labels: usize) -> Self {
        let mut t = Self {
            n,
            max_len,
            labels,
            data: vec![0.0; n * max_len * labels],
        };
        for e in 1..=n {
            for len in 1..=max_len {
                for l in 0..labels {
                    if !t.in_lattice(e, len, l) {
                        t.set(e, len, l, f64::NEG_INFINITY);
                    }
                }
            }
        }
        t
    }

    /// Same shape, zero inside the lattice.
    pub fn zeros_like(&self) -> Self {
        let mut t = self.clone();
        for v in &mut t.data {
            if v.is_finite() {
                *v = 0.0;
            }
        }
        t
    }

    #[inline]
    pub fn in_lattice(&self, end: usize, len: usize, label: usize) -> bool {
        len >= 1 && len <= self.max_len && len <= end && end <= self.n && (label != 0 || len == 1)
    }

    #[inline]
    fn idx(&self, end: usize, len: usize, label: usize) -> usize {
        ((end - 1) * self.max_len + (len - 1)) * self.labels + label
    }

    #[inline]
    pub fn get(&self, end: usize, len: usize, label: usize) -> f64 {
        self.data[self.idx(end, len, label)]
    }

    #[inline]
    pub fn set(&mut self, end: usize, len: usize, label: usize, v: f64) {
        let i = self.idx(end, len, label);
        self.data[i] = v;
    }

    #[inline]
    pub fn add(&mut self, end: usize, len: usize, label: usize, v: f64) {
        let i = self.idx(end, len, label);
        self.data[i] += v;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn num_labels(&self) -> usize {
        self.labels
    }

    /// Longest segment that can end at `end`.
    #[inline]
    pub fn lens_ending_at(&self, end: usize) -> usize {
        self.max_len.min(end)
    }

    /// Iterates `(end, len, label)` over all lattice segments.
    pub fn lattice(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (1..=self.n).flat_map(move |e| {
            (1..=self.lens_ending_at(e)).flat_map(move |len| {
                (0..self.labels)
                    .filter(move |&l| l != 0 || len == 1)
                    .map(move |l| (e, len, l))
            })
        })
    }
}

/// Segment-label transitions and start/stop scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTransitions {
    pub transitions: Matrix,
    pub start: Matrix,
    pub stop: Matrix,
}

impl SegmentTransitions {
    pub fn zeros(labels: usize) -> Self {
        Self {
            transitions: Matrix::zeros(labels, labels),
            start: Matrix::zeros(1, labels),
            stop: Matrix::zeros(1, labels),
        }
    }

    pub fn random<R: Rng>(labels: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            transitions: Matrix::random(labels, labels, scale, rng),
            start: Matrix::random(1, labels, scale, rng),
            stop: Matrix::random(1, labels, scale, rng),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.start.cols()
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.num_labels())
    }
}

/// Iteration counts of a forward pass, for complexity checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DpStats {
    pub segment_terms: usize,
    pub transition_terms: usize,
}

impl DpStats {
    pub fn total(&self) -> usize {
        self.segment_terms + self.transition_terms
    }
}

/// Forward messages. `alpha[e][l]` is the log-sum over prefixes ending with
/// a segment `(_, e, l)`; `incoming[j][l]` is the log-sum of entering a
/// segment with label `l` that begins at `j + 1`.
struct Forward {
    alpha: Matrix,
    incoming: Matrix,
    log_z: f64,
}

fn forward(table: &SegmentTable, tr: &SegmentTransitions, stats: &mut DpStats) -> Forward {
    let n = table.n();
    let c = table.num_labels();
    let mut alpha = Matrix::filled(n + 1, c, f64::NEG_INFINITY);
    let mut incoming = Matrix::filled(n + 1, c, f64::NEG_INFINITY);
    for l in 0..c {
        incoming.set(0, l, tr.start.get(0, l));
    }
    for e in 1..=n {
        for l in 0..c {
            let mut acc = LogSumExp::new();
            for len in 1..=table.lens_ending_at(e) {
                stats.segment_terms += 1;
                acc.push(incoming.get(e - len, l) + table.get(e, len, l));
            }
            alpha.set(e, l, acc.value());
        }
        if e < n {
            for l in 0..c {
                let mut acc = LogSumExp::new();
                for p in 0..c {
                    stats.transition_terms += 1;
                    acc.push(alpha.get(e, p) + tr.transitions.get(p, l));
                }
                incoming.set(e, l, acc.value());
            }
        }
    }
    let log_z = log_sum_exp((0..c).map(|l| alpha.get(n, l) + tr.stop.get(0, l)));
    Forward {
        alpha,
        incoming,
        log_z,
    }
}

/// Backward messages. `beta[e][l]` is the log-sum of completions after a
/// segment `(_, e, l)`; `next[j][l]` is the log-sum over suffixes whose
/// first segment begins at `j + 1` with label `l`.
fn backward(table: &SegmentTable, tr: &SegmentTransitions) -> (Matrix, Matrix) {
    let n = table.n();
    let c = table.num_labels();
    let mut beta = Matrix::filled(n + 1, c, f64::NEG_INFINITY);
    let mut next = Matrix::filled(n + 1, c, f64::NEG_INFINITY);
    for l in 0..c {
        beta.set(n, l, tr.stop.get(0, l));
    }
    for j in (0..n).rev() {
        for l in 0..c {
            let mut acc = LogSumExp::new();
            for len in 1..=table.max_len().min(n - j) {
                acc.push(table.get(j + len, len, l) + beta.get(j + len, l));
            }
            next.set(j, l, acc.value());
        }
        if j >= 1 {
            for l in 0..c {
                let mut acc = LogSumExp::new();
                for q in 0..c {
                    acc.push(tr.transitions.get(l, q) + next.get(j, q));
                }
                beta.set(j, l, acc.value());
            }
        }
    }
    (beta, next)
}

/// Log-partition over the segment lattice.
pub fn lattice_log_partition(table: &SegmentTable, tr: &SegmentTransitions) -> f64 {
    forward(table, tr, &mut DpStats::default()).log_z
}

/// Log-partition plus the number of inner-loop terms evaluated.
pub fn lattice_log_partition_with_stats(table: &SegmentTable, tr: &SegmentTransitions) -> (f64, DpStats) {
    let mut stats = DpStats::default();
    let f = forward(table, tr, &mut stats);
    (f.log_z, stats)
}

/// Posterior marginals of the lattice.
#[derive(Debug, Clone)]
pub struct LatticeMarginals {
    pub log_z: f64,
    /// `P((b, e, l) in s)` indexed like the score table.
    pub segments: SegmentTable,
    pub transitions: Matrix,
    pub start: Matrix,
    pub stop: Matrix,
}

pub fn lattice_marginals(table: &SegmentTable, tr: &SegmentTransitions) -> LatticeMarginals {
    let n = table.n();
    let c = table.num_labels();
    let fw = forward(table, tr, &mut DpStats::default());
    let (beta, next) = backward(table, tr);
    let log_z = fw.log_z;

    let mut segments = table.zeros_like();
    for (e, len, l) in table.lattice() {
        let v = fw.incoming.get(e - len, l) + table.get(e, len, l) + beta.get(e, l) - log_z;
        segments.set(e, len, l, v.exp());
    }
    let mut transitions = Matrix::zeros(c, c);
    for j in 1..n {
        for p in 0..c {
            let a = fw.alpha.get(j, p);
            for l in 0..c {
                let v = a + tr.transitions.get(p, l) + next.get(j, l) - log_z;
                transitions.add_at(p, l, v.exp());
            }
        }
    }
    let mut start = Matrix::zeros(1, c);
    let mut stop = Matrix::zeros(1, c);
    for l in 0..c {
        start.set(0, l, (tr.start.get(0, l) + next.get(0, l) - log_z).exp());
        stop.set(0, l, (fw.alpha.get(n, l) + tr.stop.get(0, l) - log_z).exp());
    }
    LatticeMarginals {
        log_z,
        segments,
        transitions,
        start,
        stop,
    }
}

/// Best lattice segmentation. Ties prefer the shorter last segment, then the
/// lower label index.
pub fn lattice_viterbi(table: &SegmentTable, tr: &SegmentTransitions) -> (Segmentation, f64) {
    let n = table.n();
    let c = table.num_labels();
    let mut delta = Matrix::filled(n + 1, c, f64::NEG_INFINITY);
    // (len, previous label) per (end, label)
    let mut back = vec![(0usize, 0usize); (n + 1) * c];
    for e in 1..=n {
        for l in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut arg = (1, 0);
            for len in 1..=table.lens_ending_at(e) {
                let m = table.get(e, len, l);
                if m == f64::NEG_INFINITY {
                    continue;
                }
                let b = e - len;
                if b == 0 {
                    let v = tr.start.get(0, l) + m;
                    if v > best {
                        best = v;
                        arg = (len, 0);
                    }
                } else {
                    for p in 0..c {
                        let v = delta.get(b, p) + tr.transitions.get(p, l) + m;
                        if v > best {
                            best = v;
                            arg = (len, p);
                        }
                    }
                }
            }
            delta.set(e, l, best);
            back[e * c + l] = arg;
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut label = 0;
    for l in 0..c {
        let v = delta.get(n, l) + tr.stop.get(0, l);
        if v > best {
            best = v;
            label = l;
        }
    }
    let mut segs = Vec::new();
    let mut e = n;
    while e > 0 {
        let (len, prev) = back[e * c + label];
        segs.push(Segment::new(e - len + 1, e, SegLabel::from_index(label)));
        e -= len;
        label = prev;
    }
    segs.reverse();
    let seg = Segmentation::new(segs, n).expect("viterbi produces a tiling");
    (seg, best)
}

/// Scores segments from word representations.
pub trait SegmentScorer: Params + Clone {
    /// Maximum entity-segment length of the lattice.
    fn max_len(&self) -> usize;
    /// Number of segment labels (entity types + O).
    fn num_labels(&self) -> usize;
    /// Width of the word representations consumed.
    fn input_dim(&self) -> usize;
    /// Scores of all lattice segments.
    fn score_table(&self, w: &Matrix) -> SegmentTable;
    /// Score of one segment, which may lie outside the lattice. Position
    /// indices beyond `max_len` are clamped to `max_len`.
    fn segment_score(&self, w: &Matrix, seg: Segment) -> f64;
    /// Accumulates parameter gradients given `dL/dm` for every lattice
    /// segment and returns `dL/dw`.
    fn backward(&self, w: &Matrix, grad_table: &SegmentTable, grads: &mut Self) -> Matrix;
    /// Same shapes, all zeros.
    fn zeros_like(&self) -> Self;
}

/// Hybrid segment scorer: per-word class weights `a_y` of width
/// `2d + position_dim` and a position embedding table with `max_len` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridScorer {
    /// `K × (2d + position_dim)`, one row per BIOES word class.
    pub class_weights: Matrix,
    /// `max_len × position_dim`; row `p - 1` embeds in-segment position `p`.
    pub positions: Matrix,
    dim: usize,
    num_types: usize,
}

impl HybridScorer {
    pub fn zeros(num_types: usize, dim: usize, max_len: usize, position_dim: usize) -> Self {
        Self {
            class_weights: Matrix::zeros(4 * num_types + 1, 2 * dim + position_dim),
            positions: Matrix::zeros(max_len, position_dim),
            dim,
            num_types,
        }
    }

    pub fn random<R: Rng>(
        num_types: usize,
        dim: usize,
        max_len: usize,
        position_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            class_weights: Matrix::random(4 * num_types + 1, 2 * dim + position_dim, scale, rng),
            positions: Matrix::random(max_len, position_dim, scale, rng),
            dim,
            num_types,
        }
    }

    pub fn position_dim(&self) -> usize {
        self.positions.cols()
    }

    fn word_part(&self, y: usize) -> &[f64] {
        &self.class_weights.row(y)[..self.dim]
    }

    fn diff_part(&self, y: usize) -> &[f64] {
        &self.class_weights.row(y)[self.dim..2 * self.dim]
    }

    fn pos_part(&self, y: usize) -> &[f64] {
        &self.class_weights.row(y)[2 * self.dim..]
    }

    fn num_classes(&self) -> usize {
        self.class_weights.rows()
    }
}

/// Word classes of a segment of length `len` with label index `l`, in order.
fn segment_classes(l: usize, len: usize) -> impl Iterator<Item = usize> {
    let label = SegLabel::from_index(l);
    (1..=len).map(move |k| WordClass::in_segment(label, 1, len, k).index())
}

impl Params for HybridScorer {
    fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("hscrf.class_weights", &self.class_weights),
            ("hscrf.positions", &self.positions),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("hscrf.class_weights", &mut self.class_weights),
            ("hscrf.positions", &mut self.positions),
        ]
    }
}

impl SegmentScorer for HybridScorer {
    fn max_len(&self) -> usize {
        self.positions.rows()
    }

    fn num_labels(&self) -> usize {
        self.num_types + 1
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn score_table(&self, w: &Matrix) -> SegmentTable {
        assert_eq!(w.cols(), self.dim, "word representation width");
        let n = w.rows();
        let k = self.num_classes();
        let big_l = self.max_len();
        let c = self.num_labels();
        // word[t][y] = a_y(word part) . w_t ; pos[p][y] = a_y(pos part) . phi(p)
        let mut word = Matrix::zeros(n, k);
        for t in 0..n {
            for y in 0..k {
                word.set(t, y, dot(self.word_part(y), w.row(t)));
            }
        }
        let mut pos = Matrix::zeros(big_l, k);
        for p in 0..big_l {
            for y in 0..k {
                pos.set(p, y, dot(self.pos_part(y), self.positions.row(p)));
            }
        }
        let mut table = SegmentTable::new(n, big_l, c);
        let mut diff = vec![0.0; self.dim];
        let mut diff_score = vec![0.0; k];
        for e in 1..=n {
            for len in 1..=table.lens_ending_at(e) {
                let b = e - len + 1;
                if len > 1 {
                    for (d, (we, wb)) in diff.iter_mut().zip(w.row(e - 1).iter().zip(w.row(b - 1))) {
                        *d = we - wb;
                    }
                    for (y, s) in diff_score.iter_mut().enumerate() {
                        *s = dot(self.diff_part(y), &diff);
                    }
                }
                for l in 0..c {
                    if !table.in_lattice(e, len, l) {
                        continue;
                    }
                    let mut m = 0.0;
                    for (i, y) in segment_classes(l, len).enumerate() {
                        m += word.get(b - 1 + i, y) + pos.get(i, y);
                        if len > 1 {
                            m += diff_score[y];
                        }
                    }
                    table.set(e, len, l, m);
                }
            }
        }
        table
    }

    fn segment_score(&self, w: &Matrix, seg: Segment) -> f64 {
        let (b, e) = (seg.begin, seg.end);
        let wb = w.row(b - 1);
        let we = w.row(e - 1);
        let mut m = 0.0;
        for (i, y) in segment_classes(seg.label.index(), seg.len()).enumerate() {
            let k = b + i;
            let p = (i + 1).min(self.max_len());
            m += dot(self.word_part(y), w.row(k - 1));
            m += self
                .diff_part(y)
                .iter()
                .zip(we.iter().zip(wb))
                .map(|(a, (x, z))| a * (x - z))
                .sum::<f64>();
            m += dot(self.pos_part(y), self.positions.row(p - 1));
        }
        m
    }

    fn backward(&self, w: &Matrix, g: &SegmentTable, grads: &mut Self) -> Matrix {
        let n = w.rows();
        let k = self.num_classes();
        let big_l = self.max_len();
        let d = self.dim;
        // Accumulated dL/d(score) of word t taking class y, of position p
        // taking class y, and of class y seeing the (b, e) endpoint difference.
        let mut g_word = Matrix::zeros(n, k);
        let mut g_pos = Matrix::zeros(big_l, k);
        let mut g_diff = vec![0.0; k];
        let mut grad_w = w.zeros_like();
        let mut diff = vec![0.0; d];
        let mut back = vec![0.0; d];
        for e in 1..=n {
            for len in 1..=g.lens_ending_at(e) {
                let b = e - len + 1;
                g_diff.iter_mut().for_each(|x| *x = 0.0);
                let mut any = false;
                for l in 0..g.num_labels() {
                    if !g.in_lattice(e, len, l) {
                        continue;
                    }
                    let gm = g.get(e, len, l);
                    if gm == 0.0 {
                        continue;
                    }
                    any = true;
                    for (i, y) in segment_classes(l, len).enumerate() {
                        g_word.add_at(b - 1 + i, y, gm);
                        g_pos.add_at(i, y, gm);
                        g_diff[y] += gm;
                    }
                }
                if !any || len == 1 {
                    continue;
                }
                for (x, (we, wb)) in diff.iter_mut().zip(w.row(e - 1).iter().zip(w.row(b - 1))) {
                    *x = we - wb;
                }
                back.iter_mut().for_each(|x| *x = 0.0);
                for (y, &gy) in g_diff.iter().enumerate() {
                    if gy == 0.0 {
                        continue;
                    }
                    axpy(&mut grads.class_weights.row_mut(y)[d..2 * d], gy, &diff);
                    axpy(&mut back, gy, self.diff_part(y));
                }
                axpy(grad_w.row_mut(e - 1), 1.0, &back);
                axpy(grad_w.row_mut(b - 1), -1.0, &back);
            }
        }
        for t in 0..n {
            for y in 0..k {
                let gy = g_word.get(t, y);
                if gy == 0.0 {
                    continue;
                }
                axpy(&mut grads.class_weights.row_mut(y)[..d], gy, w.row(t));
                axpy(grad_w.row_mut(t), gy, self.word_part(y));
            }
        }
        for p in 0..big_l {
            for y in 0..k {
                let gy = g_pos.get(p, y);
                if gy == 0.0 {
                    continue;
                }
                axpy(&mut grads.class_weights.row_mut(y)[2 * d..], gy, self.positions.row(p));
                axpy(grads.positions.row_mut(p), gy, self.pos_part(y));
            }
        }
        grad_w
    }

    fn zeros_like(&self) -> Self {
        Self {
            class_weights: self.class_weights.zeros_like(),
            positions: self.positions.zeros_like(),
            dim: self.dim,
            num_types: self.num_types,
        }
    }
}

/// Segment-level-only scorer: `u_l . [w_b ; w_e ; w_e - w_b ; phi(len)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScorer {
    /// `C × (3d + position_dim)`, one row per segment label.
    pub label_weights: Matrix,
    /// `max_len × position_dim`; row `len - 1` embeds the segment length.
    pub lengths: Matrix,
    dim: usize,
}

impl BaselineScorer {
    pub fn zeros(num_types: usize, dim: usize, max_len: usize, position_dim: usize) -> Self {
        Self {
            label_weights: Matrix::zeros(num_types + 1, 3 * dim + position_dim),
            lengths: Matrix::zeros(max_len, position_dim),
            dim,
        }
    }

    pub fn random<R: Rng>(
        num_types: usize,
        dim: usize,
        max_len: usize,
        position_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            label_weights: Matrix::random(num_types + 1, 3 * dim + position_dim, scale, rng),
            lengths: Matrix::random(max_len, position_dim, scale, rng),
            dim,
        }
    }

    fn part(&self, l: usize, i: usize) -> &[f64] {
        let d = self.dim;
        let row = self.label_weights.row(l);
        if i < 3 {
            &row[i * d..(i + 1) * d]
        } else {
            &row[3 * d..]
        }
    }
}

impl Params for BaselineScorer {
    fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("scrf.label_weights", &self.label_weights),
            ("scrf.lengths", &self.lengths),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("scrf.label_weights", &mut self.label_weights),
            ("scrf.lengths", &mut self.lengths),
        ]
    }
}

impl SegmentScorer for BaselineScorer {
    fn max_len(&self) -> usize {
        self.lengths.rows()
    }

    fn num_labels(&self) -> usize {
        self.label_weights.rows()
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn score_table(&self, w: &Matrix) -> SegmentTable {
        assert_eq!(w.cols(), self.dim, "word representation width");
        let n = w.rows();
        let c = self.num_labels();
        let mut table = SegmentTable::new(n, self.max_len(), c);
        let mut begin = Matrix::zeros(n, c);
        let mut end = Matrix::zeros(n, c);
        for t in 0..n {
            for l in 0..c {
                begin.set(t, l, dot(self.part(l, 0), w.row(t)));
                end.set(t, l, dot(self.part(l, 1), w.row(t)));
            }
        }
        let mut diff = vec![0.0; self.dim];
        for e in 1..=n {
            for len in 1..=table.lens_ending_at(e) {
                let b = e - len + 1;
                for (x, (we, wb)) in diff.iter_mut().zip(w.row(e - 1).iter().zip(w.row(b - 1))) {
                    *x = we - wb;
                }
                for l in 0..c {
                    if !table.in_lattice(e, len, l) {
                        continue;
                    }
                    let m = begin.get(b - 1, l)
                        + end.get(e - 1, l)
                        + dot(self.part(l, 2), &diff)
                        + dot(self.part(l, 3), self.lengths.row(len - 1));
                    table.set(e, len, l, m);
                }
            }
        }
        table
    }

    fn segment_score(&self, w: &Matrix, seg: Segment) -> f64 {
        let l = seg.label.index();
        let wb = w.row(seg.begin - 1);
        let we = w.row(seg.end - 1);
        let len = seg.len().min(self.max_len());
        dot(self.part(l, 0), wb)
            + dot(self.part(l, 1), we)
            + self
                .part(l, 2)
                .iter()
                .zip(we.iter().zip(wb))
                .map(|(u, (x, z))| u * (x - z))
                .sum::<f64>()
            + dot(self.part(l, 3), self.lengths.row(len - 1))
    }

    fn backward(&self, w: &Matrix, g: &SegmentTable, grads: &mut Self) -> Matrix {
        let d = self.dim;
        let mut grad_w = w.zeros_like();
        let mut diff = vec![0.0; d];
        for (e, len, l) in g.lattice() {
            let gm = g.get(e, len, l);
            if gm == 0.0 {
                continue;
            }
            let b = e - len + 1;
            for (x, (we, wb)) in diff.iter_mut().zip(w.row(e - 1).iter().zip(w.row(b - 1))) {
                *x = we - wb;
            }
            {
                let row = grads.label_weights.row_mut(l);
                axpy(&mut row[..d], gm, w.row(b - 1));
                axpy(&mut row[d..2 * d], gm, w.row(e - 1));
                axpy(&mut row[2 * d..3 * d], gm, &diff);
                axpy(&mut row[3 * d..], gm, self.lengths.row(len - 1));
            }
            axpy(grads.lengths.row_mut(len - 1), gm, self.part(l, 3));
            axpy(grad_w.row_mut(b - 1), gm, self.part(l, 0));
            axpy(grad_w.row_mut(b - 1), -gm, self.part(l, 2));
            axpy(grad_w.row_mut(e - 1), gm, self.part(l, 1));
            axpy(grad_w.row_mut(e - 1), gm, self.part(l, 2));
        }
        grad_w
    }

    fn zeros_like(&self) -> Self {
        Self {
            label_weights: self.label_weights.zeros_like(),
            lengths: self.lengths.zeros_like(),
            dim: self.dim,
        }
    }
}

/// A semi-Markov CRF layer: a segment scorer plus segment transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiCrf<S> {
    pub scorer: S,
    pub transitions: SegmentTransitions,
}

/// The hybrid semi-Markov CRF.
pub type Hscrf = SemiCrf<HybridScorer>;
/// Segment-level-only baseline.
pub type BaselineScrf = SemiCrf<BaselineScorer>;

impl Hscrf {
    pub fn hybrid_zeros(num_types: usize, dim: usize, max_len: usize, position_dim: usize) -> Self {
        Self {
            scorer: HybridScorer::zeros(num_types, dim, max_len, position_dim),
            transitions: SegmentTransitions::zeros(num_types + 1),
        }
    }

    pub fn hybrid_random<R: Rng>(
        num_types: usize,
        dim: usize,
        max_len: usize,
        position_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            scorer: HybridScorer::random(num_types, dim, max_len, position_dim, scale, rng),
            transitions: SegmentTransitions::random(num_types + 1, scale, rng),
        }
    }
}

impl BaselineScrf {
    pub fn baseline_zeros(num_types: usize, dim: usize, max_len: usize, position_dim: usize) -> Self {
        Self {
            scorer: BaselineScorer::zeros(num_types, dim, max_len, position_dim),
            transitions: SegmentTransitions::zeros(num_types + 1),
        }
    }

    pub fn baseline_random<R: Rng>(
        num_types: usize,
        dim: usize,
        max_len: usize,
        position_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            scorer: BaselineScorer::random(num_types, dim, max_len, position_dim, scale, rng),
            transitions: SegmentTransitions::random(num_types + 1, scale, rng),
        }
    }
}

impl<S: SegmentScorer> Params for SemiCrf<S> {
    fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        let mut v = self.scorer.blocks();
        v.push(("segment.transitions", &self.transitions.transitions));
        v.push(("segment.start", &self.transitions.start));
        v.push(("segment.stop", &self.transitions.stop));
        v
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut v = self.scorer.blocks_mut();
        v.push(("segment.transitions", &mut self.transitions.transitions));
        v.push(("segment.start", &mut self.transitions.start));
        v.push(("segment.stop", &mut self.transitions.stop));
        v
    }
}

impl<S: SegmentScorer> SemiCrf<S> {
    pub fn max_len(&self) -> usize {
        self.scorer.max_len()
    }

    pub fn num_labels(&self) -> usize {
        self.scorer.num_labels()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            scorer: self.scorer.zeros_like(),
            transitions: self.transitions.zeros_like(),
        }
    }

    pub fn score_table(&self, w: &Matrix) -> SegmentTable {
        self.scorer.score_table(w)
    }

    pub fn log_partition(&self, w: &Matrix) -> f64 {
        assert!(w.rows() > 0, "empty sentence");
        lattice_log_partition(&self.score_table(w), &self.transitions)
    }

    fn check_cover(&self, w: &Matrix, s: &Segmentation) -> Result<()> {
        if s.len() != w.rows() {
            return Err(Error::Structure(format!(
                "segmentation covers {} words, sentence has {}",
                s.len(),
                w.rows()
            )));
        }
        if s.segments().iter().any(|x| x.label.index() >= self.num_labels()) {
            return Err(Error::Domain("segment label out of range".into()));
        }
        Ok(())
    }

    fn transition_score(&self, s: &Segmentation) -> f64 {
        let tr = &self.transitions;
        let segs = s.segments();
        let mut total = tr.start.get(0, segs[0].label.index())
            + tr.stop.get(0, segs[segs.len() - 1].label.index());
        for pair in segs.windows(2) {
            total += tr.transitions.get(pair[0].label.index(), pair[1].label.index());
        }
        total
    }

    /// Unnormalized score of any structurally valid segmentation, including
    /// ones with entities longer than the lattice allows.
    pub fn score_segmentation(&self, w: &Matrix, s: &Segmentation) -> Result<f64> {
        self.check_cover(w, s)?;
        let m: f64 = s
            .segments()
            .iter()
            .map(|&seg| self.scorer.segment_score(w, seg))
            .sum();
        Ok(m + self.transition_score(s))
    }

    /// `log Z - score(s)` for any structurally valid segmentation. Only
    /// guaranteed non-negative when `s` lies in the lattice.
    pub fn cross_nll(&self, w: &Matrix, s: &Segmentation) -> Result<f64> {
        Ok(self.log_partition(w) - self.score_segmentation(w, s)?)
    }

    fn check_lattice(&self, s: &Segmentation) -> Result<()> {
        if !s.fits_lattice(self.max_len()) {
            return Err(Error::Domain(format!(
                "entity of length {} exceeds maximum segment length {}",
                s.max_entity_len(),
                self.max_len()
            )));
        }
        Ok(())
    }

    /// Negative log-likelihood of a lattice segmentation.
    pub fn nll(&self, w: &Matrix, s: &Segmentation) -> Result<f64> {
        self.check_cover(w, s)?;
        self.check_lattice(s)?;
        self.cross_nll(w, s)
    }

    pub fn marginals(&self, w: &Matrix) -> LatticeMarginals {
        lattice_marginals(&self.score_table(w), &self.transitions)
    }

    /// NLL of `s`, adding parameter gradients into `grads` and returning
    /// `dNLL/dw`.
    pub fn nll_backward(&self, w: &Matrix, s: &Segmentation, grads: &mut Self) -> Result<(f64, Matrix)> {
        self.check_cover(w, s)?;
        self.check_lattice(s)?;
        let table = self.score_table(w);
        let marg = lattice_marginals(&table, &self.transitions);
        let gold: f64 = s
            .segments()
            .iter()
            .map(|x| table.get(x.end, x.len(), x.label.index()))
            .sum::<f64>()
            + self.transition_score(s);

        let mut g = marg.segments;
        for x in s.segments() {
            g.add(x.end, x.len(), x.label.index(), -1.0);
        }
        let grad_w = self.scorer.backward(w, &g, &mut grads.scorer);

        let gt = &mut grads.transitions;
        gt.transitions.axpy(1.0, &marg.transitions);
        gt.start.axpy(1.0, &marg.start);
        gt.stop.axpy(1.0, &marg.stop);
        let segs = s.segments();
        gt.start.add_at(0, segs[0].label.index(), -1.0);
        gt.stop.add_at(0, segs[segs.len() - 1].label.index(), -1.0);
        for pair in segs.windows(2) {
            gt.transitions
                .add_at(pair[0].label.index(), pair[1].label.index(), -1.0);
        }
        Ok((marg.log_z - gold, grad_w))
    }

    pub fn viterbi(&self, w: &Matrix) -> (Segmentation, f64) {
        assert!(w.rows() > 0, "empty sentence");
        lattice_viterbi(&self.score_table(w), &self.transitions)
    }
}
