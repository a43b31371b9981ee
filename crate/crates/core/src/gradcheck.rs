//! Central finite-difference checks of analytic gradients.

use std::fmt;

use serde::Serialize;

use crate::math::{Matrix, Params};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub name: String,
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` over the block,
    /// using Euclidean norms; zero when both gradients vanish.
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
    pub passed: bool,
}

impl fmt::Display for BlockReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<28} rel={:.3e} abs={:.3e} n={}",
            if self.passed { "ok" } else { "FAIL" },
            self.name,
            self.relative_error,
            self.max_abs_error,
            self.entries
        )
    }
}

/// A bare matrix as a parameter block, for checking input gradients.
#[derive(Debug, Clone)]
pub struct Input(pub Matrix);

impl Params for Input {
    fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
        vec![("input.w", &self.0)]
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![("input.w", &mut self.0)]
    }
}

fn perturb<P: Params>(params: &mut P, block: usize, idx: usize, delta: f64) {
    params.blocks_mut()[block].1.as_mut_slice()[idx] += delta;
}

fn set<P: Params>(params: &mut P, block: usize, idx: usize, v: f64) {
    params.blocks_mut()[block].1.as_mut_slice()[idx] = v;
}

/// Compares `analytic` against central differences of `loss` around
/// `params`, block by block. Entries pinned to `-inf` are skipped.
pub fn check<P, A, F>(params: &mut P, analytic: &A, mut loss: F, step: f64, tolerance: f64) -> Vec<BlockReport>
where
    P: Params,
    A: Params,
    F: FnMut(&P) -> f64,
{
    let shapes: Vec<(&'static str, usize)> = params
        .blocks()
        .iter()
        .map(|(n, m)| (*n, m.as_slice().len()))
        .collect();
    let analytic_blocks = analytic.blocks();
    let mut reports = Vec::with_capacity(shapes.len());
    for (b, (name, len)) in shapes.into_iter().enumerate() {
        let (_, a) = analytic_blocks[b];
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        let mut max_abs = 0.0f64;
        let mut entries = 0;
        for i in 0..len {
            let orig = params.blocks()[b].1.as_slice()[i];
            if !orig.is_finite() {
                continue;
            }
            perturb(params, b, i, step);
            let up = loss(params);
            set(params, b, i, orig);
            perturb(params, b, i, -step);
            let down = loss(params);
            set(params, b, i, orig);
            let numeric = (up - down) / (2.0 * step);
            let ana = a.as_slice()[i];
            diff_sq += (ana - numeric).powi(2);
            a_sq += ana * ana;
            n_sq += numeric * numeric;
            max_abs = max_abs.max((ana - numeric).abs());
            entries += 1;
        }
        let denom = a_sq.sqrt().max(n_sq.sqrt());
        let relative_error = if denom == 0.0 { 0.0 } else { diff_sq.sqrt() / denom };
        reports.push(BlockReport {
            name: name.to_string(),
            relative_error,
            max_abs_error: max_abs,
            entries,
            passed: relative_error <= tolerance,
        });
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct Quad(Matrix);

    impl Params for Quad {
        fn blocks(&self) -> Vec<(&'static str, &Matrix)> {
            vec![("q", &self.0)]
        }
        fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
            vec![("q", &mut self.0)]
        }
    }

    fn loss(q: &Quad) -> f64 {
        q.0.as_slice().iter().map(|x| x * x * x).sum()
    }

    #[test]
    fn correct_gradient_passes() {
        let mut q = Quad(Matrix::from_rows(&[vec![1.0, -2.0, 0.5]]));
        let g = Quad(Matrix::from_rows(&[vec![3.0, 12.0, 0.75]]));
        let r = check(&mut q, &g, loss, DEFAULT_STEP, DEFAULT_TOLERANCE);
        assert!(r[0].passed, "{}", r[0]);
        // parameters restored
        assert_eq!(q.0.as_slice(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn wrong_gradient_fails() {
        let mut q = Quad(Matrix::from_rows(&[vec![1.0, -2.0, 0.5]]));
        let g = Quad(Matrix::from_rows(&[vec![3.0, 12.0, 0.70]]));
        let r = check(&mut q, &g, loss, DEFAULT_STEP, DEFAULT_TOLERANCE);
        assert!(!r[0].passed);
    }

    #[test]
    fn pinned_entries_skipped() {
        let mut q = Quad(Matrix::from_rows(&[vec![1.0, f64::NEG_INFINITY]]));
        let g = Quad(Matrix::from_rows(&[vec![3.0, 0.0]]));
        let r = check(&mut q, &g, |q| q.0.get(0, 0).powi(3), DEFAULT_STEP, DEFAULT_TOLERANCE);
        assert_eq!(r[0].entries, 1);
        assert!(r[0].passed);
    }
}
