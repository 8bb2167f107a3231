//! Combining selected source matrices into one supervision matrix.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{FuseError, Result};
use crate::numcore::ProbMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    /// `Σ_j p̂_j · P_j` with the renormalized selection weights.
    Weighted,
    /// Uniform weights. The trainer applies it to all M sources, bypassing
    /// the selection.
    Average,
    /// Per position, the row of the most confident selected source.
    Maximum,
    /// Selection active, but weights replaced by `1/K`.
    WeightedWithoutSelection,
}

impl FusionMethod {
    /// Whether the fused matrix depends on the selection weights, i.e.
    /// whether the fusion loss reaches the selection network.
    pub fn uses_weights(self) -> bool {
        matches!(self, FusionMethod::Weighted)
    }
}

fn check_shapes(selected: &[&ProbMatrix]) -> Result<(usize, usize)> {
    let first = selected
        .first()
        .ok_or_else(|| FuseError::Dimension("no matrices to fuse".into()))?;
    let dim = first.dim();
    if let Some(bad) = selected.iter().find(|p| p.dim() != dim) {
        return Err(FuseError::Dimension(format!(
            "matrix {:?} does not match {:?}",
            bad.dim(),
            dim
        )));
    }
    Ok(dim)
}

/// Convex combination `Σ_j w_j · P_j`.
pub fn fuse_weighted(selected: &[&ProbMatrix], weights: &[f64]) -> Result<ProbMatrix> {
    let dim = check_shapes(selected)?;
    if weights.len() != selected.len() {
        return Err(FuseError::Dimension(format!(
            "{} weights for {} matrices",
            weights.len(),
            selected.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 || weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(FuseError::InvalidDistribution(format!(
            "fusion weights must be a probability vector, sum {total}"
        )));
    }
    if let [only] = selected {
        if weights[0] == 1.0 {
            return Ok((*only).clone());
        }
    }
    let mut out = Array2::<f64>::zeros(dim);
    for (p, &w) in selected.iter().zip(weights) {
        out.scaled_add(w, &p.view());
    }
    // weights within 1e-6 of the simplex; absorb the slack per row
    if (total - 1.0).abs() > 1e-12 {
        return ProbMatrix::normalized(out);
    }
    ProbMatrix::new(out)
}

pub fn fuse_average(selected: &[&ProbMatrix]) -> Result<ProbMatrix> {
    let k = selected.len().max(1);
    fuse_weighted(selected, &vec![1.0 / k as f64; selected.len()])
}

/// Winner-take-all per position by top-token confidence (lowest index on
/// ties), rows renormalized.
pub fn fuse_max(selected: &[&ProbMatrix]) -> Result<ProbMatrix> {
    let (n, v) = check_shapes(selected)?;
    let mut out = Array2::zeros((n, v));
    for pos in 0..n {
        let peak = |p: &ProbMatrix| p.row(pos).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut best = 0;
        for (j, p) in selected.iter().enumerate() {
            if peak(p) > peak(selected[best]) {
                best = j;
            }
        }
        out.row_mut(pos).assign(&selected[best].row(pos));
    }
    ProbMatrix::normalized(out)
}

/// Fuses with the given method. `weights` are the renormalized selection
/// weights aligned with `selected` (used only by [`FusionMethod::Weighted`]).
pub fn fuse(method: FusionMethod, selected: &[&ProbMatrix], weights: &[f64]) -> Result<ProbMatrix> {
    match method {
        FusionMethod::Weighted => fuse_weighted(selected, weights),
        FusionMethod::Average | FusionMethod::WeightedWithoutSelection => fuse_average(selected),
        FusionMethod::Maximum => fuse_max(selected),
    }
}

/// `∂L/∂w_j = ⟨upstream, P_j⟩` for the weighted fusion.
pub fn fuse_backward(selected: &[&ProbMatrix], upstream: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let dim = check_shapes(selected)?;
    if upstream.dim() != dim {
        return Err(FuseError::Dimension(format!(
            "upstream {:?} vs fused {:?}",
            upstream.dim(),
            dim
        )));
    }
    Ok(selected
        .iter()
        .map(|p| (&p.view() * &upstream).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(n: usize, v: usize, seed: u64, tag: u64) -> ProbMatrix {
        let mut r = rng::stream(seed, "test.fusion", &[tag]);
        ProbMatrix::normalized(Array2::from_shape_fn((n, v), |_| r.random_range(0.0..1.0f64) + 1e-3))
            .unwrap()
    }

    #[test]
    fn weighted_examples() {
        let a = ProbMatrix::new(array![[0.8, 0.2]]).unwrap();
        let b = ProbMatrix::new(array![[0.2, 0.8]]).unwrap();
        assert_eq!(fuse_weighted(&[&a], &[1.0]).unwrap(), a);
        let f = fuse_weighted(&[&a, &b], &[0.75, 0.25]).unwrap();
        assert!((f.row(0)[0] - 0.65).abs() < 1e-15 && (f.row(0)[1] - 0.35).abs() < 1e-15);
        let same = fuse_weighted(&[&a, &a, &a], &[0.2, 0.5, 0.3]).unwrap();
        for (x, y) in same.view().iter().zip(a.view().iter()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(matches!(fuse_weighted(&[&a, &b], &[1.0]), Err(FuseError::Dimension(_))));
        let c = ProbMatrix::uniform(2, 2);
        assert!(fuse_weighted(&[&a, &c], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn average_examples() {
        let a = ProbMatrix::new(array![[1.0, 0.0]]).unwrap();
        let b = ProbMatrix::new(array![[0.0, 1.0]]).unwrap();
        assert_eq!(fuse_average(&[&a, &b]).unwrap().row(0).to_vec(), vec![0.5, 0.5]);

        let ms: Vec<ProbMatrix> = (0..3).map(|t| random_matrix(4, 5, 1, t)).collect();
        let refs: Vec<&ProbMatrix> = ms.iter().collect();
        let avg = fuse_average(&refs).unwrap();
        assert_eq!(avg, fuse_weighted(&refs, &[1.0 / 3.0; 3]).unwrap());
        for n in 0..4 {
            for v in 0..5 {
                let hand = (ms[0].row(n)[v] + ms[1].row(n)[v] + ms[2].row(n)[v]) / 3.0;
                assert!((avg.row(n)[v] - hand).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn max_examples() {
        let a = ProbMatrix::new(array![[0.9, 0.1], [0.5, 0.5]]).unwrap();
        let b = ProbMatrix::new(array![[0.6, 0.4], [0.3, 0.7]]).unwrap();
        assert_eq!(fuse_max(&[&a]).unwrap(), a);
        let f = fuse_max(&[&a, &b]).unwrap();
        assert_eq!(f.row(0).to_vec(), vec![0.9, 0.1]);
        assert_eq!(f.row(1).to_vec(), vec![0.3, 0.7]);

        let ms: Vec<ProbMatrix> = (0..3).map(|t| random_matrix(6, 4, 2, t)).collect();
        let refs: Vec<&ProbMatrix> = ms.iter().collect();
        let f = fuse_max(&refs).unwrap();
        for n in 0..6 {
            // exhaustive scan: which source has the largest single entry in row n
            let mut best = (f64::MIN, 0);
            for (j, m) in ms.iter().enumerate() {
                for &x in m.row(n) {
                    if x > best.0 {
                        best = (x, j);
                    }
                }
            }
            for (x, y) in f.row(n).iter().zip(ms[best.1].row(n)) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn backward_examples() {
        let ms: Vec<ProbMatrix> = (0..2).map(|t| random_matrix(3, 4, 3, t)).collect();
        let refs: Vec<&ProbMatrix> = ms.iter().collect();
        let zero = fuse_backward(&refs, Array2::zeros((3, 4)).view()).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);

        let mut r = rng::stream(3, "up", &[]);
        let up = Array2::from_shape_fn((3, 4), |_| r.random_range(-1.0..1.0));
        let g = fuse_backward(&refs, up.view()).unwrap();
        // finite differences on the unconstrained linear map w ↦ ⟨up, Σ w_j P_j⟩
        let w = [0.3, 0.7];
        let f = |w: [f64; 2]| {
            let mut acc = Array2::<f64>::zeros((3, 4));
            acc.scaled_add(w[0], &ms[0].view());
            acc.scaled_add(w[1], &ms[1].view());
            (&acc * &up).sum()
        };
        for j in 0..2 {
            let h = 1e-6;
            let mut hi = w;
            let mut lo = w;
            hi[j] += h;
            lo[j] -= h;
            let fd = (f(hi) - f(lo)) / (2.0 * h);
            assert!((g[j] - fd).abs() / fd.abs().max(1e-12) < 1e-6);
        }

        let twins = [&ms[0], &ms[0]];
        let g = fuse_backward(&twins, up.view()).unwrap();
        assert_eq!(g[0], g[1]);
        assert!(fuse_backward(&refs, Array2::zeros((2, 4)).view()).is_err());
    }

    proptest! {
        #[test]
        fn weighted_is_permutation_equivariant_and_linear(seed in 0u64..500, k in 1usize..5) {
            let ms: Vec<ProbMatrix> = (0..k as u64).map(|t| random_matrix(3, 5, seed, t)).collect();
            let mut r = rng::stream(seed, "w", &[]);
            let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let refs: Vec<&ProbMatrix> = ms.iter().collect();
            let base = fuse_weighted(&refs, &w).unwrap();

            let rev: Vec<&ProbMatrix> = refs.iter().rev().copied().collect();
            let wrev: Vec<f64> = w.iter().rev().copied().collect();
            let other = fuse_weighted(&rev, &wrev).unwrap();
            for (a, b) in base.view().iter().zip(other.view().iter()) {
                prop_assert!((a - b).abs() < 1e-14);
            }

            // superposition in P_0 with weights fixed: P_0 = ½A + ½B
            let a = random_matrix(3, 5, seed, 100);
            let b = random_matrix(3, 5, seed, 101);
            let mix = fuse_weighted(&[&a, &b], &[0.5, 0.5]).unwrap();
            let mut with_mix = refs.clone();
            with_mix[0] = &mix;
            let lhs = fuse_weighted(&with_mix, &w).unwrap();
            let mut with_a = refs.clone();
            with_a[0] = &a;
            let mut with_b = refs.clone();
            with_b[0] = &b;
            let fa = fuse_weighted(&with_a, &w).unwrap();
            let fb = fuse_weighted(&with_b, &w).unwrap();
            for ((l, x), y) in lhs.view().iter().zip(fa.view().iter()).zip(fb.view().iter()) {
                prop_assert!((l - 0.5 * (x + y)).abs() < 1e-14);
            }
        }
    }
}
