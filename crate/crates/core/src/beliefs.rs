//! Probabilistic primitives shared by every layer: categorical beliefs,
//! Dirichlet counts over categorical maps, and Gaussian beliefs.
//!
//! Dirichlet tensors are normalised along axis 0: every lane along the first
//! axis is one categorical distribution (an outcome column of a likelihood,
//! a next-state column of a transition tensor).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{ArrayD, Axis};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

/// Tolerance on probability sums, used by every validation in the crate.
pub const PROB_TOL: f64 = 1e-9;

/// Probabilities are clamped to this floor before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-16;

#[inline]
pub fn safe_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// Numerically stable `ln Σ exp(x_i)`. Returns `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    /// Wraps an already normalised probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::ZeroMass);
        }
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite);
        }
        if probs.iter().any(|&p| p < 0.0) {
            return Err(Error::ZeroMass);
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidValue(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "categorical needs at least one outcome");
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        assert!(index < n, "one-hot index {index} out of range {n}");
        let mut probs = vec![0.0; n];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

impl TryFrom<Vec<f64>> for Categorical {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Categorical::new(v)
    }
}

impl From<Categorical> for Vec<f64> {
    fn from(c: Categorical) -> Self {
        c.probs
    }
}

pub fn normalize(v: &[f64]) -> Result<Categorical> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite);
    }
    if v.is_empty() || v.iter().any(|&x| x < 0.0) {
        return Err(Error::ZeroMass);
    }
    let sum: f64 = v.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::ZeroMass);
    }
    Ok(Categorical {
        probs: v.iter().map(|x| x / sum).collect(),
    })
}

/// KL(p‖q) with the convention 0·ln 0 = 0.
pub fn kl_categorical(p: &Categorical, q: &Categorical) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::SupportMismatch { index: i });
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl.max(0.0))
}

pub fn entropy(p: &Categorical) -> f64 {
    entropy_of(&p.probs)
}

/// Entropy of an unchecked probability slice (0·ln 0 = 0).
pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum();
    h.max(0.0)
}

/// Softmax of `precision · logits`, computed with max subtraction.
pub fn softmax(logits: &[f64], precision: f64) -> Result<Categorical> {
    if logits.is_empty() {
        return Err(Error::ZeroMass);
    }
    if !precision.is_finite() || logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    if precision <= 0.0 {
        return Err(Error::InvalidValue(format!(
            "precision must be positive, got {precision}"
        )));
    }
    Ok(Categorical {
        probs: softmax_unchecked(logits, precision),
    })
}

pub(crate) fn softmax_unchecked(logits: &[f64], precision: f64) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|x| precision * x)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|x| (precision * x - max).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Concentration parameters of independent Dirichlet distributions, one per
/// lane along axis 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletCounts {
    counts: ArrayD<f64>,
}

impl DirichletCounts {
    pub fn new(counts: ArrayD<f64>) -> Result<Self> {
        if counts.ndim() == 0 || counts.len() == 0 {
            return Err(Error::ShapeMismatch("empty Dirichlet tensor".into()));
        }
        if counts.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite);
        }
        if counts.iter().any(|&c| c < 0.0) {
            return Err(Error::InvalidValue("negative Dirichlet count".into()));
        }
        for (slice, lane) in counts.lanes(Axis(0)).into_iter().enumerate() {
            if lane.sum() <= 0.0 {
                return Err(Error::ZeroSlice { slice });
            }
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &ArrayD<f64> {
        &self.counts
    }

    pub(crate) fn counts_mut(&mut self) -> &mut ArrayD<f64> {
        &mut self.counts
    }

    pub fn shape(&self) -> &[usize] {
        self.counts.shape()
    }

    /// Posterior mean: counts normalised along axis 0.
    pub fn mean(&self) -> ArrayD<f64> {
        let mut out = self.counts.clone();
        for mut lane in out.lanes_mut(Axis(0)) {
            let s = lane.sum();
            lane.mapv_inplace(|c| c / s);
        }
        out
    }

    /// E[ln θ] entrywise; see [`expected_log_params`].
    pub fn expected_log(&self) -> ArrayD<f64> {
        let mut out = self.counts.clone();
        for mut lane in out.lanes_mut(Axis(0)) {
            let psi_total = digamma(lane.sum());
            let floor = LOG_FLOOR.ln();
            lane.mapv_inplace(|c| {
                if c > 0.0 {
                    (digamma(c) - psi_total).max(floor)
                } else {
                    floor
                }
            });
        }
        out
    }

    /// Σ over lanes of KL(Dir(self) ‖ Dir(prior)).
    pub fn kl_from(&self, prior: &DirichletCounts) -> Result<f64> {
        if self.shape() != prior.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                prior.shape()
            )));
        }
        let mut total = 0.0;
        for (q, p) in self
            .counts
            .lanes(Axis(0))
            .into_iter()
            .zip(prior.counts.lanes(Axis(0)))
        {
            let q0: f64 = q.sum();
            let p0: f64 = p.sum();
            let psi0 = digamma(q0);
            let mut kl = ln_gamma(q0) - ln_gamma(p0);
            for (&qi, &pi) in q.iter().zip(p.iter()) {
                if qi > 0.0 {
                    kl += ln_gamma(pi) - ln_gamma(qi) + (qi - pi) * (digamma(qi) - psi0);
                }
            }
            total += kl.max(0.0);
        }
        Ok(total)
    }
}

/// Entrywise E[ln θ] = ψ(count) − ψ(slice sum) under the Dirichlet.
pub fn expected_log_params(counts: &DirichletCounts) -> Result<ArrayD<f64>> {
    Ok(counts.expected_log())
}

/// Expected KL between the Dirichlet after one extra count at `outcome` and
/// the current Dirichlet, `ln a0 − ln a_o + ψ(a_o + 1) − ψ(a0 + 1)`.
pub(crate) fn dirichlet_increment_kl(alpha: &[f64], outcome: usize) -> f64 {
    let a0: f64 = alpha.iter().sum();
    let ao = alpha[outcome];
    if ao <= 0.0 {
        return 0.0;
    }
    (a0.ln() - ao.ln() + digamma(ao + 1.0) - digamma(a0 + 1.0)).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: covariance.nrows(),
            });
        }
        check_psd(&covariance, "covariance")?;
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Symmetric within [`PROB_TOL`] and eigenvalues ≥ −[`PROB_TOL`].
pub(crate) fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    if !m.is_square() {
        return Err(Error::ShapeMismatch(format!("{what} is not square")));
    }
    if (m - m.transpose()).amax() > PROB_TOL {
        return Err(Error::InvalidValue(format!("{what} is not symmetric")));
    }
    if m.nrows() > 0 {
        let eig = SymmetricEigen::new(m.clone());
        if eig.eigenvalues.min() < -PROB_TOL {
            return Err(Error::InvalidValue(format!(
                "{what} is not positive semidefinite"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2};
    use proptest::prelude::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[2.0, 2.0]).unwrap().probs(), &[0.5, 0.5]);
        assert_eq!(normalize(&[1.0, 0.0, 0.0]).unwrap().probs(), &[1.0, 0.0, 0.0]);
        assert_eq!(normalize(&[1.0, 3.0]).unwrap().probs(), &[0.25, 0.75]);
        assert_eq!(normalize(&[0.0, 0.0]), Err(Error::ZeroMass));
        assert_eq!(normalize(&[1.0, -0.5]), Err(Error::ZeroMass));
    }

    #[test]
    fn kl_examples() {
        let p = Categorical::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(kl_categorical(&p, &p).unwrap(), 0.0);
        let p = Categorical::new(vec![1.0, 0.0]).unwrap();
        let q = Categorical::uniform(2);
        assert_abs_diff_eq!(kl_categorical(&p, &q).unwrap(), 2f64.ln(), epsilon = 1e-15);
        // direct summation: 0.2 ln(0.2/0.6) + 0.8 ln(0.8/0.4)
        let p = Categorical::new(vec![0.2, 0.8]).unwrap();
        let q = Categorical::new(vec![0.6, 0.4]).unwrap();
        let oracle = 0.2 * (0.2f64 / 0.6).ln() + 0.8 * (0.8f64 / 0.4).ln();
        assert_abs_diff_eq!(kl_categorical(&p, &q).unwrap(), oracle, epsilon = 1e-15);
        assert_abs_diff_eq!(oracle, 0.334_795_286_714_334_3, epsilon = 1e-12);
    }

    #[test]
    fn kl_errors() {
        let p = Categorical::new(vec![0.5, 0.5]).unwrap();
        let q = Categorical::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(kl_categorical(&p, &q), Err(Error::SupportMismatch { index: 1 }));
        let r = Categorical::uniform(3);
        assert!(matches!(
            kl_categorical(&p, &r),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn expected_log_params_examples() {
        let sym = DirichletCounts::new(arr1(&[1.0, 1.0]).into_dyn()).unwrap();
        let e = expected_log_params(&sym).unwrap();
        assert_eq!(e[[0]], e[[1]]);

        let big = DirichletCounts::new(arr1(&[1e6, 1e6]).into_dyn()).unwrap();
        let e = expected_log_params(&big).unwrap();
        assert_abs_diff_eq!(e[[0]], 0.5f64.ln(), epsilon = 1e-5);

        // ψ(2) − ψ(3) = −1/2 and ψ(1) − ψ(3) = −3/2 (recurrence ψ(x+1) = ψ(x) + 1/x).
        let c = DirichletCounts::new(arr1(&[2.0, 1.0]).into_dyn()).unwrap();
        let e = expected_log_params(&c).unwrap();
        assert_abs_diff_eq!(e[[0]], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(e[[1]], -1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(digamma(1.0), -EULER_GAMMA, epsilon = 1e-12);
    }

    #[test]
    fn dirichlet_slices_are_axis_zero_lanes() {
        let c = DirichletCounts::new(arr2(&[[1.0, 3.0], [1.0, 1.0]]).into_dyn()).unwrap();
        let m = c.mean();
        assert_abs_diff_eq!(m[[0, 0]], 0.5);
        assert_abs_diff_eq!(m[[0, 1]], 0.75);
        let bad = DirichletCounts::new(arr2(&[[1.0, 0.0], [1.0, 0.0]]).into_dyn());
        assert_eq!(bad, Err(Error::ZeroSlice { slice: 1 }));
    }

    #[test]
    fn dirichlet_kl_zero_for_identical() {
        let c = DirichletCounts::new(arr2(&[[1.0, 3.0], [2.0, 1.0]]).into_dyn()).unwrap();
        assert_abs_diff_eq!(c.kl_from(&c).unwrap(), 0.0, epsilon = 1e-12);
        let prior = DirichletCounts::new(arr2(&[[1.0, 1.0], [1.0, 1.0]]).into_dyn()).unwrap();
        assert!(c.kl_from(&prior).unwrap() > 0.0);
    }

    #[test]
    fn increment_kl_matches_general_dirichlet_kl() {
        let alpha = [2.0, 0.5, 3.0];
        for o in 0..3 {
            let mut post = alpha;
            post[o] += 1.0;
            let a = DirichletCounts::new(arr1(&post).into_dyn()).unwrap();
            let b = DirichletCounts::new(arr1(&alpha).into_dyn()).unwrap();
            assert_abs_diff_eq!(
                dirichlet_increment_kl(&alpha, o),
                a.kl_from(&b).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for p in u.probs() {
            assert_abs_diff_eq!(*p, 1.0 / 3.0, epsilon = 1e-15);
        }
        let s = softmax(&[10.0, 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(s.probs()[0], 1.0 / (1.0 + (-10f64).exp()), epsilon = 1e-15);
        assert_abs_diff_eq!(s.probs()[0], 0.99995, epsilon = 1e-5);
        assert_eq!(softmax(&[f64::NAN, 0.0], 1.0), Err(Error::NonFinite));
        assert_eq!(softmax(&[f64::INFINITY], 1.0), Err(Error::NonFinite));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&Categorical::one_hot(2, 0)), 0.0);
        assert_abs_diff_eq!(entropy(&Categorical::uniform(2)), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(entropy(&Categorical::uniform(4)), 4f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn gaussian_validation() {
        let ok = GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2));
        assert!(ok.is_ok());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(GaussianBelief::new(DVector::zeros(2), asym).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(GaussianBelief::new(DVector::zeros(2), neg).is_err());
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn normalize_idempotent(v in prop::collection::vec(0.0f64..10.0, 1..8)) {
            prop_assume!(v.iter().sum::<f64>() > 0.0);
            let once = normalize(&v).unwrap();
            let twice = normalize(once.probs()).unwrap();
            for (a, b) in once.probs().iter().zip(twice.probs()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn kl_self_is_exactly_zero(p in (1usize..8).prop_flat_map(simplex)) {
            let c = Categorical::new(p).unwrap();
            prop_assert_eq!(kl_categorical(&c, &c).unwrap(), 0.0);
        }

        #[test]
        fn softmax_is_valid_categorical(logits in prop::collection::vec(-50.0f64..50.0, 1..10)) {
            let s = softmax(&logits, 1.0).unwrap();
            prop_assert!(Categorical::new(s.into_vec()).is_ok());
        }

        #[test]
        fn softmax_shift_invariant(logits in prop::collection::vec(-50.0f64..50.0, 1..10), c in -100.0f64..100.0) {
            let a = softmax(&logits, 1.0).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|x| x + c).collect();
            let b = softmax(&shifted, 1.0).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn entropy_bounded_by_uniform(p in (1usize..10).prop_flat_map(simplex)) {
            let n = p.len();
            let c = Categorical::new(p).unwrap();
            prop_assert!(entropy(&c) <= (n as f64).ln() + 1e-12);
        }
    }
}
