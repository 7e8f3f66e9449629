//! SDE models `dX = b(X) dt + σ dB` and sampling checkers for the drift
//! conditions the scheme relies on.

use crate::error::{input, Error, Result};
use crate::rng::{self, TAG_CHECK};
use rayon::prelude::*;

/// Drift evaluators known to the registry. Every shipped drift acts
/// coordinate-wise, so each coordinate has a scalar marginal drift.
#[derive(Clone, Debug, PartialEq)]
pub enum Drift {
    /// `b(x) = x − x³` in one dimension.
    DoubleWell,
    /// `b(x, y) = (sin(2x) − x, −y)`.
    Sin2,
    /// `b_i(x) = Σ_k coeffs[i][k] · x_i^k`.
    Polynomial(Vec<Vec<f64>>),
}

impl Drift {
    fn coordinate(&self, i: usize, u: f64) -> f64 {
        match self {
            Drift::DoubleWell => u - u * u * u,
            Drift::Sin2 => {
                if i == 0 {
                    (2.0 * u).sin() - u
                } else {
                    -u
                }
            }
            Drift::Polynomial(c) => c[i].iter().rev().fold(0.0, |acc, &a| acc * u + a),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftModel {
    name: String,
    dim: usize,
    drift: Drift,
    sigma: f64,
    drift_at_origin_norm: f64,
}

/// `(L, K, R)` of the contractivity-at-infinity condition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DissipativityConstants {
    pub l: f64,
    pub k: f64,
    pub r: f64,
}

impl DissipativityConstants {
    pub fn new(l: f64, k: f64, r: f64) -> Result<Self> {
        if !(l > 0.0 && k > 0.0 && r >= 0.0) || !(l.is_finite() && k.is_finite() && r.is_finite()) {
            return input(format!("dissipativity constants need L > 0, K > 0, R >= 0 (got {l}, {k}, {r})"));
        }
        Ok(DissipativityConstants { l, k, r })
    }
}

/// `(L*, ℓ)` of the polynomial-growth Lipschitz condition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrowthConstants {
    pub lstar: f64,
    pub ell: f64,
}

impl GrowthConstants {
    pub fn new(lstar: f64, ell: f64) -> Result<Self> {
        if !(lstar > 0.0 && ell > 0.0) || !(lstar.is_finite() && ell.is_finite()) {
            return input(format!("growth constants need L* > 0, ell > 0 (got {lstar}, {ell})"));
        }
        Ok(GrowthConstants { lstar, ell })
    }
}

impl DriftModel {
    fn build(name: &str, dim: usize, drift: Drift, sigma: f64) -> Result<Self> {
        if dim == 0 {
            return input("model dimension must be positive");
        }
        if sigma == 0.0 || !sigma.is_finite() {
            return input(format!("sigma must be a nonzero finite number (got {sigma})"));
        }
        let mut model = DriftModel { name: name.to_string(), dim, drift, sigma, drift_at_origin_norm: 0.0 };
        let b0 = model.eval_drift(&vec![0.0; dim])?;
        model.drift_at_origin_norm = norm(&b0);
        Ok(model)
    }

    /// `dx = (x − x³) dt + dB`.
    pub fn double_well() -> Self {
        Self::build("double_well", 1, Drift::DoubleWell, 1.0).expect("built-in model")
    }

    /// `dx = (sin 2x − x) dt + dB¹`, `dy = −y dt + dB²`.
    pub fn sin2() -> Self {
        Self::build("sin2", 2, Drift::Sin2, 1.0).expect("built-in model")
    }

    /// Coordinate-wise polynomial drift; `coeffs[i][k]` multiplies `x_i^k`.
    pub fn polynomial(coeffs: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        if coeffs.is_empty() || coeffs.iter().any(|c| c.is_empty()) {
            return input("polynomial drift needs a nonempty coefficient list per coordinate");
        }
        if coeffs.iter().flatten().any(|c| !c.is_finite()) {
            return input("polynomial coefficients must be finite");
        }
        let dim = coeffs.len();
        Self::build("polynomial", dim, Drift::Polynomial(coeffs), sigma)
    }

    /// Looks up a registered model name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "double_well" => Ok(Self::double_well()),
            "sin2" => Ok(Self::sin2()),
            other => Err(Error::Config(format!(
                "unknown model '{other}' (registered: double_well, sin2; polynomial drifts are given by coefficients)"
            ))),
        }
    }

    pub fn with_sigma(self, sigma: f64) -> Result<Self> {
        let DriftModel { name, dim, drift, .. } = self;
        Self::build(&name, dim, drift, sigma)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn drift(&self) -> &Drift {
        &self.drift
    }

    pub fn drift_at_origin_norm(&self) -> f64 {
        self.drift_at_origin_norm
    }

    /// Constants for which the shipped models are known to satisfy both drift conditions.
    pub fn reference_constants(&self) -> Option<(DissipativityConstants, GrowthConstants)> {
        match self.drift {
            Drift::DoubleWell => Some((DissipativityConstants { l: 1.0, k: 2.0, r: 3.0 }, GrowthConstants { lstar: 1.5, ell: 2.0 })),
            Drift::Sin2 => Some((DissipativityConstants { l: 1.0, k: 0.5, r: 4.0 }, GrowthConstants { lstar: 3.0, ell: 1.0 })),
            Drift::Polynomial(_) => None,
        }
    }

    /// `b(x)`.
    pub fn eval_drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return input(format!("point has dimension {}, model has {}", x.len(), self.dim));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return input("drift evaluated at a non-finite point");
        }
        let mut out = vec![0.0; self.dim];
        self.drift_into(x, &mut out);
        Ok(out)
    }

    /// Unchecked `b(x)` into a caller buffer; the hot path of the integrators.
    #[inline]
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, (o, &u)) in out.iter_mut().zip(x).enumerate() {
            *o = self.drift.coordinate(i, u);
        }
    }

    /// The scalar drift acting on coordinate `coord`.
    pub fn marginal_drift(&self, coord: usize) -> Result<impl Fn(f64) -> f64 + '_> {
        if coord >= self.dim {
            return input(format!("coordinate {coord} out of range for dimension {}", self.dim));
        }
        Ok(move |u: f64| self.drift.coordinate(coord, u))
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Outcome of a sampling check of a drift inequality.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub passed: bool,
    pub n_pairs: usize,
    /// Largest `(lhs − rhs)/scale` over the sampled pairs; `≤ tolerance` passes.
    pub max_relative_violation: f64,
    /// Pair attaining the maximum.
    pub witness: (Vec<f64>, Vec<f64>),
    pub tolerance: f64,
}

pub const CHECK_TOLERANCE: f64 = 1e-9;

/// Relative violation of `⟨x−y, b(x)−b(y)⟩ ≤ L|x−y|²·1{|x−y|≤R} − K|x−y|²·1{|x−y|>R}`.
pub fn contractivity_violation(model: &DriftModel, c: &DissipativityConstants, x: &[f64], y: &[f64]) -> f64 {
    let d = model.dim;
    let mut bx = vec![0.0; d];
    let mut by = vec![0.0; d];
    model.drift_into(x, &mut bx);
    model.drift_into(y, &mut by);
    let mut r2 = 0.0;
    let mut lhs = 0.0;
    for i in 0..d {
        let dx = x[i] - y[i];
        r2 += dx * dx;
        lhs += dx * (bx[i] - by[i]);
    }
    if r2 == 0.0 {
        return 0.0;
    }
    let rate = if r2.sqrt() <= c.r { c.l } else { -c.k };
    (lhs - rate * r2) / r2
}

/// Relative violation of `|b(x)−b(y)| ≤ L*(1+|x|^ℓ+|y|^ℓ)|x−y|`.
pub fn growth_violation(model: &DriftModel, g: &GrowthConstants, x: &[f64], y: &[f64]) -> f64 {
    let d = model.dim;
    let mut bx = vec![0.0; d];
    let mut by = vec![0.0; d];
    model.drift_into(x, &mut bx);
    model.drift_into(y, &mut by);
    let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let db: Vec<f64> = bx.iter().zip(&by).map(|(a, b)| a - b).collect();
    let r = norm(&diff);
    if r == 0.0 {
        return 0.0;
    }
    let bound = g.lstar * (1.0 + norm(x).powf(g.ell) + norm(y).powf(g.ell)) * r;
    (norm(&db) - bound) / bound
}

fn sample_in_ball(rng: &mut rng::StreamRng, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let p: Vec<f64> = (0..dim).map(|_| radius * (2.0 * rng::uniform(rng) - 1.0)).collect();
        if norm(&p) <= radius {
            return p;
        }
    }
}

fn run_check<F>(model: &DriftModel, n_pairs: usize, radius: f64, seed: u64, tag: u64, violation: F) -> Result<CheckReport>
where
    F: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    if n_pairs == 0 {
        return input("n_pairs must be at least 1");
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return input("sampling radius must be positive and finite");
    }
    let dim = model.dim;
    let (worst, x, y) = (0..n_pairs as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, TAG_CHECK ^ tag, i);
            let x = sample_in_ball(&mut rng, dim, radius);
            let y = sample_in_ball(&mut rng, dim, radius);
            (violation(&x, &y), x, y)
        })
        .reduce_with(|a, b| if b.0 > a.0 { b } else { a })
        .expect("at least one pair");
    Ok(CheckReport {
        passed: worst <= CHECK_TOLERANCE,
        n_pairs,
        max_relative_violation: worst,
        witness: (x, y),
        tolerance: CHECK_TOLERANCE,
    })
}

/// Samples pairs uniformly in the ball of radius `radius` and tests the
/// contractivity-at-infinity inequality on each. Passing is evidence, not proof.
pub fn check_contractivity_at_infinity(
    model: &DriftModel,
    consts: &DissipativityConstants,
    n_pairs: usize,
    radius: f64,
    seed: u64,
) -> Result<CheckReport> {
    run_check(model, n_pairs, radius, seed, 1, |x, y| contractivity_violation(model, consts, x, y))
}

/// Same sampling scheme for the polynomial-growth Lipschitz inequality.
pub fn check_polynomial_lipschitz(
    model: &DriftModel,
    growth: &GrowthConstants,
    n_pairs: usize,
    radius: f64,
    seed: u64,
) -> Result<CheckReport> {
    run_check(model, n_pairs, radius, seed, 2, |x, y| growth_violation(model, growth, x, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drift_values() {
        let dw = DriftModel::double_well();
        assert_eq!(dw.eval_drift(&[0.0]).unwrap(), vec![0.0]);
        assert_eq!(dw.eval_drift(&[2.0]).unwrap(), vec![-6.0]);
        let s = DriftModel::sin2();
        assert_eq!(s.eval_drift(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(s.drift_at_origin_norm(), 0.0);
    }

    #[test]
    fn drift_rejects_bad_points() {
        let dw = DriftModel::double_well();
        assert!(matches!(dw.eval_drift(&[f64::NAN]), Err(Error::Input(_))));
        assert!(matches!(dw.eval_drift(&[1.0, 2.0]), Err(Error::Input(_))));
    }

    #[test]
    fn polynomial_matches_double_well_and_origin_norm() {
        let p = DriftModel::polynomial(vec![vec![0.0, 1.0, 0.0, -1.0]], 1.0).unwrap();
        let dw = DriftModel::double_well();
        for u in [-2.5, -0.3, 0.0, 0.7, 3.1] {
            assert!((p.eval_drift(&[u]).unwrap()[0] - dw.eval_drift(&[u]).unwrap()[0]).abs() < 1e-14);
        }
        let q = DriftModel::polynomial(vec![vec![3.0, -1.0], vec![-4.0, -1.0]], 0.5).unwrap();
        assert!((q.drift_at_origin_norm() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_models() {
        assert!(DriftModel::polynomial(vec![vec![0.0, -1.0]], 0.0).is_err());
        assert!(DriftModel::polynomial(vec![], 1.0).is_err());
        assert!(matches!(DriftModel::by_name("nope"), Err(Error::Config(_))));
        assert!(DissipativityConstants::new(0.0, 1.0, 1.0).is_err());
        assert!(GrowthConstants::new(1.0, -1.0).is_err());
    }

    #[test]
    fn eval_is_bitwise_deterministic() {
        let s = DriftModel::sin2();
        let a = s.eval_drift(&[0.123, -4.56]).unwrap();
        let b = s.eval_drift(&[0.123, -4.56]).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn double_well_witness_for_zero_radius() {
        let dw = DriftModel::double_well();
        let c = DissipativityConstants::new(1.0, 2.0, 0.0).unwrap();
        // <x−y, b(x)−b(y)> = 0.5 · 0.375 against −K · 0.25
        let v = contractivity_violation(&dw, &c, &[0.5], &[0.0]);
        assert!((v - (0.1875 + 0.5) / 0.25).abs() < 1e-12);
        let rep = check_contractivity_at_infinity(&dw, &c, 10_000, 10.0, 3).unwrap();
        assert!(!rep.passed);
        let (x, y) = &rep.witness;
        assert!(contractivity_violation(&dw, &c, x, y) > CHECK_TOLERANCE);
    }

    #[test]
    fn double_well_stated_radius_is_too_small() {
        let dw = DriftModel::double_well();
        // (x−y)²(1 − (x²+xy+y²)) with x = −y = 1.6 gives −1.56·(x−y)², not ≤ −2·(x−y)²
        let stated = DissipativityConstants::new(1.0, 2.0, 3.0).unwrap();
        assert!((contractivity_violation(&dw, &stated, &[1.6], &[-1.6]) - 0.44).abs() < 1e-12);
        assert!(!check_contractivity_at_infinity(&dw, &stated, 100_000, 10.0, 1).unwrap().passed);
        let sharp = DissipativityConstants::new(1.0, 2.0, 2.0 * 3f64.sqrt()).unwrap();
        assert!(check_contractivity_at_infinity(&dw, &sharp, 100_000, 10.0, 1).unwrap().passed);
        let g = GrowthConstants::new(1.5, 2.0).unwrap();
        assert!(check_polynomial_lipschitz(&dw, &g, 100_000, 10.0, 1).unwrap().passed);
    }

    #[test]
    fn sin2_stated_constants_hold() {
        let s = DriftModel::sin2();
        let c = DissipativityConstants::new(1.0, 0.5, 4.0).unwrap();
        for seed in [1, 2] {
            assert!(check_contractivity_at_infinity(&s, &c, 100_000, 10.0, seed).unwrap().passed);
        }
    }

    #[test]
    fn identical_points_hold_with_equality() {
        let dw = DriftModel::double_well();
        let g = GrowthConstants::new(1.5, 2.0).unwrap();
        assert_eq!(growth_violation(&dw, &g, &[1.3], &[1.3]), 0.0);
        let c = DissipativityConstants::new(1.0, 2.0, 3.0).unwrap();
        assert_eq!(contractivity_violation(&dw, &c, &[1.3], &[1.3]), 0.0);
    }

    #[test]
    fn checker_is_independent_of_thread_count() {
        let dw = DriftModel::double_well();
        let c = DissipativityConstants::new(1.0, 2.0, 3.0).unwrap();
        let a = check_contractivity_at_infinity(&dw, &c, 5_000, 10.0, 11).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| check_contractivity_at_infinity(&dw, &c, 5_000, 10.0, 11).unwrap());
        assert_eq!(a.max_relative_violation.to_bits(), b.max_relative_violation.to_bits());
        assert_eq!(a.witness, b.witness);
    }

    #[test]
    fn sin2_global_lipschitz_growth() {
        let s = DriftModel::sin2();
        let g = GrowthConstants::new(3.0, 1.0).unwrap();
        assert!(check_polynomial_lipschitz(&s, &g, 20_000, 10.0, 5).unwrap().passed);
    }
}
