//! One-step mixed coupling of two TEM transitions.
//!
//! With drifted points `u_h(x) = π_h(x) + h b(π_h(x))`, `r̂ = |u_h(x) − u_h(y)|`,
//! axis `e = (u_h(x) − u_h(y))/r̂` and `p = ⟨e, σZ⟩`, the next states are
//! `X' = u_h(x) + σZ` and
//!
//! * `Y' = X'` (stick) when `r̂ ≤ H`, `|p| ≤ m` and `ζ ≤ v^m`,
//! * `Y' = u_h(y) + σ(I − 2eeᵀ)Z` (reflect) when `r̂ ≤ H`, `|p| ≤ m` and `ζ > v^m`,
//! * `Y' = u_h(y) + σZ` (synchronous) otherwise,
//!
//! where `ζ` is uniform on `[0, 1]` and independent of `Z ~ N(0, hI)`.

use crate::calibrate::{truncate_to, truncation_radius, Calibration};
use crate::distfn::DistanceFunction;
use crate::error::{input, Error, Result};
use crate::model::{dot, norm, DriftModel};
use crate::quad::{ks_p_value, normal_cdf, Moments};
use crate::rng::{self, StreamRng, TAG_COUPLE};
use rayon::prelude::*;
use std::fmt;

const BATCH: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Stick,
    Reflect,
    Sync,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoupleOutcome {
    pub x_next: Vec<f64>,
    pub y_next: Vec<f64>,
    pub branch: Branch,
    /// `r̂`, the distance between the drifted points.
    pub r_hat: f64,
    /// `R̂ = |x_next − y_next|`, from the exact per-branch formula.
    pub big_r_hat: f64,
    /// The draws that produced this outcome, kept so a step can be replayed.
    pub z: Vec<f64>,
    pub zeta: f64,
}

/// Signature of an acceptance function `(r̂ vector, z, h, σ, m) ↦ v`.
pub type AcceptanceFn = fn(&[f64], &[f64], f64, f64, f64) -> f64;

/// `z − 2⟨e, z⟩e` with `e = axis/|axis|`.
pub fn reflect(axis: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    let n = norm(axis);
    if n == 0.0 || axis.len() != z.len() {
        return input("reflection axis must be nonzero and match the vector's dimension");
    }
    let p = dot(axis, z) / n;
    Ok(z.iter().zip(axis).map(|(zi, ai)| zi - 2.0 * p * ai / n).collect())
}

/// The acceptance function `v^m`: the density ratio
/// `exp(−(r̂/(2hσ²))(2⟨e, σz⟩ + r̂))`, cut to zero outside the slabs
/// `|⟨e, σz⟩| ≤ m` and `|r̂ + ⟨e, σz⟩| ≤ m`, and capped at one.
/// A zero vector `r̂` gives one.
pub fn acceptance(r_hat_vec: &[f64], z: &[f64], h: f64, sigma: f64, m: f64) -> f64 {
    let r = norm(r_hat_vec);
    if r == 0.0 {
        return 1.0;
    }
    let p = sigma * dot(r_hat_vec, z) / r;
    acceptance_1d(r, p, h, sigma, m)
}

#[inline]
fn acceptance_1d(r: f64, p: f64, h: f64, sigma: f64, m: f64) -> f64 {
    if p.abs() > m || (r + p).abs() > m {
        return 0.0;
    }
    (-(r / (2.0 * h * sigma * sigma)) * (2.0 * p + r)).exp().min(1.0)
}

/// Deterministic part of a coupled step for a fixed pair `(x, y)`.
#[derive(Clone, Debug)]
pub struct PairGeometry {
    pub r: f64,
    pub r_hat: f64,
    pub ux: Vec<f64>,
    pub uy: Vec<f64>,
    /// `u_h(x) − u_h(y)`.
    pub r_vec: Vec<f64>,
    /// Unit axis, zero when `r̂ = 0`.
    pub e: Vec<f64>,
}

/// Applies the coupling for one model, step size and calibration.
#[derive(Clone)]
pub struct Coupler<'a> {
    model: &'a DriftModel,
    h: f64,
    radius: f64,
    h_big: f64,
    m_small: f64,
    acceptance: AcceptanceFn,
}

impl<'a> Coupler<'a> {
    pub fn new(model: &'a DriftModel, h: f64, calib: &Calibration) -> Result<Self> {
        let radius = truncation_radius(h, &calib.trunc)?;
        Ok(Coupler { model, h, radius, h_big: calib.h_big, m_small: calib.m_small, acceptance })
    }

    /// Replaces the acceptance function; used to check that the verifiers
    /// detect a broken coupling.
    pub fn with_acceptance(mut self, f: AcceptanceFn) -> Self {
        self.acceptance = f;
        self
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn model(&self) -> &DriftModel {
        self.model
    }

    /// `u_h(x) = π_h(x) + h b(π_h(x))`.
    pub fn drifted(&self, x: &[f64]) -> Vec<f64> {
        let mut p = x.to_vec();
        truncate_to(&mut p, self.radius);
        let mut b = vec![0.0; p.len()];
        self.model.drift_into(&p, &mut b);
        p.iter().zip(&b).map(|(a, bb)| a + self.h * bb).collect()
    }

    pub fn geometry(&self, x: &[f64], y: &[f64]) -> Result<PairGeometry> {
        let d = self.model.dim();
        if x.len() != d || y.len() != d {
            return input("pair dimension does not match the model");
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return input("pair must be finite");
        }
        let mut px = x.to_vec();
        let mut py = y.to_vec();
        truncate_to(&mut px, self.radius);
        truncate_to(&mut py, self.radius);
        let r = norm(&px.iter().zip(&py).map(|(a, b)| a - b).collect::<Vec<_>>());
        let ux = self.drifted(x);
        let uy = self.drifted(y);
        let r_vec: Vec<f64> = ux.iter().zip(&uy).map(|(a, b)| a - b).collect();
        let r_hat = norm(&r_vec);
        let e = if r_hat > 0.0 { r_vec.iter().map(|v| v / r_hat).collect() } else { vec![0.0; d] };
        Ok(PairGeometry { r, r_hat, ux, uy, r_vec, e })
    }

    /// Branch and `R̂` for the draws `(z, ζ)`, without building the next states.
    #[inline]
    pub fn branch_and_distance(&self, g: &PairGeometry, z: &[f64], zeta: f64) -> (Branch, f64) {
        if g.r_hat == 0.0 {
            return (Branch::Stick, 0.0);
        }
        let sigma = self.model.sigma();
        let p = sigma * dot(&g.e, z);
        if g.r_hat > self.h_big || p.abs() > self.m_small {
            return (Branch::Sync, g.r_hat);
        }
        let v = (self.acceptance)(&g.r_vec, z, self.h, sigma, self.m_small);
        if zeta <= v {
            (Branch::Stick, 0.0)
        } else {
            (Branch::Reflect, (g.r_hat + 2.0 * p).abs())
        }
    }

    /// The full coupled step for given draws.
    pub fn couple(&self, g: &PairGeometry, z: &[f64], zeta: f64) -> Result<CoupleOutcome> {
        let sigma = self.model.sigma();
        let (branch, big_r_hat) = self.branch_and_distance(g, z, zeta);
        let x_next: Vec<f64> = g.ux.iter().zip(z).map(|(u, zi)| u + sigma * zi).collect();
        let y_next: Vec<f64> = match branch {
            Branch::Stick => x_next.clone(),
            Branch::Sync => g.uy.iter().zip(z).map(|(u, zi)| u + sigma * zi).collect(),
            Branch::Reflect => {
                let p = dot(&g.e, z);
                g.uy.iter().zip(z).zip(&g.e).map(|((u, zi), ei)| u + sigma * (zi - 2.0 * p * ei)).collect()
            }
        };
        if x_next.iter().chain(&y_next).any(|v| !v.is_finite()) || !big_r_hat.is_finite() {
            return Err(Error::Numerical { step: 1, message: "non-finite coupled state".into() });
        }
        Ok(CoupleOutcome { x_next, y_next, branch, r_hat: g.r_hat, big_r_hat, z: z.to_vec(), zeta })
    }

    /// Draws `Z ~ N(0, hI)` and then `ζ ~ U[0, 1]` from `rng`.
    pub fn draw(&self, rng: &mut StreamRng, z: &mut [f64]) -> f64 {
        rng::fill_gaussian(rng, self.h, z);
        rng::uniform(rng)
    }
}

/// `u_h(x)`.
pub fn drifted_point(x: &[f64], model: &DriftModel, h: f64, calib: &Calibration) -> Result<Vec<f64>> {
    let c = Coupler::new(model, h, calib)?;
    if x.len() != model.dim() {
        return input("point dimension does not match the model");
    }
    Ok(c.drifted(x))
}

/// One coupled step from `(x, y)` with draws taken from `rng`.
pub fn couple_step(x: &[f64], y: &[f64], model: &DriftModel, h: f64, calib: &Calibration, rng: &mut StreamRng) -> Result<CoupleOutcome> {
    let c = Coupler::new(model, h, calib)?;
    let g = c.geometry(x, y)?;
    let mut z = vec![0.0; model.dim()];
    let zeta = c.draw(rng, &mut z);
    c.couple(&g, &z, zeta)
}

/// One line of a verifier report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub estimate: f64,
    pub std_error: f64,
    pub bound: f64,
    pub passed: bool,
    /// Set when the check ran in a weakened form, with the reason.
    pub flag: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestReport {
    pub name: String,
    pub passed: bool,
    pub rows: Vec<ReportRow>,
    pub note: String,
}

impl TestReport {
    pub fn new(name: &str, rows: Vec<ReportRow>, note: String) -> Self {
        let passed = rows.iter().all(|r| r.passed);
        TestReport { name: name.to_string(), passed, rows, note }
    }

    pub fn flagged(&self) -> usize {
        self.rows.iter().filter(|r| r.flag.is_some()).count()
    }
}

impl fmt::Display for TestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}: {}", self.name, if self.passed { "PASS" } else { "FAIL" })?;
        for r in &self.rows {
            write!(
                f,
                "  {:<40} est {:>14.6e} se {:>11.3e} bound {:>14.6e} {}",
                r.label,
                r.estimate,
                r.std_error,
                r.bound,
                if r.passed { "ok" } else { "FAIL" }
            )?;
            if let Some(flag) = &r.flag {
                write!(f, " [{flag}]")?;
            }
            writeln!(f)?;
        }
        if !self.note.is_empty() {
            writeln!(f, "  {}", self.note)?;
        }
        Ok(())
    }
}

/// Runs `n` coupled draws for one pair in parallel batches and folds each
/// draw with `per_draw` into a vector of accumulators.
fn mc_pair<F>(c: &Coupler, g: &PairGeometry, n: usize, seed: u64, pair: u64, width: usize, per_draw: F) -> Vec<Moments>
where
    F: Fn(Branch, f64, &[f64], &mut [f64]) + Sync,
{
    let batches = n.div_ceil(BATCH);
    (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(seed, TAG_COUPLE ^ pair.rotate_left(20), b as u64);
            let mut z = vec![0.0; g.ux.len()];
            let mut vals = vec![0.0; width];
            let mut acc = vec![Moments::default(); width];
            let count = BATCH.min(n - b * BATCH);
            for _ in 0..count {
                let zeta = c.draw(&mut rng, &mut z);
                let (br, rr) = c.branch_and_distance(g, &z, zeta);
                per_draw(br, rr, &z, &mut vals);
                acc.iter_mut().zip(&vals).for_each(|(a, &v)| a.push(v));
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        // merge in batch order so the result does not depend on work stealing
        .fold(vec![Moments::default(); width], |a, b| a.into_iter().zip(b).map(|(x, y)| x.merge(y)).collect())
}

/// One-sample KS statistic of `samples` against the CDF `cdf`.
pub fn ks_against<F: Fn(f64) -> f64>(samples: &mut [f64], cdf: F) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).max((i as f64 + 1.0) / n - f)
        })
        .fold(0.0, f64::max)
}

/// KS tests of the law of `y_next` against `N(u_h(y), hσ²I)`, coordinate-wise
/// and along the reflection axis, at family-wise level `alpha` split over the
/// tests performed for this pair.
pub fn verify_marginal_with(c: &Coupler, x: &[f64], y: &[f64], n: usize, seed: u64, alpha: f64) -> Result<TestReport> {
    if n < 10_000 {
        return input("marginal verification needs at least 10^4 draws");
    }
    let g = c.geometry(x, y)?;
    let d = g.ux.len();
    let sigma = c.model().sigma();
    let sd = sigma.abs() * c.h().sqrt();
    let with_axis = g.r_hat > 0.0 && d > 1;
    let width = d + usize::from(with_axis);
    let batches = n.div_ceil(BATCH);
    let cols: Vec<Vec<Vec<f64>>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(seed, TAG_COUPLE, b as u64);
            let mut z = vec![0.0; d];
            let count = BATCH.min(n - b * BATCH);
            let mut out = vec![Vec::with_capacity(count); width];
            for _ in 0..count {
                let zeta = c.draw(&mut rng, &mut z);
                let o = c.couple(&g, &z, zeta).expect("finite draws");
                for i in 0..d {
                    out[i].push(o.y_next[i]);
                }
                if with_axis {
                    let diff: Vec<f64> = o.y_next.iter().zip(&g.uy).map(|(a, b)| a - b).collect();
                    out[d].push(dot(&diff, &g.e));
                }
            }
            out
        })
        .collect();
    let tests = width as f64;
    let mut rows = Vec::new();
    for k in 0..width {
        let mut s: Vec<f64> = cols.iter().flat_map(|b| b[k].iter().copied()).collect();
        let mean = if k < d { g.uy[k] } else { 0.0 };
        let stat = ks_against(&mut s, |v| normal_cdf((v - mean) / sd));
        let p = ks_p_value(stat, n);
        let level = alpha / tests;
        rows.push(ReportRow {
            label: if k < d { format!("coord{k} KS p-value") } else { "axis projection KS p-value".into() },
            estimate: p,
            std_error: stat,
            bound: level,
            passed: p > level,
            flag: None,
        });
    }
    Ok(TestReport::new("marginal", rows, format!("pair x={x:?} y={y:?}, n={n}; std_error column holds the KS statistic")))
}

pub fn verify_marginal(x: &[f64], y: &[f64], model: &DriftModel, h: f64, calib: &Calibration, n: usize, seed: u64) -> Result<TestReport> {
    verify_marginal_with(&Coupler::new(model, h, calib)?, x, y, n, seed, 0.01)
}

/// Monte Carlo check of `E R̂ = r̂` within three standard errors.
pub fn verify_mean_distance_with(c: &Coupler, pairs: &[(Vec<f64>, Vec<f64>)], n: usize, seed: u64) -> Result<TestReport> {
    let mut rows = Vec::new();
    for (i, (x, y)) in pairs.iter().enumerate() {
        let g = c.geometry(x, y)?;
        let m = mc_pair(c, &g, n, seed, i as u64, 1, |_, rr, _, v| v[0] = rr);
        let (mean, se) = (m[0].mean(), m[0].std_error());
        rows.push(ReportRow {
            label: format!("r̂={:.6e}", g.r_hat),
            estimate: mean,
            std_error: se,
            bound: g.r_hat,
            passed: (mean - g.r_hat).abs() <= 3.0 * se,
            flag: None,
        });
    }
    Ok(TestReport::new("mean distance", rows, format!("n={n} per pair; bound column is r̂")))
}

pub fn verify_mean_distance(
    x: &[f64],
    y: &[f64],
    model: &DriftModel,
    h: f64,
    calib: &Calibration,
    n: usize,
    seed: u64,
) -> Result<TestReport> {
    verify_mean_distance_with(&Coupler::new(model, h, calib)?, &[(x.to_vec(), y.to_vec())], n, seed)
}

/// Checks `E f(R̂) ≤ (1 − ch) f(r) + 3 SE` for every pair. When the margin
/// `c·h·f(r)` is below the standard error the pair is checked against
/// `E f(R̂) ≤ f(r) + 3 SE` instead and flagged as resolution-limited.
#[allow(clippy::too_many_arguments)]
pub fn verify_contraction(
    pairs: &[(Vec<f64>, Vec<f64>)],
    model: &DriftModel,
    h: f64,
    calib: &Calibration,
    df: &DistanceFunction,
    n: usize,
    seed: u64,
) -> Result<TestReport> {
    let c = Coupler::new(model, h, calib)?;
    let ln_ch = calib.c.ln() + h.ln();
    let mut rows = Vec::new();
    for (i, (x, y)) in pairs.iter().enumerate() {
        let g = c.geometry(x, y)?;
        let fr = df.eval_f_unchecked(g.r);
        let m = mc_pair(&c, &g, n, seed, i as u64, 1, |_, rr, _, v| v[0] = df.eval_f_unchecked(rr));
        let (est, se) = (m[0].mean(), m[0].std_error());
        let margin = (ln_ch + fr.ln()).exp();
        let (bound, flag) = if margin < se || margin == 0.0 {
            (fr, Some(format!("resolution-limited: c·h·f(r) = exp({:.4e}) < SE", ln_ch + fr.ln())))
        } else {
            ((1.0 - ln_ch.exp()) * fr, None)
        };
        rows.push(ReportRow {
            label: format!("r={:.6e}", g.r),
            estimate: est,
            std_error: se,
            bound,
            passed: est <= bound + 3.0 * se,
            flag,
        });
    }
    Ok(TestReport::new("contraction", rows, format!("n={n} per pair, c·h = exp({ln_ch:.6e})")))
}

/// Restricted second moments against the three analytic lower bounds:
///
/// * `E[(R̂−r)² 1{r+√h < R̂ < r+18√h}] ≥ c1 r̂ √h` when `r ≤ √h`, `r̂ ≤ H`;
/// * `E[(R̂−r̂)² 1{R̂ < r̂+√h}] ≥ c2 r̂ √h` when `r̂ ≤ H ∧ √h`;
/// * `E[(R̂−r)² 1{r−√h < R̂ < r}] ≥ c3 h` when `√h ≤ r̂ ≤ H` and `√h ≤ r ≤ h^{θ−1/2}/(4M)`.
///
/// Outside its window each bound is zero and the row is marked vacuous.
pub fn verify_second_moment_lower_bounds(
    x: &[f64],
    y: &[f64],
    model: &DriftModel,
    h: f64,
    calib: &Calibration,
    n: usize,
    seed: u64,
) -> Result<TestReport> {
    let c = Coupler::new(model, h, calib)?;
    let g = c.geometry(x, y)?;
    let (r, rh, sh) = (g.r, g.r_hat, h.sqrt());
    let m = mc_pair(&c, &g, n, seed, 0, 3, |_, big, _, v| {
        v[0] = if big > r + sh && big < r + 18.0 * sh { (big - r).powi(2) } else { 0.0 };
        v[1] = if big < rh + sh { (big - rh).powi(2) } else { 0.0 };
        v[2] = if big > r - sh && big < r { (big - r).powi(2) } else { 0.0 };
    });
    let t = &calib.trunc;
    let upper14 = h.powf(t.theta - 0.5) / (4.0 * t.m_big);
    let active = [
        r > 0.0 && r <= sh && rh <= calib.h_big,
        rh > 0.0 && rh <= calib.h_big.min(sh),
        rh >= sh && rh <= calib.h_big && r >= sh && r <= upper14,
    ];
    let bounds = [calib.c1 * rh * sh, calib.c2 * rh * sh, calib.c3 * h];
    let names = ["c1 window", "c2 window", "c3 window"];
    let rows = (0..3)
        .map(|k| {
            let bound = if active[k] { bounds[k] } else { 0.0 };
            let (est, se) = (m[k].mean(), m[k].std_error());
            ReportRow {
                label: format!("{} (r={:.4e}, r̂={:.4e})", names[k], r, rh),
                estimate: est,
                std_error: se,
                bound,
                passed: est >= bound - 3.0 * se,
                flag: (!active[k]).then(|| "vacuous: pair outside this window".to_string()),
            }
        })
        .collect();
    Ok(TestReport::new("second-moment lower bounds", rows, format!("n={n}, h={h}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::{calibrate_with, MRule, DEFAULT_THETA_BAR};
    use crate::quad::{adaptive_simpson, normal_pdf};
    use proptest::prelude::*;
    use std::sync::LazyLock;

    static DW: LazyLock<Calibration> = LazyLock::new(|| {
        let model = DriftModel::double_well();
        let (k, g) = model.reference_constants().unwrap();
        calibrate_with(&model, &k, &g, DEFAULT_THETA_BAR, MRule::Floor).unwrap()
    });
    static MODEL: LazyLock<DriftModel> = LazyLock::new(DriftModel::double_well);

    #[test]
    fn drifted_point_examples() {
        assert_eq!(drifted_point(&[1.0], &MODEL, 0.01, &DW).unwrap(), vec![1.0]);
        let u = drifted_point(&[0.5], &MODEL, 0.1, &DW).unwrap()[0];
        assert!((u - 0.5375).abs() < 1e-15);
    }

    #[test]
    fn reflection_examples() {
        assert_eq!(reflect(&[1.0, 0.0], &[2.0, 3.0]).unwrap(), vec![-2.0, 3.0]);
        assert!(reflect(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn acceptance_examples() {
        let (h, s, m) = (0.01, 1.0, 8.0);
        // projection −r̂/2: exponent vanishes
        assert_eq!(acceptance(&[0.4], &[-0.2], h, s, m), 1.0);
        // orthogonal noise
        let v = acceptance(&[0.3, 0.0], &[0.0, 0.7], h, s, m);
        assert!((v - (-0.09f64 / 0.02).exp()).abs() < 1e-15);
        assert_eq!(acceptance(&[0.3], &[9.0], h, s, m), 0.0);
        assert_eq!(acceptance(&[0.0, 0.0], &[1.0, 2.0], h, s, m), 1.0);
        // density ratio above one is capped
        assert_eq!(acceptance(&[5.0], &[-3.9], h, s, m), 1.0);
        // inner slab: |r̂ + p| > m while |p| ≤ m
        assert_eq!(acceptance(&[5.0], &[3.5], h, s, m), 0.0);
        assert_eq!(acceptance(&[7.0], &[1.5], h, s, m), 0.0);
    }

    #[test]
    fn identical_points_stick() {
        let mut rng = rng::stream(1, TAG_COUPLE, 0);
        let o = couple_step(&[0.3], &[0.3], &MODEL, 2f64.powi(-8), &DW, &mut rng).unwrap();
        assert_eq!(o.branch, Branch::Stick);
        assert_eq!(o.big_r_hat, 0.0);
        assert_eq!(o.x_next, o.y_next);
    }

    #[test]
    fn far_pairs_are_synchronous() {
        // small step so the truncation radius exceeds H/2
        let c = Coupler::new(&MODEL, 2f64.powi(-16), &DW).unwrap();
        let g = c.geometry(&[5.0], &[-5.0]).unwrap();
        assert!(g.r_hat > DW.h_big);
        for zeta in [0.0, 0.5, 1.0] {
            for z in [-0.3, 0.0, 0.2] {
                let o = c.couple(&g, &[z], zeta).unwrap();
                assert_eq!(o.branch, Branch::Sync);
                assert_eq!(o.big_r_hat, g.r_hat);
            }
        }
    }

    #[test]
    fn branch_invariants_hold_and_replay() {
        let c = Coupler::new(&MODEL, 2f64.powi(-8), &DW).unwrap();
        let mut rng = rng::stream(3, TAG_COUPLE, 0);
        let mut z = [0.0];
        for (x, y) in [(0.1, 0.0), (0.5, -0.5), (1.2, 0.04), (3.0, -3.5)] {
            let g = c.geometry(&[x], &[y]).unwrap();
            for _ in 0..20_000 {
                let zeta = c.draw(&mut rng, &mut z);
                let o = c.couple(&g, &z, zeta).unwrap();
                let sep = (o.x_next[0] - o.y_next[0]).abs();
                match o.branch {
                    Branch::Stick => assert_eq!(o.big_r_hat, 0.0),
                    Branch::Sync => assert_eq!(o.big_r_hat, o.r_hat),
                    Branch::Reflect => {
                        assert_eq!(o.big_r_hat, (o.r_hat + 2.0 * MODEL.sigma() * z[0] * g.e[0]).abs());
                    }
                }
                assert!((sep - o.big_r_hat).abs() <= 1e-12 * (1.0 + sep));
                assert_eq!(c.couple(&g, &o.z, o.zeta).unwrap(), o);
            }
        }
    }

    #[test]
    fn branch_frequencies_match_quadrature() {
        let h = 2f64.powi(-8);
        let c = Coupler::new(&MODEL, h, &DW).unwrap();
        let g = c.geometry(&[0.05], &[-0.02]).unwrap();
        let sd = h.sqrt();
        // P(stick) = E[v(p)] with p = σ⟨e, Z⟩ ~ N(0, hσ²)
        let stick = adaptive_simpson(&|t: f64| acceptance_1d(g.r_hat, sd * t, h, 1.0, DW.m_small) * normal_pdf(t), -12.0, 12.0, 1e-12);
        let n = 200_000;
        let m = mc_pair(&c, &g, n, 5, 0, 2, |br, _, _, v| {
            v[0] = f64::from(u8::from(br == Branch::Stick));
            v[1] = f64::from(u8::from(br == Branch::Sync));
        });
        assert!((m[0].mean() - stick).abs() < 4.0 * (stick * (1.0 - stick) / n as f64).sqrt());
        // the slab |p| ≤ 8 is never left at this h
        assert_eq!(m[1].mean(), 0.0);
    }

    #[test]
    fn corrupted_acceptance_breaks_marginal() {
        fn always_stick(_: &[f64], _: &[f64], _: f64, _: f64, _: f64) -> f64 {
            1.0
        }
        let h = 2f64.powi(-8);
        let c = Coupler::new(&MODEL, h, &DW).unwrap().with_acceptance(always_stick);
        let rep = verify_marginal_with(&c, &[0.3], &[0.0], 20_000, 1, 0.01).unwrap();
        assert!(!rep.passed);
        let good = Coupler::new(&MODEL, h, &DW).unwrap();
        assert!(verify_marginal_with(&good, &[0.3], &[0.0], 20_000, 1, 0.01).unwrap().passed);
    }

    proptest! {
        #[test]
        fn reflection_is_isometric_involution(
            axis in proptest::collection::vec(-5.0f64..5.0, 3),
            z in proptest::collection::vec(-5.0f64..5.0, 3),
        ) {
            prop_assume!(norm(&axis) > 1e-3);
            let once = reflect(&axis, &z).unwrap();
            let twice = reflect(&axis, &once).unwrap();
            prop_assert!((norm(&once) - norm(&z)).abs() < 1e-12);
            for (a, b) in twice.iter().zip(&z) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn acceptance_in_unit_interval(r in proptest::collection::vec(-3.0f64..3.0, 2), z in proptest::collection::vec(-3.0f64..3.0, 2), h in 1e-4f64..1.0) {
            let v = acceptance(&r, &z, h, 1.0, 8.0);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
