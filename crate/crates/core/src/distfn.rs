//! The concave distance function
//!
//! ```text
//! ϕ(u) = exp(−a((u∧r1)² + 2(u∧r1))),   a = (2L+1)/(2c3)
//! Φ(u) = ∫₀ᵘ ϕ
//! ρ(u) = 1 − 2c*/c3 ∫₀ᵘ Φ(s+1)/ϕ(s) ds
//! f(u) = ∫₀ᵘ ϕ(s∧r1) ρ(s∧r1) ds
//! ```
//!
//! with `c*` chosen so that `ρ(r1) = 1/2`.
//!
//! For calibrated models `a` is in the thousands, so `1/ϕ` overflows long
//! before `r1`. The tables therefore carry `ψ(s) = ϕ(s)·G(s)` with
//! `G(s) = ∫₀ˢ Φ(t+1)/ϕ(t) dt`, which stays of moderate size and obeys the
//! exponential-integrator recurrence
//!
//! ```text
//! ψ(s') = ψ(s)·e^{A(s)−A(s')} + ∫ₛ^{s'} Φ(t+1)·e^{A(t)−A(s')} dt,   A = −ln ϕ.
//! ```
//!
//! Then `ρ(u) = 1 − ½·ψ(u)/ψ(r1)·e^{A(u)−A(r1)}` and
//! `f(u) = Φ(u) − ϕ(r1)/(2ψ(r1))·∫₀ᵘ ψ`.

use crate::error::{input, Error, Result};
use crate::logpos::LogPositive;
use crate::quad::{gauss_legendre8, gauss_legendre8_nodes};
use std::io::Write;

const BASE_UNIFORM: usize = 4096;
const LAYER_WIDTH: f64 = 40.0;
const LAYER_DIVISIONS: f64 = 16.0;
const MAX_REFINEMENTS: u32 = 4;
pub const REFINEMENT_TOLERANCE: f64 = 1e-8;
pub const CONCAVITY_TOLERANCE: f64 = 1e-10;

/// Inputs fixing the distance function: the local expansion rate `L`,
/// the lower-bound constant `c3` and the cut-off `r1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistParams {
    pub l: f64,
    pub c3: f64,
    pub r1: f64,
}

impl DistParams {
    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !(ok(self.l) && ok(self.c3) && ok(self.r1)) {
            return input(format!("distance function needs positive finite L, c3, r1 (got {}, {}, {})", self.l, self.c3, self.r1));
        }
        Ok(())
    }

    /// `a = (2L+1)/(2c3)`.
    pub fn rate(&self) -> f64 {
        (2.0 * self.l + 1.0) / (2.0 * self.c3)
    }
}

/// `ϕ(u)` in closed form; constant for `u ≥ r1`.
pub fn concave_weight(u: f64, p: &DistParams) -> f64 {
    ln_concave_weight(u, p).exp()
}

/// `ln ϕ(u)`, which stays finite where `ϕ` itself underflows.
pub fn ln_concave_weight(u: f64, p: &DistParams) -> f64 {
    let s = u.max(0.0).min(p.r1);
    -p.rate() * (s * s + 2.0 * s)
}

#[derive(Clone, Debug)]
pub struct DistanceFunction {
    params: DistParams,
    a: f64,
    grid: Vec<f64>,
    ln_phi: Vec<f64>,
    phi_vals: Vec<f64>,
    big_phi_vals: Vec<f64>,
    psi_vals: Vec<f64>,
    rho_vals: Vec<f64>,
    f_vals: Vec<f64>,
    cstar: LogPositive,
    phi_r1: LogPositive,
    phi_one: f64,
    f_slope_beyond: LogPositive,
    refinement_change: f64,
}

fn build_grid(r1: f64, a: f64, level: u32) -> Vec<f64> {
    let scale = f64::from(1u32 << level);
    let n = BASE_UNIFORM * (1usize << level);
    let mut pts: Vec<f64> = (0..=n).map(|i| r1 * i as f64 / n as f64).collect();
    // Boundary layers where ϕ and ρ change on the scales 1/A'(0) and 1/A'(r1).
    for len in [1.0 / (2.0 * a), 1.0 / (2.0 * a * (1.0 + r1))] {
        let step = len / LAYER_DIVISIONS / scale;
        let count = ((LAYER_WIDTH * len).min(r1) / step).ceil() as usize;
        for k in 1..count {
            let t = k as f64 * step;
            pts.push(t);
            pts.push(r1 - t);
        }
    }
    pts.retain(|&t| (0.0..=r1).contains(&t));
    pts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let tiny = r1 * 4.0 * f64::EPSILON;
    let mut out: Vec<f64> = Vec::with_capacity(pts.len());
    for t in pts {
        match out.last() {
            Some(&last) if t - last <= tiny => {}
            _ => out.push(t),
        }
    }
    // keep the endpoint exact
    let last = out.len() - 1;
    if out[last] != r1 {
        if r1 - out[last] <= tiny {
            out[last] = r1;
        } else {
            out.push(r1);
        }
    }
    out
}

struct Tables<'a> {
    p: &'a DistParams,
    a: f64,
    grid: &'a [f64],
    phi: &'a [f64],
    big_phi: &'a [f64],
}

impl Tables<'_> {
    fn cap_a(&self, s: f64) -> f64 {
        self.a * (s * s + 2.0 * s)
    }

    fn locate(&self, t: f64) -> usize {
        let i = self.grid.partition_point(|&g| g <= t);
        i.saturating_sub(1).min(self.grid.len() - 2)
    }

    /// `Φ(t)` for any `t ≥ 0`: cubic Hermite with the exact derivative `ϕ`
    /// inside the table, linear beyond `r1`.
    fn big_phi_at(&self, t: f64) -> f64 {
        let r1 = self.p.r1;
        let n = self.grid.len() - 1;
        if t >= r1 {
            return self.big_phi[n] + self.phi[n] * (t - r1);
        }
        let i = self.locate(t);
        let (x0, x1) = (self.grid[i], self.grid[i + 1]);
        let dx = x1 - x0;
        let s = (t - x0) / dx;
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        h00 * self.big_phi[i] + h10 * dx * self.phi[i] + h01 * self.big_phi[i + 1] + h11 * dx * self.phi[i + 1]
    }

    /// `∫_{s0}^{s1} Φ(t+1)·e^{A(t)−A(s1)} dt`, computed in the variable
    /// `w = A(s1) − A(t)` where the weight becomes `e^{−w}`. The range is
    /// cut at `w = 60`, beyond which the remainder is below `e^{−60}` relative.
    fn psi_increment(&self, s0: f64, s1: f64) -> f64 {
        if s1 <= s0 {
            return 0.0;
        }
        let a1 = self.cap_a(s1);
        let w_max = (a1 - self.cap_a(s0)).min(60.0);
        let g = |w: f64| {
            let v = (a1 - w).max(0.0) / self.a;
            let t = v / ((1.0 + v).sqrt() + 1.0);
            self.big_phi_at(t + 1.0) / (2.0 * self.a * (1.0 + t)) * (-w).exp()
        };
        let pieces = w_max.ceil().max(1.0) as usize;
        let dw = w_max / pieces as f64;
        (0..pieces).map(|k| gauss_legendre8(&g, k as f64 * dw, (k + 1) as f64 * dw)).sum()
    }

    fn psi_from(&self, s0: f64, psi0: f64, s: f64) -> f64 {
        psi0 * (self.cap_a(s0) - self.cap_a(s)).exp() + self.psi_increment(s0, s)
    }
}

impl DistanceFunction {
    /// Builds the tables, doubling the grid until two successive levels agree
    /// to `1e-8` relative at the coarse nodes, then checks every invariant.
    pub fn build(params: DistParams) -> Result<Self> {
        params.validate()?;
        let mut coarse = Self::build_level(params, 0)?;
        for level in 1..=MAX_REFINEMENTS {
            let mut fine = Self::build_level(params, level)?;
            let change = coarse
                .grid
                .iter()
                .zip(&coarse.f_vals)
                .map(|(&u, &fc)| {
                    let ff = fine.eval_f_unchecked(u);
                    let denom = ff.abs().max(f64::MIN_POSITIVE);
                    (ff - fc).abs() / denom
                })
                .fold(0.0, f64::max);
            fine.refinement_change = change;
            if change < REFINEMENT_TOLERANCE {
                fine.check_invariants()?;
                return Ok(fine);
            }
            coarse = fine;
        }
        Err(Error::Construction(format!(
            "distance function did not stabilise after {MAX_REFINEMENTS} grid doublings (last relative change {})",
            coarse.refinement_change
        )))
    }

    fn build_level(p: DistParams, level: u32) -> Result<Self> {
        let a = p.rate();
        let grid = build_grid(p.r1, a, level);
        let n = grid.len() - 1;
        let ln_phi: Vec<f64> = grid.iter().map(|&u| ln_concave_weight(u, &p)).collect();
        let phi: Vec<f64> = ln_phi.iter().map(|v| v.exp()).collect();
        let mut big_phi = vec![0.0; n + 1];
        let w = |t: f64| concave_weight(t, &p);
        for i in 0..n {
            big_phi[i + 1] = big_phi[i] + gauss_legendre8(&w, grid[i], grid[i + 1]);
        }

        let tab = Tables { p: &p, a, grid: &grid, phi: &phi, big_phi: &big_phi };
        let mut psi = vec![0.0; n + 1];
        for i in 0..n {
            psi[i + 1] = tab.psi_from(grid[i], psi[i], grid[i + 1]);
        }
        let psi_r1 = psi[n];
        if !(psi_r1 > 0.0 && psi_r1.is_finite()) {
            return Err(Error::Construction(format!("ψ(r1) = {psi_r1} is not a positive finite number")));
        }
        let a_r1 = tab.cap_a(p.r1);
        let rho: Vec<f64> = grid.iter().zip(&psi).map(|(&u, &ps)| 1.0 - 0.5 * (ps / psi_r1) * (tab.cap_a(u) - a_r1).exp()).collect();

        // f = Φ − k·∫ψ with k = ϕ(r1)/(2ψ(r1)); k underflows for stiff weights.
        let k = (ln_phi[n] - (2.0 * psi_r1).ln()).exp();
        let mut f_vals = big_phi.clone();
        if k > 0.0 {
            let mut j = 0.0;
            for i in 0..n {
                let nodes = gauss_legendre8_nodes(grid[i], grid[i + 1]);
                j += nodes.iter().map(|&(t, wt)| wt * tab.psi_from(grid[i], psi[i], t)).sum::<f64>();
                f_vals[i + 1] = big_phi[i + 1] - k * j;
            }
        }

        let ln_g_r1 = psi_r1.ln() + a_r1;
        let cstar = LogPositive::from_ln(p.c3.ln() - 4f64.ln() - ln_g_r1);
        let phi_r1 = LogPositive::from_ln(ln_phi[n]);
        let phi_one = tab.big_phi_at(1.0);
        Ok(DistanceFunction {
            params: p,
            a,
            f_slope_beyond: phi_r1.scale(0.5),
            grid,
            ln_phi,
            phi_vals: phi,
            big_phi_vals: big_phi,
            psi_vals: psi,
            rho_vals: rho,
            f_vals,
            cstar,
            phi_r1,
            phi_one,
            refinement_change: f64::NAN,
        })
    }

    fn check_invariants(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Construction(m));
        let n = self.grid.len() - 1;
        if self.phi_vals[0] != 1.0 || self.rho_vals[0] != 1.0 || self.f_vals[0] != 0.0 {
            return fail("ϕ(0) = 1, ρ(0) = 1 and f(0) = 0 must hold exactly".into());
        }
        if !self.ln_phi.windows(2).all(|w| w[1] < w[0]) {
            return fail("ln ϕ is not strictly decreasing on the grid".into());
        }
        if (self.rho_vals[n] - 0.5).abs() > 1e-12 {
            return fail(format!("ρ(r1) = {} differs from 1/2", self.rho_vals[n]));
        }
        if let Some(i) = self.rho_vals.iter().position(|&r| !(0.5 - 1e-12..=1.0).contains(&r)) {
            return fail(format!("ρ({}) = {} outside [1/2, 1]", self.grid[i], self.rho_vals[i]));
        }
        let phi_r1 = self.phi_r1.value();
        for (i, (&u, &f)) in self.grid.iter().zip(&self.f_vals).enumerate() {
            let tol = 1e-12 * u;
            if f > u + tol || f < 0.5 * phi_r1 * u - tol {
                return fail(format!("ϕ(r1)u/2 ≤ f(u) ≤ u violated at u = {u} (f = {f})"));
            }
            if i > 0 && f < self.f_vals[i - 1] {
                return fail(format!("f decreases at u = {u}"));
            }
            // strictly increasing wherever the increment exceeds the rounding of f
            let increment = self.phi_vals[i] * 0.5 * (u - self.grid[i.saturating_sub(1)]);
            if i > 0 && increment > 4.0 * f64::EPSILON * f && f <= self.f_vals[i - 1] {
                return fail(format!("f is not strictly increasing at u = {u}"));
            }
        }
        if let Some(u) = self.concavity_violation() {
            return fail(format!("f is not concave near u = {u}"));
        }
        Ok(())
    }

    /// First interior grid point where `f` falls below the chord of its
    /// neighbours by more than [`CONCAVITY_TOLERANCE`].
    pub fn concavity_violation(&self) -> Option<f64> {
        (1..self.grid.len() - 1).find_map(|i| {
            let (x0, x1, x2) = (self.grid[i - 1], self.grid[i], self.grid[i + 1]);
            let chord = self.f_vals[i - 1] + (self.f_vals[i + 1] - self.f_vals[i - 1]) * (x1 - x0) / (x2 - x0);
            (self.f_vals[i] < chord - CONCAVITY_TOLERANCE).then_some(x1)
        })
    }

    pub fn params(&self) -> &DistParams {
        &self.params
    }

    pub fn r1(&self) -> f64 {
        self.params.r1
    }

    pub fn rate(&self) -> f64 {
        self.a
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn phi_values(&self) -> &[f64] {
        &self.phi_vals
    }

    pub fn big_phi_values(&self) -> &[f64] {
        &self.big_phi_vals
    }

    pub fn rho_values(&self) -> &[f64] {
        &self.rho_vals
    }

    pub fn f_values(&self) -> &[f64] {
        &self.f_vals
    }

    pub fn psi_values(&self) -> &[f64] {
        &self.psi_vals
    }

    pub fn cstar(&self) -> LogPositive {
        self.cstar
    }

    pub fn phi_r1(&self) -> LogPositive {
        self.phi_r1
    }

    /// `Φ(1)`.
    pub fn phi_one(&self) -> f64 {
        self.phi_one
    }

    /// Slope of `f` beyond `r1`, `ϕ(r1)ρ(r1) = ϕ(r1)/2`.
    pub fn f_slope_beyond(&self) -> LogPositive {
        self.f_slope_beyond
    }

    /// Largest relative change of `f` at the previous level's nodes when the grid was last doubled.
    pub fn refinement_change(&self) -> f64 {
        self.refinement_change
    }

    fn interp(&self, vals: &[f64], u: f64) -> f64 {
        let i = self.grid.partition_point(|&g| g <= u);
        if i == 0 {
            return vals[0];
        }
        if i == self.grid.len() {
            return vals[i - 1];
        }
        let (x0, x1) = (self.grid[i - 1], self.grid[i]);
        if u == x0 {
            return vals[i - 1];
        }
        vals[i - 1] + (vals[i] - vals[i - 1]) * (u - x0) / (x1 - x0)
    }

    /// `f(u)`; errors on negative or non-finite `u`.
    pub fn eval_f(&self, u: f64) -> Result<f64> {
        if !(u >= 0.0 && u.is_finite()) {
            return input(format!("f is defined on [0, ∞), got {u}"));
        }
        Ok(self.eval_f_unchecked(u))
    }

    /// `f(u)` for `u ≥ 0`, piecewise linear on the grid and linear beyond `r1`.
    #[inline]
    pub fn eval_f_unchecked(&self, u: f64) -> f64 {
        let r1 = self.params.r1;
        if u >= r1 {
            let last = *self.f_vals.last().unwrap();
            return last + self.f_slope_beyond.value() * (u - r1);
        }
        self.interp(&self.f_vals, u)
    }

    /// `ρ(u∧r1)` by linear interpolation.
    pub fn rho(&self, u: f64) -> f64 {
        self.interp(&self.rho_vals, u.min(self.params.r1))
    }

    /// `Φ(u)` by linear interpolation of the table, linear beyond `r1`.
    pub fn big_phi(&self, u: f64) -> f64 {
        let r1 = self.params.r1;
        if u >= r1 {
            return self.big_phi_vals.last().unwrap() + self.phi_r1.value() * (u - r1);
        }
        self.interp(&self.big_phi_vals, u)
    }

    /// Writes the `u,phi,Phi,rho,f` table as CSV.
    pub fn write_table<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "u,phi,Phi,rho,f")?;
        for i in 0..self.grid.len() {
            writeln!(out, "{},{},{},{},{}", self.grid[i], self.phi_vals[i], self.big_phi_vals[i], self.rho_vals[i], self.f_vals[i])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::adaptive_simpson;
    use proptest::prelude::*;

    static MILD: std::sync::LazyLock<DistanceFunction> = std::sync::LazyLock::new(|| DistanceFunction::build(mild()).unwrap());

    fn mild() -> DistParams {
        // a = 1/2: every quantity is comfortably representable
        DistParams { l: 0.5, c3: 2.0, r1: 3.0 }
    }

    /// Direct nested-quadrature oracle for `G(u) = ∫₀ᵘ Φ(s+1)/ϕ(s) ds`.
    fn oracle_g(p: &DistParams, u: f64) -> f64 {
        let big_phi = |t: f64| {
            let inside = adaptive_simpson(&|s: f64| concave_weight(s, p), 0.0, t.min(p.r1), 1e-14);
            inside + concave_weight(p.r1, p) * (t - p.r1).max(0.0)
        };
        adaptive_simpson(&|s: f64| big_phi(s + 1.0) / concave_weight(s, p), 0.0, u, 1e-11)
    }

    #[test]
    fn weight_closed_form() {
        let p = mild();
        assert_eq!(concave_weight(0.0, &p), 1.0);
        assert_eq!(concave_weight(5.0, &p), concave_weight(3.0, &p));
        assert!((concave_weight(1.0, &p) - (-1.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn mild_case_matches_nested_quadrature() {
        let p = mild();
        let df = DistanceFunction::build(p).unwrap();
        let g_r1 = oracle_g(&p, p.r1);
        let cstar = 0.25 * p.c3 / g_r1;
        assert!((df.cstar().value() / cstar - 1.0).abs() < 1e-9);
        for u in [0.25, 1.0, 2.2] {
            let rho = 1.0 - 2.0 * cstar / p.c3 * oracle_g(&p, u);
            assert!((df.rho(u) - rho).abs() < 1e-6, "rho({u})");
            let f = adaptive_simpson(&|s: f64| concave_weight(s, &p) * (1.0 - 2.0 * cstar / p.c3 * oracle_g(&p, s)), 0.0, u, 1e-10);
            assert!((df.eval_f(u).unwrap() - f).abs() < 1e-6 * f, "f({u})");
        }
        let phi1 = adaptive_simpson(&|s: f64| concave_weight(s, &p), 0.0, 1.0, 1e-14);
        assert!((df.phi_one() - phi1).abs() < 1e-12);
    }

    #[test]
    fn rho_endpoint_and_extension() {
        let df = DistanceFunction::build(mild()).unwrap();
        let n = df.grid().len() - 1;
        assert!((df.rho_values()[n] - 0.5).abs() < 1e-14);
        let r1 = df.r1();
        let expect = df.f_values()[n] + df.phi_r1().value() / 2.0;
        assert!((df.eval_f(r1 + 1.0).unwrap() - expect).abs() < 1e-14);
        for (i, &u) in df.grid().iter().enumerate().step_by(97) {
            assert_eq!(df.eval_f(u).unwrap(), df.f_values()[i]);
        }
        assert_eq!(df.eval_f(0.0).unwrap(), 0.0);
        assert!(df.eval_f(-1.0).is_err());
    }

    #[test]
    fn cstar_bounds_hold() {
        let p = mild();
        let df = DistanceFunction::build(p).unwrap();
        let upper = p.c3 / (4.0 * p.r1 * df.phi_one());
        let lower = p.c3 * df.phi_r1().value() / (4.0 * p.r1 * (p.r1 + 1.0));
        let c = df.cstar().value();
        assert!(lower <= c && c <= upper);
    }

    #[test]
    fn stiff_weight_keeps_cstar_in_log_space() {
        // the size of a for a unit-noise calibration with L = 1
        let p = DistParams { l: 1.0, c3: 3.5e-4, r1: 22.0 };
        let df = DistanceFunction::build(p).unwrap();
        assert_eq!(df.cstar().value(), 0.0);
        assert!(df.cstar().ln().is_finite());
        let ln_upper = p.c3.ln() - (4.0 * p.r1 * df.phi_one()).ln();
        let ln_lower = p.c3.ln() + df.phi_r1().ln() - (4.0 * p.r1 * (p.r1 + 1.0)).ln();
        assert!(ln_lower <= df.cstar().ln() && df.cstar().ln() <= ln_upper);
        // Φ(1) ≈ ∫₀^∞ e^{−a(s²+2s)} ds for large a
        let a = p.rate();
        let phi1 = adaptive_simpson(&|s: f64| (-a * (s * s + 2.0 * s)).exp(), 0.0, 1.0, 1e-18);
        assert!((df.phi_one() / phi1 - 1.0).abs() < 1e-9);
        assert!(df.concavity_violation().is_none());
    }

    #[test]
    fn csv_table_header() {
        let df = DistanceFunction::build(mild()).unwrap();
        let mut buf = Vec::new();
        df.write_table(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("u,phi,Phi,rho,f\n0,1,0,1,0\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn f_is_monotone_and_below_identity(u in 0.0f64..6.0, d in 0.0f64..2.0) {
            let df = &*MILD;
            let a = df.eval_f(u).unwrap();
            let b = df.eval_f(u + d).unwrap();
            prop_assert!(a <= b);
            prop_assert!(a <= u * (1.0 + 1e-12));
            prop_assert!(b - a <= d * (1.0 + 1e-12));
        }
    }
}
