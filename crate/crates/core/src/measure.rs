//! Empirical measures, Wasserstein-1 distances, stationary densities in one
//! dimension, and the convergence experiments built on them.

use crate::calibrate::TruncationParams;
use crate::error::{input, Error, Result};
use crate::model::{norm, DriftModel};
use crate::quad::{gauss_legendre8, linear_fit, mean_and_se, Moments};
use crate::rng::{self, TAG_BOOT, TAG_PATHS};
use crate::scheme::{simulate_ensemble, Tem};
use rayon::prelude::*;

/// Largest cloud the assignment solver accepts.
pub const ASSIGNMENT_CAP: usize = 4096;

/// Uniformly weighted point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    samples: Vec<f64>,
}

impl EmpiricalMeasure {
    /// `samples` holds `n·dim` coordinates, point after point.
    pub fn new(dim: usize, samples: Vec<f64>) -> Result<Self> {
        if dim == 0 || samples.is_empty() || !samples.len().is_multiple_of(dim) {
            return input("an empirical measure needs at least one point of matching dimension");
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return input("empirical measure samples must be finite");
        }
        Ok(EmpiricalMeasure { dim, samples })
    }

    pub fn from_1d(samples: Vec<f64>) -> Result<Self> {
        Self::new(1, samples)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    fn sorted_1d(&self) -> Vec<f64> {
        let mut v = self.samples.clone();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }
}

/// Exact one-dimensional `W₁ = ∫|F_a − F_b|`. For equal sizes this is the
/// mean absolute difference of the sorted samples; unequal sizes are handled
/// exactly by the same integral rather than by resampling.
pub fn w1_1d(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    if a.dim != 1 || b.dim != 1 {
        return input("w1_1d needs one-dimensional measures");
    }
    let xa = a.sorted_1d();
    let xb = b.sorted_1d();
    if xa.len() == xb.len() {
        let n = xa.len() as f64;
        return Ok(xa.iter().zip(&xb).map(|(p, q)| (p - q).abs()).sum::<f64>() / n);
    }
    let (na, nb) = (xa.len(), xb.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut total = 0.0;
    let mut last = xa[0].min(xb[0]);
    while i < na || j < nb {
        let next = match (xa.get(i), xb.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na as f64 - j as f64 / nb as f64).abs() * (next - last);
        last = next;
        while i < na && xa[i] == next {
            i += 1;
        }
        while j < nb && xb[j] == next {
            j += 1;
        }
    }
    Ok(total)
}

/// Exact optimal-transport cost between two equally sized clouds under
/// Euclidean cost, by the shortest augmenting path method on the dense
/// cost matrix (`O(n³)`).
pub fn w1_assignment(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    if a.dim != b.dim {
        return input("measures must share a dimension");
    }
    let n = a.len();
    if n != b.len() {
        return input("w1_assignment needs equally sized clouds; subsample the larger one");
    }
    if n > ASSIGNMENT_CAP {
        return input(format!(
            "cloud of {n} points exceeds the assignment cap of {ASSIGNMENT_CAP}; use w1_1d in one dimension or subsample"
        ));
    }
    let cost = |i: usize, j: usize| {
        let (p, q) = (a.point(i), b.point(j));
        p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let assignment = solve_assignment(n, cost);
    Ok(assignment.iter().enumerate().map(|(i, &j)| cost(i, j)).sum::<f64>() / n as f64)
}

/// Minimum-cost perfect matching; returns `col[i]` for every row `i`.
fn solve_assignment<C: Fn(usize, usize) -> f64>(n: usize, cost: C) -> Vec<usize> {
    // 1-based potentials and matching, row 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut row_costs = vec![0.0; n];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        let mut cached_row = usize::MAX;
        loop {
            used[j0] = true;
            let i0 = p[j0];
            if cached_row != i0 {
                for (j, c) in row_costs.iter_mut().enumerate() {
                    *c = cost(i0 - 1, j);
                }
                cached_row = i0;
            }
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row_costs[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; n];
    for j in 1..=n {
        col[p[j] - 1] = j - 1;
    }
    col
}

/// `sup |F_n − F|` for one-dimensional samples against a reference CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(a: &EmpiricalMeasure, cdf: F) -> Result<f64> {
    if a.dim != 1 {
        return input("ks_statistic needs a one-dimensional measure");
    }
    let x = a.sorted_1d();
    let n = x.len() as f64;
    Ok(x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).max((i as f64 + 1.0) / n - f)
        })
        .fold(0.0, f64::max))
}

/// Tabulated stationary law `p(u) ∝ exp((2/σ²)∫₀ᵘ b)` of a scalar SDE.
#[derive(Clone, Debug)]
pub struct StationaryDensity1D {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    /// Derivative of the density at the nodes, `(2/σ²)·b·p`.
    pub slope: Vec<f64>,
    pub cdf: Vec<f64>,
}

const DENSITY_NODES: usize = 1 << 16;
const LOG_DROP: f64 = 40.0;

/// Builds the stationary density of `du = b(u) dt + σ dB` on an interval
/// grown until the density at both ends is `e^{−40}` below its maximum.
pub fn stationary_density_1d<B: Fn(f64) -> f64 + Sync>(drift: B, sigma: f64) -> Result<StationaryDensity1D> {
    if sigma == 0.0 || !sigma.is_finite() {
        return input("sigma must be nonzero and finite");
    }
    let k = 2.0 / (sigma * sigma);
    let log_p = |u: f64| k * gauss_legendre_chain(&drift, u);
    let mut half = 1.0;
    loop {
        let (lo, hi) = (log_p(-half), log_p(half));
        let peak = sample_max(&log_p, half);
        if !(lo.is_finite() && hi.is_finite() && peak.is_finite()) {
            return Err(Error::Model("stationary log-density is not finite".into()));
        }
        if peak - lo >= LOG_DROP && peak - hi >= LOG_DROP {
            break;
        }
        half *= 1.5;
        if half > 1e6 {
            return Err(Error::Model("stationary density does not decay; is the drift dissipative?".into()));
        }
    }
    let n = DENSITY_NODES;
    let grid: Vec<f64> = (0..=n).map(|i| -half + 2.0 * half * i as f64 / n as f64).collect();
    // log-density at the nodes by cumulative quadrature from 0 outward
    let mid = n / 2;
    let mut lp = vec![0.0; n + 1];
    for i in mid..n {
        lp[i + 1] = lp[i] + k * gauss_legendre8(&drift, grid[i], grid[i + 1]);
    }
    for i in (0..mid).rev() {
        lp[i] = lp[i + 1] - k * gauss_legendre8(&drift, grid[i], grid[i + 1]);
    }
    let top = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnorm = |i: usize, t: f64| {
        // log-density inside cell i from its left node
        (lp[i] + k * gauss_legendre8(&drift, grid[i], t) - top).exp()
    };
    let cells: Vec<f64> = (0..n).into_par_iter().map(|i| gauss_legendre8(&|t: f64| unnorm(i, t), grid[i], grid[i + 1])).collect();
    let mut cdf = vec![0.0; n + 1];
    for i in 0..n {
        cdf[i + 1] = cdf[i] + cells[i];
    }
    let z = cdf[n];
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::Model(format!("normalisation integral is {z}")));
    }
    cdf.iter_mut().for_each(|c| *c /= z);
    let density: Vec<f64> = lp.iter().map(|&l| (l - top).exp() / z).collect();
    let slope = grid.iter().zip(&density).map(|(&u, &p)| k * drift(u) * p).collect();
    Ok(StationaryDensity1D { grid, density, slope, cdf })
}

fn gauss_legendre_chain<B: Fn(f64) -> f64>(b: &B, u: f64) -> f64 {
    let pieces = (u.abs().ceil() as usize).max(1) * 4;
    let step = u / pieces as f64;
    (0..pieces).map(|i| gauss_legendre8(b, i as f64 * step, (i + 1) as f64 * step)).sum()
}

fn sample_max<F: Fn(f64) -> f64>(f: &F, half: f64) -> f64 {
    (0..=400).map(|i| f(-half + 2.0 * half * i as f64 / 400.0)).fold(f64::NEG_INFINITY, f64::max)
}

impl StationaryDensity1D {
    fn cell(&self, u: f64) -> usize {
        let i = self.grid.partition_point(|&g| g <= u);
        i.saturating_sub(1).min(self.grid.len() - 2)
    }

    /// CDF by cubic Hermite interpolation with the density as derivative.
    pub fn cdf_at(&self, u: f64) -> f64 {
        let n = self.grid.len() - 1;
        if u <= self.grid[0] {
            return 0.0;
        }
        if u >= self.grid[n] {
            return 1.0;
        }
        let i = self.cell(u);
        let (x0, x1) = (self.grid[i], self.grid[i + 1]);
        let dx = x1 - x0;
        let s = (u - x0) / dx;
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        (h00 * self.cdf[i] + h10 * dx * self.density[i] + h01 * self.cdf[i + 1] + h11 * dx * self.density[i + 1]).clamp(0.0, 1.0)
    }

    pub fn density_at(&self, u: f64) -> f64 {
        let n = self.grid.len() - 1;
        if u < self.grid[0] || u > self.grid[n] {
            return 0.0;
        }
        let i = self.cell(u);
        let dx = self.grid[i + 1] - self.grid[i];
        let s = (u - self.grid[i]) / dx;
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        (h00 * self.density[i] + h10 * dx * self.slope[i] + h01 * self.density[i + 1] + h11 * dx * self.slope[i + 1]).max(0.0)
    }

    /// Inverse CDF by bisection on the interpolated CDF.
    pub fn quantile(&self, p: f64) -> f64 {
        let n = self.grid.len() - 1;
        let p = p.clamp(0.0, 1.0);
        let i = self.cdf.partition_point(|&c| c < p).clamp(1, n);
        let (mut lo, mut hi) = (self.grid[i - 1], self.grid[i]);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.cdf_at(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Trapezoid integral of the tabulated density.
    pub fn trapezoid_mass(&self) -> f64 {
        self.grid.windows(2).zip(self.density.windows(2)).map(|(g, d)| 0.5 * (g[1] - g[0]) * (d[0] + d[1])).sum()
    }

    /// `∫ g(u) p(u) du` by Gauss-Legendre on every grid cell.
    pub fn expectation<G: Fn(f64) -> f64 + Sync>(&self, g: G) -> f64 {
        (0..self.grid.len() - 1)
            .into_par_iter()
            .map(|i| gauss_legendre8(&|u: f64| g(u) * self.density_at(u), self.grid[i], self.grid[i + 1]))
            .collect::<Vec<_>>()
            .iter()
            .sum()
    }

    /// `n` independent draws by inverse-CDF sampling.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng::stream(seed, TAG_BOOT, u64::MAX);
        (0..n).map(|_| self.quantile(rng::uniform(&mut rng))).collect()
    }

    /// Exact `∫|F_n − F|` between an empirical sample and this law.
    pub fn w1_to(&self, samples: &[f64]) -> f64 {
        let mut x = samples.to_vec();
        x.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = x.len() as f64;
        let (g0, g1) = (self.grid[0], *self.grid.last().unwrap());
        let mut pts: Vec<f64> = self.grid.clone();
        pts.extend(x.iter().copied());
        pts.push(x[0].min(g0));
        pts.push(x[x.len() - 1].max(g1));
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.dedup();
        let mut total = 0.0;
        let mut k = 0usize;
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            while k < x.len() && x[k] <= a {
                k += 1;
            }
            let level = k as f64 / n;
            let fa = self.cdf_at(a) - level;
            let fb = self.cdf_at(b) - level;
            let g = |u: f64| (self.cdf_at(u) - level).abs();
            if fa * fb < 0.0 {
                // F is monotone, so |F − level| has a single kink in this cell
                let (mut lo, mut hi) = (a, b);
                for _ in 0..60 {
                    let m = 0.5 * (lo + hi);
                    if (self.cdf_at(m) - level) * fa > 0.0 {
                        lo = m;
                    } else {
                        hi = m;
                    }
                }
                let c = 0.5 * (lo + hi);
                total += gauss_legendre8(&g, a, c) + gauss_legendre8(&g, c, b);
            } else {
                total += gauss_legendre8(&g, a, b);
            }
        }
        total
    }
}

/// Values on a log-log convergence plot.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceCurve {
    pub h: Vec<f64>,
    pub error: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Least-squares slope of `ln error` against `ln h`.
    pub slope: f64,
}

impl ConvergenceCurve {
    fn from_points(h: Vec<f64>, error: Vec<f64>, stderr: Vec<f64>) -> Self {
        let lx: Vec<f64> = h.iter().map(|v| v.ln()).collect();
        let ly: Vec<f64> = error.iter().map(|v| v.ln()).collect();
        let slope = if h.len() >= 2 && error.iter().all(|&e| e > 0.0) { linear_fit(&lx, &ly).0 } else { f64::NAN };
        ConvergenceCurve { h, error, stderr, slope }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("h,error,stderr\n");
        for i in 0..self.h.len() {
            s.push_str(&format!("{},{},{}\n", self.h[i], self.error[i], self.stderr[i]));
        }
        s
    }

    /// Errors strictly decrease as `h` decreases (entries sorted by decreasing `h`).
    pub fn strictly_decreasing(&self) -> bool {
        self.error.windows(2).all(|w| w[1] < w[0])
    }

    /// Errors decrease as `h` decreases up to `k` combined standard errors.
    pub fn decreasing_within(&self, k: f64) -> bool {
        (1..self.error.len()).all(|i| {
            let tol = k * (self.stderr[i - 1].powi(2) + self.stderr[i].powi(2)).sqrt();
            self.error[i] <= self.error[i - 1] + tol
        })
    }
}

fn integer_ratio(a: f64, b: f64, what: &str) -> Result<u64> {
    let r = a / b;
    let k = r.round();
    if !(k >= 1.0) || (r - k).abs() > 1e-9 * k {
        return input(format!("{what}: {a} is not an integer multiple of {b}"));
    }
    Ok(k as u64)
}

/// Mean `|X^h_T − X^{h_ref}_T|` for each `h`, driving every coarse path with
/// the sums of the reference path's Brownian increments.
#[allow(clippy::too_many_arguments)]
pub fn strong_error_curve(
    model: &DriftModel,
    trunc: &TruncationParams,
    h_list: &[f64],
    h_ref: f64,
    t_end: f64,
    x0: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<ConvergenceCurve> {
    if h_list.is_empty() || n_paths == 0 {
        return input("need at least one step size and one path");
    }
    let ratios: Vec<u64> = h_list.iter().map(|&h| integer_ratio(h, h_ref, "step size")).collect::<Result<_>>()?;
    let n_fine = integer_ratio(t_end, h_ref, "horizon")?;
    for (&h, &q) in h_list.iter().zip(&ratios) {
        if n_fine % q != 0 {
            return input(format!("horizon {t_end} is not a multiple of h = {h}"));
        }
    }
    let fine = Tem::new(model, trunc, h_ref)?;
    let coarse: Vec<Tem> = h_list.iter().map(|&h| Tem::new(model, trunc, h)).collect::<Result<_>>()?;
    let d = model.dim();
    let per_path: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|p| -> Result<Vec<f64>> {
            let mut rng = rng::stream(seed, TAG_PATHS, p as u64);
            let mut xf = fine.initial(x0)?.x;
            let mut xs: Vec<Vec<f64>> = coarse.iter().map(|t| t.initial(x0).map(|s| s.x)).collect::<Result<_>>()?;
            let mut sums = vec![vec![0.0; d]; coarse.len()];
            let mut scratch = vec![0.0; d];
            let mut z = vec![0.0; d];
            for k in 0..n_fine {
                rng::fill_gaussian(&mut rng, h_ref, &mut z);
                fine.advance(&mut xf, &mut scratch, &z, k)?;
                for (c, tem) in coarse.iter().enumerate() {
                    sums[c].iter_mut().zip(&z).for_each(|(s, zi)| *s += zi);
                    if (k + 1) % ratios[c] == 0 {
                        let step = (k + 1) / ratios[c] - 1;
                        tem.advance(&mut xs[c], &mut scratch, &sums[c], step)?;
                        sums[c].iter_mut().for_each(|s| *s = 0.0);
                    }
                }
            }
            Ok(xs.iter().map(|x| norm(&x.iter().zip(&xf).map(|(a, b)| a - b).collect::<Vec<_>>())).collect())
        })
        .collect::<Result<_>>()?;
    let mut err = Vec::new();
    let mut se = Vec::new();
    for c in 0..h_list.len() {
        let col: Vec<f64> = per_path.iter().map(|v| v[c]).collect();
        let (m, s) = mean_and_se(&col);
        err.push(m);
        se.push(s);
    }
    Ok(ConvergenceCurve::from_points(h_list.to_vec(), err, se))
}

/// Reference law against which [`invariant_measure_error`] measures.
pub enum StationaryReference<'a> {
    /// Exact one-dimensional law.
    Density(&'a StationaryDensity1D),
    /// The empirical measure at the smallest step in the list (any dimension).
    FinestStep,
}

/// `W₁(μ_h, μ)` for each `h`, from `n_samples` independent paths run to
/// `t_stationary`, with bootstrap standard errors.
#[allow(clippy::too_many_arguments)]
pub fn invariant_measure_error(
    model: &DriftModel,
    trunc: &TruncationParams,
    h_list: &[f64],
    t_stationary: f64,
    x0: &[f64],
    n_samples: usize,
    seed: u64,
    reference: StationaryReference,
) -> Result<ConvergenceCurve> {
    if h_list.is_empty() || n_samples < 2 {
        return input("need at least one step size and two samples");
    }
    let clouds: Vec<EmpiricalMeasure> = h_list
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let steps = (t_stationary / h).round() as u64;
            let e = simulate_ensemble(model, trunc, h, n_samples, steps, &[steps], &[x0.to_vec()], seed.wrapping_add(i as u64))?;
            EmpiricalMeasure::new(model.dim(), e.states[0].clone())
        })
        .collect::<Result<_>>()?;
    let boot = 64;
    let (mut err, mut se) = (Vec::new(), Vec::new());
    let mut hs = Vec::new();
    match reference {
        StationaryReference::Density(dens) => {
            if model.dim() != 1 {
                return input("an exact density reference needs a one-dimensional model");
            }
            for (i, cloud) in clouds.iter().enumerate() {
                err.push(dens.w1_to(cloud.samples()));
                se.push(bootstrap_se(cloud, boot, seed ^ i as u64, |s| dens.w1_to(s)));
                hs.push(h_list[i]);
            }
        }
        StationaryReference::FinestStep => {
            let finest = (0..h_list.len()).min_by(|&a, &b| h_list[a].partial_cmp(&h_list[b]).unwrap()).unwrap();
            let refc = &clouds[finest];
            for (i, cloud) in clouds.iter().enumerate() {
                if i == finest {
                    continue;
                }
                let w = if model.dim() == 1 { w1_1d(cloud, refc)? } else { w1_assignment(cloud, refc)? };
                err.push(w);
                // resampling both clouds for the assignment solver is too costly; use the 1-D
                // marginal spread as a scale for the error bar in that case
                let s = if model.dim() == 1 {
                    bootstrap_se(cloud, boot, seed ^ i as u64, |s| w1_1d(&EmpiricalMeasure::from_1d(s.to_vec()).unwrap(), refc).unwrap())
                } else {
                    f64::NAN
                };
                se.push(s);
                hs.push(h_list[i]);
            }
        }
    }
    Ok(ConvergenceCurve::from_points(hs, err, se))
}

fn bootstrap_se<F: Fn(&[f64]) -> f64 + Sync>(cloud: &EmpiricalMeasure, reps: usize, seed: u64, stat: F) -> f64 {
    let s = cloud.samples();
    let n = s.len();
    let vals: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, TAG_BOOT, r as u64);
            let res: Vec<f64> = (0..n).map(|_| s[(rng::uniform(&mut rng) * n as f64) as usize % n]).collect();
            stat(&res)
        })
        .collect();
    let mut m = Moments::default();
    vals.iter().for_each(|&v| m.push(v));
    m.variance().sqrt()
}

/// W₁ between ensembles started at different points, over time.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayCurve {
    pub t: Vec<f64>,
    pub w1: Vec<f64>,
    /// Median of the last quarter of the curve: the sampling-noise level.
    pub noise_floor: f64,
    /// Fitted `λ` in `W₁ ≈ C e^{−λt}` over the part of the curve above three times the floor.
    pub rate: f64,
}

impl DecayCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,w1\n");
        for (t, w) in self.t.iter().zip(&self.w1) {
            s.push_str(&format!("{t},{w}\n"));
        }
        s
    }
}

/// Simulates one ensemble per initial point (independent seeds) and returns
/// W₁ between the first ensemble and every other one at `n_checkpoints + 1`
/// equally spaced times in `[0, T]`.
#[allow(clippy::too_many_arguments)]
pub fn ergodicity_decay(
    model: &DriftModel,
    trunc: &TruncationParams,
    h: f64,
    initials: &[Vec<f64>],
    t_end: f64,
    n_paths: usize,
    n_checkpoints: u64,
    seed: u64,
) -> Result<Vec<DecayCurve>> {
    if initials.len() < 2 {
        return input("need at least two initial points");
    }
    if model.dim() > 1 && n_paths > ASSIGNMENT_CAP {
        return input(format!("multi-dimensional W1 is capped at {ASSIGNMENT_CAP} paths"));
    }
    let steps = (t_end / h).round() as u64;
    let every = (steps / n_checkpoints.max(1)).max(1);
    let checkpoints = crate::scheme::checkpoint_grid(steps, every);
    let ens: Vec<_> = initials
        .iter()
        .enumerate()
        .map(|(i, x0)| {
            simulate_ensemble(model, trunc, h, n_paths, steps, &checkpoints, std::slice::from_ref(x0), seed.wrapping_add(1 + i as u64))
        })
        .collect::<Result<_>>()?;
    let t: Vec<f64> = checkpoints.iter().map(|&k| k as f64 * h).collect();
    let mut curves = Vec::new();
    for other in &ens[1..] {
        let w1: Vec<f64> = (0..checkpoints.len())
            .into_par_iter()
            .map(|c| {
                let a = EmpiricalMeasure::new(model.dim(), ens[0].states[c].clone())?;
                let b = EmpiricalMeasure::new(model.dim(), other.states[c].clone())?;
                if model.dim() == 1 {
                    w1_1d(&a, &b)
                } else {
                    w1_assignment(&a, &b)
                }
            })
            .collect::<Result<_>>()?;
        curves.push(fit_decay(t.clone(), w1));
    }
    Ok(curves)
}

fn fit_decay(t: Vec<f64>, w1: Vec<f64>) -> DecayCurve {
    let q = w1.len() - w1.len() / 4;
    let mut tail: Vec<f64> = w1[q..].to_vec();
    tail.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let floor = tail[tail.len() / 2];
    let end = w1.iter().position(|&w| w <= 3.0 * floor).unwrap_or(w1.len());
    let (xs, ys): (Vec<f64>, Vec<f64>) = t[..end].iter().zip(&w1[..end]).filter(|(_, &w)| w > 0.0).map(|(&a, &w)| (a, w.ln())).unzip();
    let rate = if xs.len() >= 2 { -linear_fit(&xs, &ys).0 } else { f64::NAN };
    DecayCurve { t, w1, noise_floor: floor, rate }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::normal_cdf;
    use proptest::prelude::*;

    fn m1(v: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_1d(v.to_vec()).unwrap()
    }

    #[test]
    fn w1_examples() {
        assert_eq!(w1_1d(&m1(&[0.0]), &m1(&[1.0])).unwrap(), 1.0);
        assert_eq!(w1_1d(&m1(&[0.0, 2.0]), &m1(&[1.0, 3.0])).unwrap(), 1.0);
        assert_eq!(w1_assignment(&m1(&[0.0, 2.0]), &m1(&[3.0, 1.0])).unwrap(), 1.0);
        assert_eq!(w1_1d(&m1(&[0.3, -1.0]), &m1(&[-1.0, 0.3])).unwrap(), 0.0);
        assert!(EmpiricalMeasure::from_1d(vec![]).is_err());
        // unequal sizes: {0} vs {0, 1} moves half the mass by one
        assert!((w1_1d(&m1(&[0.0]), &m1(&[0.0, 1.0])).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn assignment_single_points_and_cap() {
        let a = EmpiricalMeasure::new(2, vec![0.0, 0.0]).unwrap();
        let b = EmpiricalMeasure::new(2, vec![3.0, 4.0]).unwrap();
        assert_eq!(w1_assignment(&a, &b).unwrap(), 5.0);
        let big = EmpiricalMeasure::new(1, vec![0.0; ASSIGNMENT_CAP + 1]).unwrap();
        assert!(matches!(w1_assignment(&big, &big), Err(Error::Input(_))));
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 1 {
            return vec![vec![0]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..n {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn assignment_matches_brute_force() {
        let a = EmpiricalMeasure::new(2, vec![0.0, 0.0, 1.0, 0.2, -0.5, 2.0, 3.0, -1.0]).unwrap();
        let b = EmpiricalMeasure::new(2, vec![0.9, 0.1, 2.5, -1.2, 0.1, 0.3, -0.4, 1.7]).unwrap();
        let cost = |i: usize, j: usize| norm(&[a.point(i)[0] - b.point(j)[0], a.point(i)[1] - b.point(j)[1]]);
        let best =
            permutations(4).iter().map(|p| p.iter().enumerate().map(|(i, &j)| cost(i, j)).sum::<f64>() / 4.0).fold(f64::INFINITY, f64::min);
        assert!((w1_assignment(&a, &b).unwrap() - best).abs() < 1e-12);
    }

    #[test]
    fn ks_examples() {
        let n = 999;
        let q: Vec<f64> = (1..=n).map(|i| i as f64 / (n + 1) as f64).collect();
        let d = ks_statistic(&m1(&q), |u| u.clamp(0.0, 1.0)).unwrap();
        assert!(d <= 1.0 / (n + 1) as f64 + 1e-12);
        let far = ks_statistic(&m1(&[50.0; 10]), normal_cdf).unwrap();
        assert!(far > 1.0 - 1e-12);
    }

    #[test]
    fn ou_density_is_gaussian() {
        let d = stationary_density_1d(|u| -u, 1.0).unwrap();
        let sd = 0.5f64.sqrt();
        let sup = d.grid.iter().map(|&u| (d.cdf_at(u) - normal_cdf(u / sd)).abs()).fold(0.0, f64::max);
        assert!(sup < 1e-8, "{sup}");
        let mid = (0..1000).map(|i| -3.0 + 0.006 * i as f64 + 0.0013).map(|u| (d.cdf_at(u) - normal_cdf(u / sd)).abs()).fold(0.0, f64::max);
        assert!(mid < 1e-8, "{mid}");
        assert!((d.trapezoid_mass() - 1.0).abs() < 1e-8);
        assert!((d.cdf.last().unwrap() - 1.0).abs() < 1e-12);
        assert!((d.quantile(0.975) - 1.959963984540054 * sd).abs() < 1e-8);
    }

    #[test]
    fn double_well_density_shape() {
        let d = stationary_density_1d(|u| u - u * u * u, 1.0).unwrap();
        // p ∝ e^{u² − u⁴/2}: peaks at ±1, symmetric
        let z = crate::quad::adaptive_simpson(&|u: f64| (u * u - 0.5 * u.powi(4)).exp(), -8.0, 7.0, 1e-13);
        assert!((d.density_at(1.0) - 0.5f64.exp() / z).abs() < 1e-7);
        assert!((d.cdf_at(0.0) - 0.5).abs() < 1e-10);
        let m2 = crate::quad::adaptive_simpson(&|u: f64| u * u * (u * u - 0.5 * u.powi(4)).exp(), -8.0, 7.0, 1e-13) / z;
        let got = d.expectation(|u| u * u);
        assert!((got - m2).abs() < 1e-9, "{got} vs {m2}");
    }

    #[test]
    fn w1_to_density_of_quantile_sample_is_small() {
        let d = stationary_density_1d(|u| -u, 1.0).unwrap();
        let n = 2000;
        let q: Vec<f64> = (0..n).map(|i| d.quantile((i as f64 + 0.5) / n as f64)).collect();
        let w = d.w1_to(&q);
        assert!(w < 2e-3, "{w}");
        let shifted: Vec<f64> = q.iter().map(|v| v + 0.1).collect();
        assert!((d.w1_to(&shifted) - 0.1).abs() < 2e-3);
    }

    #[test]
    fn decay_fit_recovers_rate() {
        let t: Vec<f64> = (0..200).map(|i| i as f64 * 0.1).collect();
        let w: Vec<f64> = t.iter().map(|&s| 2.0 * (-0.7 * s).exp() + 1e-4).collect();
        let c = fit_decay(t, w);
        assert!((c.rate - 0.7).abs() < 0.02, "{}", c.rate);
    }

    #[test]
    fn strong_error_rejects_incommensurate_steps() {
        let m = DriftModel::double_well();
        let t = TruncationParams::new(4.5, 0.25, 0.25, crate::model::GrowthConstants::new(1.5, 2.0).unwrap()).unwrap();
        assert!(strong_error_curve(&m, &t, &[0.3], 0.125, 1.0, &[1.0], 4, 0).is_err());
        let c = strong_error_curve(&m, &t, &[0.125], 0.125, 1.0, &[1.0], 4, 0).unwrap();
        assert_eq!(c.error, vec![0.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn w1_oracle_equivalence_and_metric(
            a in proptest::collection::vec(-5.0f64..5.0, 1..40),
            seed in 0u64..1000,
        ) {
            let n = a.len();
            let mut rng = rng::stream(seed, TAG_BOOT, 0);
            let b: Vec<f64> = (0..n).map(|_| 10.0 * rng::uniform(&mut rng) - 5.0).collect();
            let c: Vec<f64> = (0..n).map(|_| 10.0 * rng::uniform(&mut rng) - 5.0).collect();
            let (ma, mb, mc) = (m1(&a), m1(&b), m1(&c));
            let exact = w1_1d(&ma, &mb).unwrap();
            prop_assert!((exact - w1_assignment(&ma, &mb).unwrap()).abs() < 1e-10);
            prop_assert_eq!(exact, w1_1d(&mb, &ma).unwrap());
            prop_assert!(w1_1d(&ma, &mc).unwrap() <= exact + w1_1d(&mb, &mc).unwrap() + 1e-10);
            let mut perm = a.clone();
            perm.reverse();
            prop_assert_eq!(ks_statistic(&ma, normal_cdf).unwrap(), ks_statistic(&m1(&perm), normal_cdf).unwrap());
        }
    }
}
