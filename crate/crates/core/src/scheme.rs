//! The truncated Euler-Maruyama iteration
//!
//! ```text
//! X_0 = π_h(x_0),   X̂_{k+1} = X_k + h b(X_k) + σ Z_{k+1},   X_{k+1} = π_h(X̂_{k+1})
//! ```
//!
//! with `Z_{k+1} ~ N(0, hI)`, and ensemble simulation over independent paths.

use crate::calibrate::{truncate_to, truncation_radius, TruncationParams};
use crate::error::{input, Error, Result};
use crate::model::DriftModel;
use crate::quad::Moments;
use crate::rng::{self, StreamRng, TAG_PATHS};
use rayon::prelude::*;

/// Pre-truncation states beyond this norm abort the run.
pub const OVERFLOW_GUARD: f64 = 1e8;

#[derive(Clone, Debug, PartialEq)]
pub struct TemState {
    pub k: u64,
    /// The truncated state `X_k`.
    pub x: Vec<f64>,
    /// The state before truncation, `X̂_k`; `None` at `k = 0`.
    pub x_hat: Option<Vec<f64>>,
}

/// One TEM integrator bound to a model, truncation and step size.
#[derive(Clone, Debug)]
pub struct Tem<'a> {
    model: &'a DriftModel,
    h: f64,
    radius: f64,
}

impl<'a> Tem<'a> {
    pub fn new(model: &'a DriftModel, trunc: &TruncationParams, h: f64) -> Result<Self> {
        let radius = truncation_radius(h, trunc)?;
        Ok(Tem { model, h, radius })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn model(&self) -> &DriftModel {
        self.model
    }

    /// `π_h(x0)`.
    pub fn initial(&self, x0: &[f64]) -> Result<TemState> {
        if x0.len() != self.model.dim() {
            return input(format!("initial point has dimension {}, model has {}", x0.len(), self.model.dim()));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return input("initial point must be finite");
        }
        let mut x = x0.to_vec();
        truncate_to(&mut x, self.radius);
        Ok(TemState { k: 0, x, x_hat: None })
    }

    /// Advances `x` in place with increment `z ~ N(0, hI)` and leaves the
    /// pre-truncation state in `x_hat`. Returns whether truncation was active.
    #[inline]
    pub fn advance(&self, x: &mut [f64], x_hat: &mut [f64], z: &[f64], k: u64) -> Result<bool> {
        self.model.drift_into(x, x_hat);
        let sigma = self.model.sigma();
        let mut n2 = 0.0;
        for i in 0..x.len() {
            let v = x[i] + self.h * x_hat[i] + sigma * z[i];
            x_hat[i] = v;
            n2 += v * v;
        }
        if !(n2.sqrt() <= OVERFLOW_GUARD) {
            return Err(Error::Numerical {
                step: k + 1,
                message: format!("pre-truncation state has norm {} (h = {} is likely above the admissible ceiling)", n2.sqrt(), self.h),
            });
        }
        x.copy_from_slice(x_hat);
        let truncated = n2 > self.radius * self.radius;
        truncate_to(x, self.radius);
        Ok(truncated)
    }
}

/// One TEM step from `state` with the Gaussian increment `z ~ N(0, hI)`.
pub fn tem_step(state: &TemState, model: &DriftModel, h: f64, trunc: &TruncationParams, z: &[f64]) -> Result<TemState> {
    if z.len() != model.dim() || state.x.len() != model.dim() {
        return input("state and increment must match the model dimension");
    }
    if state.x.iter().chain(z).any(|v| !v.is_finite()) {
        return Err(Error::Numerical { step: state.k, message: "non-finite state or increment".into() });
    }
    let tem = Tem::new(model, trunc, h)?;
    let mut x = state.x.clone();
    let mut x_hat = vec![0.0; x.len()];
    tem.advance(&mut x, &mut x_hat, z, state.k)?;
    Ok(TemState { k: state.k + 1, x, x_hat: Some(x_hat) })
}

/// States of `n_paths` independent paths at a list of step indices.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    pub n_paths: usize,
    pub dim: usize,
    pub checkpoints: Vec<u64>,
    /// `states[c][p * dim + i]`: coordinate `i` of path `p` at checkpoint `c`.
    pub states: Vec<Vec<f64>>,
    pub seed: u64,
    pub h: f64,
    /// Number of steps, over all paths, in which the truncation was active.
    pub truncations: u64,
}

impl PathEnsemble {
    pub fn state(&self, checkpoint: usize, path: usize) -> &[f64] {
        &self.states[checkpoint][path * self.dim..(path + 1) * self.dim]
    }

    /// Coordinate `coord` of every path at a checkpoint.
    pub fn coordinate(&self, checkpoint: usize, coord: usize) -> Vec<f64> {
        self.states[checkpoint].iter().skip(coord).step_by(self.dim).copied().collect()
    }

    /// Monte Carlo mean and standard error of `g(X)` at each checkpoint.
    pub fn observable<G: Fn(&[f64]) -> f64 + Sync>(&self, g: G) -> Vec<(f64, f64)> {
        self.states
            .iter()
            .map(|s| {
                let mut m = Moments::default();
                s.chunks(self.dim).for_each(|x| m.push(g(x)));
                (m.mean(), m.std_error())
            })
            .collect()
    }
}

/// Simulates independent TEM paths and records them at `checkpoints`.
///
/// `initial` holds either one point shared by all paths or one point per
/// path. Path `p` draws from its own stream `(seed, p)`, so the result does
/// not depend on the number of worker threads.
#[allow(clippy::too_many_arguments)]
pub fn simulate_ensemble(
    model: &DriftModel,
    trunc: &TruncationParams,
    h: f64,
    n_paths: usize,
    n_steps: u64,
    checkpoints: &[u64],
    initial: &[Vec<f64>],
    seed: u64,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return input("n_paths must be positive");
    }
    if initial.len() != 1 && initial.len() != n_paths {
        return input(format!("need 1 or {n_paths} initial points, got {}", initial.len()));
    }
    if checkpoints.windows(2).any(|w| w[1] <= w[0]) || checkpoints.last().is_some_and(|&c| c > n_steps) {
        return input("checkpoints must be strictly increasing and within [0, n_steps]");
    }
    let tem = Tem::new(model, trunc, h)?;
    let dim = model.dim();
    for x0 in initial {
        tem.initial(x0)?;
    }
    let per_path: Vec<(Vec<f64>, u64)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let x0 = if initial.len() == 1 { &initial[0] } else { &initial[p] };
            let mut rng = rng::stream(seed, TAG_PATHS, p as u64);
            run_path(&tem, x0, n_steps, checkpoints, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut states = vec![vec![0.0; n_paths * dim]; checkpoints.len()];
    let mut truncations = 0;
    for (p, (rec, t)) in per_path.iter().enumerate() {
        truncations += t;
        for (c, s) in states.iter_mut().enumerate() {
            s[p * dim..(p + 1) * dim].copy_from_slice(&rec[c * dim..(c + 1) * dim]);
        }
    }
    Ok(PathEnsemble { n_paths, dim, checkpoints: checkpoints.to_vec(), states, seed, h, truncations })
}

fn run_path(tem: &Tem, x0: &[f64], n_steps: u64, checkpoints: &[u64], rng: &mut StreamRng) -> Result<(Vec<f64>, u64)> {
    let dim = x0.len();
    let mut x = tem.initial(x0)?.x;
    let mut x_hat = vec![0.0; dim];
    let mut z = vec![0.0; dim];
    let mut rec = Vec::with_capacity(checkpoints.len() * dim);
    let mut next = 0;
    let mut truncations = 0;
    for k in 0..=n_steps {
        while next < checkpoints.len() && checkpoints[next] == k {
            rec.extend_from_slice(&x);
            next += 1;
        }
        if k == n_steps || next == checkpoints.len() {
            break;
        }
        rng::fill_gaussian(rng, tem.h, &mut z);
        truncations += u64::from(tem.advance(&mut x, &mut x_hat, &z, k)?);
    }
    Ok((rec, truncations))
}

/// Monte Carlo estimate of `E|X_k|^q`, with standard error, at each checkpoint.
pub fn moment_estimate(ens: &PathEnsemble, q: f64) -> Result<Vec<(f64, f64)>> {
    if !(q > 0.0) {
        return input(format!("moment order must be positive, got {q}"));
    }
    Ok(ens.observable(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt().powf(q)))
}

/// Evenly spaced checkpoints `0, every, 2·every, …` up to `n_steps` inclusive.
pub fn checkpoint_grid(n_steps: u64, every: u64) -> Vec<u64> {
    let every = every.max(1);
    let mut v: Vec<u64> = (0..=n_steps / every).map(|i| i * every).collect();
    if *v.last().unwrap() != n_steps {
        v.push(n_steps);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::truncate;
    use crate::model::GrowthConstants;

    fn dw_trunc() -> TruncationParams {
        TruncationParams::new(4.5, 0.25, 0.25, GrowthConstants::new(1.5, 2.0).unwrap()).unwrap()
    }

    #[test]
    fn zero_drift_zero_noise_is_a_fixed_point() {
        let model = DriftModel::polynomial(vec![vec![0.0], vec![0.0]], 1.0).unwrap();
        let t = TruncationParams::new(3.0, 0.25, 0.25, GrowthConstants::new(1.0, 1.0).unwrap()).unwrap();
        let s = TemState { k: 4, x: vec![0.3, -0.2], x_hat: None };
        let n = tem_step(&s, &model, 0.01, &t, &[0.0, 0.0]).unwrap();
        assert_eq!(n.x, s.x);
        assert_eq!(n.k, 5);
    }

    #[test]
    fn double_well_steps() {
        let m = DriftModel::double_well();
        let t = dw_trunc();
        let s = TemState { k: 0, x: vec![1.0], x_hat: None };
        assert_eq!(tem_step(&s, &m, 0.01, &t, &[0.0]).unwrap().x_hat, Some(vec![1.0]));
        let s = TemState { k: 0, x: vec![0.5], x_hat: None };
        let n = tem_step(&s, &m, 0.1, &t, &[0.2]).unwrap();
        let expect = 0.5 + 0.1 * 0.375 + 0.2;
        assert!((n.x_hat.unwrap()[0] - expect).abs() < 1e-15);
        // radius at h = 0.1 is ((4.5·0.1^{-1/4} − 1.5)/3)^{1/2} ≈ 1.45 > 0.7375
        assert!(truncation_radius(0.1, &t).unwrap() > 0.7375);
        assert!((n.x[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn overflow_and_bad_input() {
        let m = DriftModel::double_well();
        let t = dw_trunc();
        let s = TemState { k: 7, x: vec![0.0], x_hat: None };
        match tem_step(&s, &m, 0.5, &t, &[2e8]) {
            Err(Error::Numerical { step, .. }) => assert_eq!(step, 8),
            other => panic!("{other:?}"),
        }
        assert!(matches!(tem_step(&s, &m, 0.5, &t, &[f64::NAN]), Err(Error::Numerical { .. })));
    }

    #[test]
    fn zero_steps_returns_truncated_initials() {
        let m = DriftModel::double_well();
        let t = dw_trunc();
        let e = simulate_ensemble(&m, &t, 0.01, 5, 0, &[0], &[vec![100.0]], 1).unwrap();
        let r = truncate(&[100.0], 0.01, &t).unwrap()[0];
        assert!(e.states[0].iter().all(|&v| v == r));
    }

    #[test]
    fn ensembles_are_reproducible_and_thread_independent() {
        let m = DriftModel::sin2();
        let t = TruncationParams::new(9.0, 0.25, 0.25, GrowthConstants::new(3.0, 1.0).unwrap()).unwrap();
        let a = simulate_ensemble(&m, &t, 0.01, 64, 200, &[0, 100, 200], &[vec![1.0, 0.5]], 5).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| simulate_ensemble(&m, &t, 0.01, 64, 200, &[0, 100, 200], &[vec![1.0, 0.5]], 5).unwrap());
        assert_eq!(a, b);
        let c = simulate_ensemble(&m, &t, 0.01, 64, 200, &[0, 100, 200], &[vec![1.0, 0.5]], 6).unwrap();
        assert_ne!(a.states[2], c.states[2]);
    }

    #[test]
    fn states_stay_inside_radius() {
        let m = DriftModel::double_well();
        let t = dw_trunc();
        let h = 0.25;
        let e = simulate_ensemble(&m, &t, h, 200, 50, &checkpoint_grid(50, 1), &[vec![3.0]], 2).unwrap();
        let r = truncation_radius(h, &t).unwrap();
        assert!(e.states.iter().flatten().all(|v| v.abs() <= r * (1.0 + 1e-12)));
        assert!(e.truncations > 0);
    }

    #[test]
    fn sin2_never_truncates_at_moderate_step() {
        // globally Lipschitz drift: the scheme is plain Euler-Maruyama
        let m = DriftModel::sin2();
        let t = TruncationParams::new(9.0, 0.25, 0.25, GrowthConstants::new(3.0, 1.0).unwrap()).unwrap();
        let e = simulate_ensemble(&m, &t, 2f64.powi(-6), 200, 1280, &[1280], &[vec![1.0, 0.5]], 4).unwrap();
        assert_eq!(e.truncations, 0);
    }

    #[test]
    fn point_mass_moments() {
        let m = DriftModel::sin2();
        let t = TruncationParams::new(9.0, 0.25, 0.25, GrowthConstants::new(3.0, 1.0).unwrap()).unwrap();
        let e = simulate_ensemble(&m, &t, 1e-4, 10, 0, &[0], &[vec![3.0, 4.0]], 0).unwrap();
        let mom = moment_estimate(&e, 3.0).unwrap();
        assert!((mom[0].0 - 125.0).abs() < 1e-12);
        assert_eq!(mom[0].1, 0.0);
        assert!(moment_estimate(&e, 0.0).is_err());
    }

    #[test]
    fn checkpoint_grid_includes_end() {
        assert_eq!(checkpoint_grid(10, 4), vec![0, 4, 8, 10]);
        assert_eq!(checkpoint_grid(8, 4), vec![0, 4, 8]);
    }
}
