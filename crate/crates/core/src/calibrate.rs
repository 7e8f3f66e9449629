//! Scheme and coupling parameters: the truncation map, step-size ceilings
//! and the coupling constants.
//!
//! The coupling cut-off `m` enters `r1 = 2R + 2m`, which in turn fixes
//! `c*` and `Φ(1)`, which feed back into the recipe for `m`. Two rules
//! resolve that loop, see [`MRule`].

use crate::distfn::{DistParams, DistanceFunction};
use crate::error::{input, Error, Result};
use crate::logpos::LogPositive;
use crate::model::{DissipativityConstants, DriftModel, GrowthConstants};
use crate::quad::{adaptive_simpson, normal_pdf};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

pub const DEFAULT_THETA_BAR: f64 = 0.25;
const QUAD_TOL: f64 = 1e-12;
const FIXED_POINT_TOL: f64 = 1e-9;
const FIXED_POINT_MAX_ITER: usize = 100;
/// Smallest `m` the contraction estimate admits for steps `h ≤ 1`.
pub const M_FLOOR: f64 = 8.0;

/// `φ(u) = L*(1 + 2u^ℓ)`.
pub fn growth_bound(u: f64, g: &GrowthConstants) -> f64 {
    g.lstar * (1.0 + 2.0 * u.powf(g.ell))
}

/// `φ⁻¹(v) = ((v − L*)/(2L*))^{1/ℓ}` for `v > L*`.
pub fn growth_bound_inverse(v: f64, g: &GrowthConstants) -> Result<f64> {
    if !(v > g.lstar) {
        return Err(Error::Domain(format!("φ⁻¹ needs v > L* = {} (got {v})", g.lstar)));
    }
    Ok(((v - g.lstar) / (2.0 * g.lstar)).powf(1.0 / g.ell))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncationParams {
    /// `M` in the truncation level `M h^{−θ}`.
    pub m_big: f64,
    pub theta: f64,
    pub theta_bar: f64,
    pub growth: GrowthConstants,
}

impl TruncationParams {
    /// Checks `0 < θ ≤ θ̄ < 1/2` and `M > L*`, which keeps the radius defined
    /// for every `h ≤ 1`. The stronger requirements `M ≥ |b(0)|` and
    /// `M ≥ 3L*` are model dependent; see [`TruncationParams::check_model`].
    pub fn new(m_big: f64, theta: f64, theta_bar: f64, growth: GrowthConstants) -> Result<Self> {
        if !(theta > 0.0 && theta <= theta_bar && theta_bar < 0.5) {
            return input(format!("need 0 < θ ≤ θ̄ < 1/2 (got θ = {theta}, θ̄ = {theta_bar})"));
        }
        if !(m_big > growth.lstar && m_big.is_finite()) {
            return input(format!("M = {m_big} must be finite and exceed L* = {}", growth.lstar));
        }
        Ok(TruncationParams { m_big, theta, theta_bar, growth })
    }

    /// `M = max{|b(0)|, 3L*, 1, √K, 1/(512R|σ|)}` with `θ = θ̄`; the last
    /// term is dropped when `R = 0`.
    pub fn recipe(model: &DriftModel, consts: &DissipativityConstants, growth: &GrowthConstants, theta_bar: f64) -> Result<Self> {
        let mut m = model.drift_at_origin_norm().max(3.0 * growth.lstar).max(1.0).max(consts.k.sqrt());
        if consts.r > 0.0 {
            m = m.max(1.0 / (512.0 * consts.r * model.sigma().abs()));
        }
        Self::new(m, theta_bar, theta_bar, *growth)
    }

    pub fn check_model(&self, model: &DriftModel) -> Result<()> {
        if self.m_big < model.drift_at_origin_norm() || self.m_big < 3.0 * self.growth.lstar {
            return input(format!(
                "M = {} must dominate |b(0)| = {} and 3L* = {}",
                self.m_big,
                model.drift_at_origin_norm(),
                3.0 * self.growth.lstar
            ));
        }
        Ok(())
    }
}

/// `φ⁻¹(M h^{−θ})`.
pub fn truncation_radius(h: f64, trunc: &TruncationParams) -> Result<f64> {
    if !(h > 0.0 && h <= 1.0) {
        return input(format!("step size must lie in (0, 1], got {h}"));
    }
    growth_bound_inverse(trunc.m_big * h.powf(-trunc.theta), &trunc.growth)
}

/// Radial projection onto the ball of radius `radius`.
#[inline]
pub fn truncate_to(x: &mut [f64], radius: f64) {
    let n2: f64 = x.iter().map(|v| v * v).sum();
    if n2 > radius * radius {
        let s = radius / n2.sqrt();
        x.iter_mut().for_each(|v| *v *= s);
    }
}

/// `π_h(x)`.
pub fn truncate(x: &[f64], h: f64, trunc: &TruncationParams) -> Result<Vec<f64>> {
    let radius = truncation_radius(h, trunc)?;
    let mut out = x.to_vec();
    truncate_to(&mut out, radius);
    Ok(out)
}

/// `c1 = 5/(|σ|³√(2π)) · min{e^{−1/(2σ²)}, 8e^{−32/σ²}}`.
pub fn c1_constant(sigma: f64) -> f64 {
    let s = sigma.abs();
    let s2 = s * s;
    5.0 / (s * s2 * (2.0 * PI).sqrt()) * (-0.5 / s2).exp().min(8.0 * (-32.0 / s2).exp())
}

/// `c2 = 4|σ|³(1 − e^{−1/σ²}) ∫₀^{1/(2|σ|)} u³ p(u) du` with `p` the standard normal density.
pub fn c2_constant(sigma: f64) -> f64 {
    let s = sigma.abs();
    let moment = adaptive_simpson(&|u: f64| u * u * u * normal_pdf(u), 0.0, 0.5 / s, QUAD_TOL);
    4.0 * s.powi(3) * (1.0 - (-1.0 / (s * s)).exp()) * moment
}

/// `c3 = (1 − e^{−1/(8σ²)})/16 · ∫_{1/(4|σ|)}^{3/(8|σ|)} p(u) du`.
pub fn c3_constant(sigma: f64) -> f64 {
    let s = sigma.abs();
    let mass = adaptive_simpson(&normal_pdf, 0.25 / s, 0.375 / s, QUAD_TOL);
    (1.0 - (-1.0 / (8.0 * s * s)).exp()) / 16.0 * mass
}

/// The quantities the ceilings depend on besides `(L, K, R)` and `M`.
#[derive(Clone, Copy, Debug)]
pub struct CeilingInputs {
    pub c1: f64,
    pub c3: f64,
    pub cstar: LogPositive,
    pub r1: f64,
    pub phi_one: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCeilings {
    pub hbar: f64,
    /// Carried in log form: its `c*` term is usually far below `f64` range.
    pub h1: LogPositive,
    pub h2: f64,
    pub h3: f64,
}

impl StepCeilings {
    /// `min(h1, h2, h3)`.
    pub fn joint(&self) -> LogPositive {
        self.h1.min(LogPositive::from_ln(self.h2.ln())).min(LogPositive::from_ln(self.h3.ln()))
    }
}

fn positive(name: &str, v: f64) -> Result<LogPositive> {
    LogPositive::new(v).ok_or_else(|| Error::Calibration(format!("{name} = {v} is not a positive finite number")))
}

fn min_ln(terms: &[(&str, f64)]) -> Result<f64> {
    let mut best = f64::INFINITY;
    for &(name, ln) in terms {
        if ln.is_nan() {
            return Err(Error::Calibration(format!("ceiling term {name} is undefined")));
        }
        best = best.min(ln);
    }
    // all ceilings are clamped to (0, 1]
    Ok(best.min(0.0))
}

/// `h̄`, `h1`, `h2`, `h3`, each clamped to at most one.
pub fn step_ceilings(consts: &DissipativityConstants, trunc: &TruncationParams, inp: &CeilingInputs) -> Result<StepCeilings> {
    let tb = trunc.theta_bar;
    let m = positive("M", trunc.m_big)?.ln();
    let k = positive("K", consts.k)?.ln();
    let l = positive("L", consts.l)?.ln();
    let r = positive("R", consts.r)?.ln();
    let r1 = positive("r1", inp.r1)?.ln();
    let c1 = positive("c1", inp.c1)?.ln();
    let c3 = positive("c3", inp.c3)?.ln();
    let phi1 = positive("Φ(1)", inp.phi_one)?.ln();
    let cstar = inp.cstar.ln();
    let ln2 = 2f64.ln();
    let ln4 = 4f64.ln();

    let km2 = (k - 2.0 * m) / (1.0 - 2.0 * tb);
    let hbar = min_ln(&[("(KM⁻²)^{1/(1−2θ̄)}", km2), ("2/K", ln2 - k)])?;
    let two_m = (ln2 + m) / (tb - 1.0);
    let h1 = min_ln(&[
        ("(KM⁻²)^{1/(1−2θ̄)}", km2),
        ("1/K", -k),
        ("1/L", -l),
        ("(2M)^{1/(θ̄−1)}", two_m),
        ("R²", 2.0 * r),
        ("(c1c*Φ(1)/(4Mc3))^{2/(1−2θ̄)}", 2.0 * (c1 + cstar + phi1 - ln4 - m - c3) / (1.0 - 2.0 * tb)),
        ("r1²/361", 2.0 * r1 - 361f64.ln()),
    ])?;
    let h2 = min_ln(&[("(KM⁻²)^{1/(1−2θ̄)}", km2), ("1/K", -k), ("1/L", -l), ("(2M)^{1/(θ̄−1)}", two_m), ("R²", 2.0 * r)])?;
    let h3 = min_ln(&[
        ("(4M)^{1/(θ̄−1)}", (ln4 + m) / (tb - 1.0)),
        ("4R²", ln4 + 2.0 * r),
        ("(4Mr1)^{2/(2θ̄−1)}", 2.0 * (ln4 + m + r1) / (2.0 * tb - 1.0)),
        ("M^{1/(2θ̄−1)}", m / (2.0 * tb - 1.0)),
    ])?;
    Ok(StepCeilings { hbar: hbar.exp(), h1: LogPositive::from_ln(h1), h2: h2.exp(), h3: h3.exp() })
}

/// How the circular dependency between `m` and `(r1, c*, Φ(1))` is resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MRule {
    /// Iterate `m ← max{8, c3²/(8Φ(1)²c*c2) − R}` from `m = 8`.
    FixedPoint,
    /// Take `m = 8` and raise `M` to `max{M, c2c*Φ(1)/(4c3), c3/(16r1Φ(1))}`,
    /// the conditions the contraction estimate places on `M` once `m` is fixed.
    Floor,
}

impl MRule {
    pub fn name(self) -> &'static str {
        match self {
            MRule::FixedPoint => "fixed-point",
            MRule::Floor => "floor",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub trunc: TruncationParams,
    pub consts: DissipativityConstants,
    pub sigma: f64,
    pub m_rule: MRule,
    /// `H`, the largest drifted distance at which the coupling may stick or reflect.
    pub h_big: f64,
    /// `m`, the slab half-width of the coupling.
    pub m_small: f64,
    pub r1: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub cstar: LogPositive,
    /// Contraction rate.
    pub c: LogPositive,
    pub phi_one: f64,
    pub phi_r1: LogPositive,
    pub ceilings: StepCeilings,
}

impl Calibration {
    pub fn dist_params(&self) -> DistParams {
        DistParams { l: self.consts.l, c3: self.c3, r1: self.r1 }
    }

    pub fn distance_function(&self) -> Result<DistanceFunction> {
        DistanceFunction::build(self.dist_params())
    }

    /// Checks the relations every calibration must satisfy.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Calibration(m));
        let t = &self.trunc;
        if !(t.theta > 0.0 && t.theta <= t.theta_bar && t.theta_bar < 0.5) {
            return fail("θ range violated".into());
        }
        if t.m_big < 3.0 * t.growth.lstar {
            return fail(format!("M = {} below 3L* = {}", t.m_big, 3.0 * t.growth.lstar));
        }
        if self.r1 != 2.0 * self.consts.r + 2.0 * self.m_small {
            return fail("r1 ≠ 2R + 2m".into());
        }
        let ln_upper = self.c3.ln() - (4.0 * self.r1 * self.phi_one).ln();
        let ln_lower = self.c3.ln() + self.phi_r1.ln() - (4.0 * self.r1 * (self.r1 + 1.0)).ln();
        let eps = 1e-9 * self.cstar.ln().abs().max(1.0);
        if self.cstar.ln() > ln_upper + eps || self.cstar.ln() < ln_lower - eps {
            return fail(format!("c* = {} outside its a-priori bounds", self.cstar));
        }
        let c = contraction_rate(self.cstar, self.phi_r1, &self.consts, self.r1, self.c2, self.c3, self.phi_one, t.m_big);
        if (c.ln() - self.c.ln()).abs() > 1e-12 * c.ln().abs().max(1.0) {
            return fail("c is not the minimum of its four terms".into());
        }
        if self.c.ln() + self.ceilings.joint().ln() >= 0.0 {
            return fail("c·h < 1 fails at h = min(h1, h2, h3)".into());
        }
        let s = &self.ceilings;
        for (name, ln) in [("hbar", s.hbar.ln()), ("h1", s.h1.ln()), ("h2", s.h2.ln()), ("h3", s.h3.ln())] {
            if !(ln <= 0.0 && ln > f64::NEG_INFINITY) {
                return fail(format!("{name} outside (0, 1]"));
            }
        }
        Ok(())
    }

    /// Flat `key = value` listing. Floats use Rust's shortest round-trip
    /// formatting; quantities that may underflow are written as logarithms.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("m_rule", self.m_rule.name().to_string());
        kv("sigma", self.sigma.to_string());
        kv("L", self.consts.l.to_string());
        kv("K", self.consts.k.to_string());
        kv("R", self.consts.r.to_string());
        kv("Lstar", self.trunc.growth.lstar.to_string());
        kv("ell", self.trunc.growth.ell.to_string());
        kv("M", self.trunc.m_big.to_string());
        kv("theta", self.trunc.theta.to_string());
        kv("theta_bar", self.trunc.theta_bar.to_string());
        kv("H", self.h_big.to_string());
        kv("m", self.m_small.to_string());
        kv("r1", self.r1.to_string());
        kv("c1", self.c1.to_string());
        kv("c2", self.c2.to_string());
        kv("c3", self.c3.to_string());
        kv("Phi1", self.phi_one.to_string());
        kv("ln_phi_r1", self.phi_r1.ln().to_string());
        kv("ln_cstar", self.cstar.ln().to_string());
        kv("ln_c", self.c.ln().to_string());
        kv("hbar", self.ceilings.hbar.to_string());
        kv("ln_h1", self.ceilings.h1.ln().to_string());
        kv("h2", self.ceilings.h2.to_string());
        kv("h3", self.ceilings.h3.to_string());
        s
    }

    /// Human-facing summary with the log-form quantities also shown as values.
    pub fn describe(&self) -> String {
        let mut s = self.to_kv();
        let _ = writeln!(s, "# cstar ≈ {}, c ≈ {}, h1 ≈ {}, phi(r1) ≈ {}", self.cstar, self.c, self.ceilings.h1, self.phi_r1);
        let _ = writeln!(s, "# min(h1,h2,h3) ≈ {}", self.ceilings.joint());
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("calibration line {}: expected key = value", no + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<f64> {
            let v = map.get(k).ok_or_else(|| Error::Config(format!("calibration file lacks '{k}'")))?;
            v.parse::<f64>().map_err(|_| Error::Config(format!("calibration key '{k}': bad number '{v}'")))
        };
        let m_rule = match map.get("m_rule").map(String::as_str) {
            Some("fixed-point") => MRule::FixedPoint,
            Some("floor") => MRule::Floor,
            other => return Err(Error::Config(format!("calibration m_rule: unknown value {other:?}"))),
        };
        let consts = DissipativityConstants::new(get("L")?, get("K")?, get("R")?)?;
        let growth = GrowthConstants::new(get("Lstar")?, get("ell")?)?;
        let trunc = TruncationParams::new(get("M")?, get("theta")?, get("theta_bar")?, growth)?;
        let cal = Calibration {
            trunc,
            consts,
            sigma: get("sigma")?,
            m_rule,
            h_big: get("H")?,
            m_small: get("m")?,
            r1: get("r1")?,
            c1: get("c1")?,
            c2: get("c2")?,
            c3: get("c3")?,
            cstar: LogPositive::from_ln(get("ln_cstar")?),
            c: LogPositive::from_ln(get("ln_c")?),
            phi_one: get("Phi1")?,
            phi_r1: LogPositive::from_ln(get("ln_phi_r1")?),
            ceilings: StepCeilings { hbar: get("hbar")?, h1: LogPositive::from_ln(get("ln_h1")?), h2: get("h2")?, h3: get("h3")? },
        };
        cal.validate()?;
        Ok(cal)
    }
}

/// `c = min{c*, ϕ(r1)KR/(4r1), c2c*Φ(1)/(2c3), M}`.
#[allow(clippy::too_many_arguments)]
pub fn contraction_rate(
    cstar: LogPositive,
    phi_r1: LogPositive,
    consts: &DissipativityConstants,
    r1: f64,
    c2: f64,
    c3: f64,
    phi_one: f64,
    m_big: f64,
) -> LogPositive {
    let far = LogPositive::from_ln(phi_r1.ln() + (consts.k * consts.r / (4.0 * r1)).ln());
    let mid = LogPositive::from_ln(cstar.ln() + (c2 * phi_one / (2.0 * c3)).ln());
    cstar.min(far).min(mid).min(LogPositive::from_ln(m_big.ln()))
}

struct Stage {
    df: DistanceFunction,
    r1: f64,
}

fn stage(consts: &DissipativityConstants, c3: f64, m: f64) -> Result<Stage> {
    let r1 = 2.0 * consts.r + 2.0 * m;
    let df = DistanceFunction::build(DistParams { l: consts.l, c3, r1 })?;
    Ok(Stage { df, r1 })
}

/// Calibration with the fixed-point rule for `m`.
pub fn calibrate_full(
    model: &DriftModel,
    consts: &DissipativityConstants,
    growth: &GrowthConstants,
    theta_bar: f64,
) -> Result<Calibration> {
    calibrate_with(model, consts, growth, theta_bar, MRule::FixedPoint)
}

/// Derives every parameter of the scheme and the coupling for `model`.
pub fn calibrate_with(
    model: &DriftModel,
    consts: &DissipativityConstants,
    growth: &GrowthConstants,
    theta_bar: f64,
    rule: MRule,
) -> Result<Calibration> {
    if consts.r <= 0.0 {
        return Err(Error::Calibration(
            "R = 0: the drift is uniformly dissipative and the coupling constants are undefined; \
             plain truncated EM only needs TruncationParams::recipe"
                .into(),
        ));
    }
    let mut trunc = TruncationParams::recipe(model, consts, growth, theta_bar)?;
    let sigma = model.sigma();
    let c1 = c1_constant(sigma);
    let c2 = c2_constant(sigma);
    let c3 = c3_constant(sigma);
    positive("c1", c1)?;
    positive("c2", c2)?;
    positive("c3", c3)?;

    let (m, st) = match rule {
        MRule::FixedPoint => {
            let mut m = M_FLOOR;
            let mut history = vec![m];
            let mut converged = None;
            for _ in 0..FIXED_POINT_MAX_ITER {
                let st = stage(consts, c3, m)?;
                let ln_term = 2.0 * c3.ln() - 8f64.ln() - 2.0 * st.df.phi_one().ln() - st.df.cstar().ln() - c2.ln();
                let next = (ln_term.exp() - consts.r).max(M_FLOOR);
                if !next.is_finite() || next > 1e12 {
                    return Err(Error::Calibration(format!(
                        "the fixed point for m diverges: iterates {history:?}, next iterate ≈ exp({ln_term:.6e}) \
                         (c* = {}, Φ(1) = {}); use the floor rule",
                        st.df.cstar(),
                        st.df.phi_one()
                    )));
                }
                history.push(next);
                if (next - m).abs() < FIXED_POINT_TOL {
                    converged = Some((next, st));
                    break;
                }
                m = next;
            }
            match converged {
                Some((m, _)) => (m, stage(consts, c3, m)?),
                None => {
                    let tail = &history[history.len().saturating_sub(6)..];
                    return Err(Error::Calibration(format!(
                        "the fixed point for m did not converge in {FIXED_POINT_MAX_ITER} iterations; last iterates {tail:?}"
                    )));
                }
            }
        }
        MRule::Floor => (M_FLOOR, stage(consts, c3, M_FLOOR)?),
    };

    let df = &st.df;
    let cstar = df.cstar();
    let phi_one = df.phi_one();
    if rule == MRule::Floor {
        let need_a = (cstar.ln() + (c2 * phi_one / (4.0 * c3)).ln()).exp();
        let need_b = c3 / (16.0 * st.r1 * phi_one);
        trunc.m_big = trunc.m_big.max(need_a).max(need_b);
    }
    let ceilings = step_ceilings(consts, &trunc, &CeilingInputs { c1, c3, cstar, r1: st.r1, phi_one })?;
    let c = contraction_rate(cstar, df.phi_r1(), consts, st.r1, c2, c3, phi_one, trunc.m_big);
    let cal = Calibration {
        trunc,
        consts: *consts,
        sigma,
        m_rule: rule,
        h_big: 2.0 * consts.r,
        m_small: m,
        r1: st.r1,
        c1,
        c2,
        c3,
        cstar,
        c,
        phi_one,
        phi_r1: df.phi_r1(),
        ceilings,
    };
    cal.validate()?;
    Ok(cal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::LazyLock;

    fn dw_growth() -> GrowthConstants {
        GrowthConstants::new(1.5, 2.0).unwrap()
    }

    static DW: LazyLock<Calibration> = LazyLock::new(|| {
        let model = DriftModel::double_well();
        let (k, g) = model.reference_constants().unwrap();
        calibrate_with(&model, &k, &g, DEFAULT_THETA_BAR, MRule::Floor).unwrap()
    });

    #[test]
    fn growth_bound_values() {
        let g = dw_growth();
        assert_eq!(growth_bound(0.0, &g), 1.5);
        assert_eq!(growth_bound(1.0, &g), 4.5);
        assert!((growth_bound_inverse(4.5, &g).unwrap() - 1.0).abs() < 1e-15);
        for u in [0.5, 1.0, 2.0] {
            assert!((growth_bound_inverse(growth_bound(u, &g), &g).unwrap() - u).abs() < 1e-14);
        }
        assert!(matches!(growth_bound_inverse(1.5, &g), Err(Error::Domain(_))));
    }

    #[test]
    fn radius_example() {
        let t = TruncationParams::new(3.0, 0.25, 0.25, dw_growth()).unwrap();
        // ((3·10^{1/2} − 1.5)/3)^{1/2} evaluated in high precision
        let expect = 1.631_648_755_145_659;
        assert!((truncation_radius(0.01, &t).unwrap() - expect).abs() < 4e-16);
        assert!(truncation_radius(0.0, &t).is_err());
        assert!(truncation_radius(1.5, &t).is_err());
    }

    #[test]
    fn truncate_scales_onto_sphere() {
        let mut x = vec![3.0, 4.0];
        truncate_to(&mut x, 1.0);
        assert!((x[0] - 0.6).abs() < 1e-15 && (x[1] - 0.8).abs() < 1e-15);
        let mut y = vec![0.1, -0.2];
        truncate_to(&mut y, 1.0);
        assert_eq!(y, vec![0.1, -0.2]);
    }

    #[test]
    fn constant_oracles() {
        // closed forms: ∫₀ᵇ u³φ(u) du = (2 − (b² + 2)e^{−b²/2})/√(2π)
        let b: f64 = 0.5;
        let m3 = (2.0 - (b * b + 2.0) * (-b * b / 2.0).exp()) / (2.0 * PI).sqrt();
        let c2 = 4.0 * (1.0 - (-1f64).exp()) * m3;
        assert!((c2_constant(1.0) / c2 - 1.0).abs() < 1e-10);
        let mass = 0.5 * (statrs::function::erf::erf(0.375 / 2f64.sqrt()) - statrs::function::erf::erf(0.25 / 2f64.sqrt()));
        let c3 = (1.0 - (-0.125f64).exp()) / 16.0 * mass;
        assert!((c3_constant(1.0) / c3 - 1.0).abs() < 1e-10);
        let c1 = 5.0 / (2.0 * PI).sqrt() * 8.0 * (-32f64).exp();
        assert!((c1_constant(1.0) / c1 - 1.0).abs() < 1e-14);
        assert_eq!(c1_constant(-2.0), c1_constant(2.0));
    }

    #[test]
    fn hbar_example() {
        let k = DissipativityConstants::new(1.0, 2.0, 3.0).unwrap();
        let t = TruncationParams::new(2.0, 0.25, 0.25, dw_growth()).unwrap();
        let inp = CeilingInputs { c1: 1e-13, c3: 3.5e-4, cstar: LogPositive::from_ln(-10.0), r1: 22.0, phi_one: 1e-4 };
        let s = step_ceilings(&k, &t, &inp).unwrap();
        assert!((s.hbar - 0.25).abs() < 1e-15);
    }

    #[test]
    fn double_well_calibration() {
        let c = &*DW;
        assert_eq!(c.h_big, 6.0);
        assert_eq!(c.m_small, 8.0);
        assert_eq!(c.r1, 22.0);
        assert_eq!(c.trunc.m_big, 4.5);
        assert_eq!(c.trunc.theta, 0.25);
        let s = &c.ceilings;
        for v in [s.hbar, s.h2, s.h3] {
            assert!(v > 0.0 && v <= 1.0);
        }
        // h3 = min{(18)^{-4/3}, 36, (396)^{-4}, 4.5^{-2}}
        let h3 = 18f64.powf(-4.0 / 3.0).min(396f64.powi(-4)).min(4.5f64.powi(-2));
        assert!((s.h3 / h3 - 1.0).abs() < 1e-12);
        // h2 = min{(2/20.25)^2, 1/2, 1, 9^{-4/3}, 9}
        let h2 = (2.0f64 / 20.25).powi(2).min(0.5).min(9f64.powf(-4.0 / 3.0));
        assert!((s.h2 / h2 - 1.0).abs() < 1e-12);
        assert!(s.h1.ln() < -1e6);
        assert!(c.c.ln() + s.joint().ln() < 0.0);
        c.validate().unwrap();
    }

    #[test]
    fn fixed_point_rule_reports_divergence() {
        let model = DriftModel::double_well();
        let (k, g) = model.reference_constants().unwrap();
        match calibrate_full(&model, &k, &g, DEFAULT_THETA_BAR) {
            Err(Error::Calibration(msg)) => assert!(msg.contains("diverges"), "{msg}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_radius_has_no_coupling_constants() {
        let model = DriftModel::polynomial(vec![vec![0.0, -1.0]], 1.0).unwrap();
        let k = DissipativityConstants::new(1.0, 1.0, 0.0).unwrap();
        let g = GrowthConstants::new(1.0, 1.0).unwrap();
        assert!(matches!(calibrate_with(&model, &k, &g, 0.25, MRule::Floor), Err(Error::Calibration(_))));
        let t = TruncationParams::recipe(&model, &k, &g, 0.25).unwrap();
        assert_eq!(t.m_big, 3.0);
    }

    #[test]
    fn kv_round_trip_is_exact() {
        let text = DW.to_kv();
        let back = Calibration::from_kv(&text).unwrap();
        assert_eq!(&back, &*DW);
        assert_eq!(back.to_kv(), text);
    }

    #[test]
    fn calibration_is_deterministic() {
        let model = DriftModel::double_well();
        let (k, g) = model.reference_constants().unwrap();
        let again = calibrate_with(&model, &k, &g, DEFAULT_THETA_BAR, MRule::Floor).unwrap();
        assert_eq!(again.to_kv(), DW.to_kv());
    }

    #[test]
    fn truncated_drift_is_locally_lipschitz_at_truncation_level() {
        let model = DriftModel::double_well();
        let t = DW.trunc;
        let mut rng = crate::rng::stream(9, crate::rng::TAG_CHECK, 0);
        for h in [1.0, 0.1, 2f64.powi(-10)] {
            let radius = truncation_radius(h, &t).unwrap();
            let bound = t.m_big * h.powf(-t.theta);
            for _ in 0..20_000 {
                let mut x = vec![8.0 * (crate::rng::uniform(&mut rng) - 0.5) * radius];
                let mut y = vec![8.0 * (crate::rng::uniform(&mut rng) - 0.5) * radius];
                truncate_to(&mut x, radius);
                truncate_to(&mut y, radius);
                let bx = model.eval_drift(&x).unwrap()[0];
                let by = model.eval_drift(&y).unwrap()[0];
                assert!((bx - by).abs() <= bound * (x[0] - y[0]).abs() * (1.0 + 1e-12));
            }
        }
    }

    proptest! {
        #[test]
        fn truncate_properties(x in proptest::collection::vec(-1e4f64..1e4, 1..4), h in 1e-6f64..1.0) {
            let t = DW.trunc;
            let r = truncation_radius(h, &t).unwrap();
            let once = truncate(&x, h, &t).unwrap();
            let twice = truncate(&once, h, &t).unwrap();
            let n = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!(n(&once) <= r * (1.0 + 1e-12));
            prop_assert!(n(&once) <= n(&x) * (1.0 + 1e-15));
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-12 * r);
            }
        }

        #[test]
        fn radius_decreases_in_h(h in 1e-8f64..1.0, f in 0.0f64..1.0) {
            let t = DW.trunc;
            let h2 = h + f * (1.0 - h);
            prop_assert!(truncation_radius(h, &t).unwrap() >= truncation_radius(h2, &t).unwrap());
        }
    }
}
