use std::fmt;

/// A strictly positive real stored through its natural logarithm.
///
/// Several coupling constants (`c*`, the contraction rate `c`, the step
/// ceiling `h1`, `ϕ(r1)`) are far below the smallest positive `f64` for
/// realistic models. Keeping the logarithm lets the library compare and
/// report them exactly while [`LogPositive::value`] flushes to zero.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct LogPositive {
    ln: f64,
}

impl LogPositive {
    pub fn from_ln(ln: f64) -> Self {
        LogPositive { ln }
    }

    /// Returns `None` unless `v` is positive and finite.
    pub fn new(v: f64) -> Option<Self> {
        (v > 0.0 && v.is_finite()).then(|| LogPositive { ln: v.ln() })
    }

    pub fn ln(self) -> f64 {
        self.ln
    }

    /// The value as an `f64`; underflows to `0.0` below the subnormal range.
    pub fn value(self) -> f64 {
        self.ln.exp()
    }

    /// True when the value is a normal (not subnormal, not zero) `f64`.
    pub fn is_representable(self) -> bool {
        self.ln >= f64::MIN_POSITIVE.ln() && self.ln <= f64::MAX.ln()
    }

    pub fn min(self, other: Self) -> Self {
        if other.ln < self.ln {
            other
        } else {
            self
        }
    }

    pub fn max(self, other: Self) -> Self {
        if other.ln > self.ln {
            other
        } else {
            self
        }
    }

    pub fn mul(self, other: Self) -> Self {
        LogPositive::from_ln(self.ln + other.ln)
    }

    pub fn div(self, other: Self) -> Self {
        LogPositive::from_ln(self.ln - other.ln)
    }

    pub fn powf(self, p: f64) -> Self {
        LogPositive::from_ln(self.ln * p)
    }

    pub fn scale(self, k: f64) -> Self {
        debug_assert!(k > 0.0);
        LogPositive::from_ln(self.ln + k.ln())
    }
}

impl fmt::Display for LogPositive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_representable() {
            write!(f, "{}", self.value())
        } else {
            write!(f, "exp({})", self.ln)
        }
    }
}
