use serde::{Deserialize, Serialize};

/// Norm cutoff `theta_R(x) = theta(x / R)`.
///
/// `theta` is the C-infinity smooth step: exactly 1 on `[0, 1]`, exactly 0 on
/// `[2, inf)`, and `h(2 - x) / (h(2 - x) + h(x - 1))` with `h(t) = exp(-1/t)`
/// in between. Its steepest slope is `-2` at `x = 3/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutoffSpec {
    pub r: f64,
}

fn h(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        (-1.0 / t).exp()
    }
}

/// Unscaled profile `theta`.
pub fn theta(x: f64) -> f64 {
    if x <= 1.0 {
        1.0
    } else if x >= 2.0 {
        0.0
    } else {
        let a = h(2.0 - x);
        let b = h(x - 1.0);
        a / (a + b)
    }
}

/// Derivative of the unscaled profile.
pub fn theta_prime(x: f64) -> f64 {
    if x <= 1.0 || x >= 2.0 {
        return 0.0;
    }
    let (s, u) = (x - 1.0, 2.0 - x);
    let (a, b) = (h(u), h(s));
    // a' = -h(u)/u^2, b' = h(s)/s^2
    let da = -a / (u * u);
    let db = b / (s * s);
    (da * b - a * db) / ((a + b) * (a + b))
}

impl CutoffSpec {
    pub fn new(r: f64) -> Self {
        Self { r }
    }

    /// A cutoff that never activates.
    pub fn inactive() -> Self {
        Self { r: f64::INFINITY }
    }

    pub fn theta(&self, x: f64) -> f64 {
        if self.r.is_infinite() {
            return 1.0;
        }
        theta(x / self.r)
    }

    pub fn theta_prime(&self, x: f64) -> f64 {
        if self.r.is_infinite() {
            return 0.0;
        }
        theta_prime(x / self.r) / self.r
    }
}

/// Public entry point matching the operation name.
pub fn cutoff_theta(x: f64, spec: &CutoffSpec) -> f64 {
    spec.theta(x)
}
