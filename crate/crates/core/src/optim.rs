//! First-order optimizer shared by the refinement pipelines.

/// Objective value and gradient over a parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEvaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
}

impl LossEvaluation {
    pub fn zeros(n: usize) -> Self {
        Self {
            value: 0.0,
            gradient: vec![0.0; n],
        }
    }

    /// `self + weight * other`, element-wise.
    pub fn add_scaled(&mut self, other: &LossEvaluation, weight: f64) {
        self.value += weight * other.value;
        for (a, b) in self.gradient.iter_mut().zip(&other.gradient) {
            *a += weight * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.gradient.iter().all(|g| g.is_finite())
    }
}

/// Sign with `sign(0) = 0`, the subgradient used for L1 terms.
#[inline]
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Step-size schedule: cosine decay from `base` to `base * floor`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base: f64,
    pub floor: f64,
}

impl Schedule {
    pub fn constant(base: f64) -> Self {
        Self { base, floor: 1.0 }
    }

    pub fn at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.base;
        }
        let progress = step as f64 / (total - 1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.base * (self.floor + (1.0 - self.floor) * cosine)
    }
}

/// Adam with per-parameter step sizes.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Returns the descent step (to be subtracted) for `grad`, scaled per
    /// parameter by `lr[i]`.
    pub fn step(&mut self, grad: &[f64], lr: impl Fn(usize) -> f64) -> Vec<f64> {
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut out = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            out[i] = lr(i) * m_hat / (v_hat.sqrt() + self.eps);
        }
        out
    }
}

/// Best-so-far tracking of an objective trace.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub values: Vec<f64>,
    pub best: Vec<f64>,
}

impl Trace {
    pub fn push(&mut self, v: f64) {
        let b = self.best.last().map_or(v, |&b| b.min(v));
        self.values.push(v);
        self.best.push(b);
    }

    pub fn initial(&self) -> Option<f64> {
        self.values.first().copied()
    }

    pub fn final_best(&self) -> Option<f64> {
        self.best.last().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2);
        let sched = Schedule { base: 0.1, floor: 0.01 };
        for s in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            let step = opt.step(&g, |_| sched.at(s, 2000));
            for (xi, d) in x.iter_mut().zip(step) {
                *xi -= d;
            }
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule { base: 1e-3, floor: 0.1 };
        assert_eq!(s.at(0, 10), 1e-3);
        assert!((s.at(9, 10) - 1e-4).abs() < 1e-18);
        assert_eq!(Schedule::constant(0.5).at(3, 10), 0.5);
    }

    #[test]
    fn sign_of_zero() {
        assert_eq!(sign0(0.0), 0.0);
        assert_eq!(sign0(-0.0), 0.0);
        assert_eq!(sign0(-2.0), -1.0);
    }

    #[test]
    fn trace_best_is_monotone() {
        let mut t = Trace::default();
        for v in [3.0, 4.0, 1.0, 2.0] {
            t.push(v);
        }
        assert_eq!(t.best, vec![3.0, 3.0, 1.0, 1.0]);
    }
}
