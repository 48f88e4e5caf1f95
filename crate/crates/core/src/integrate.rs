//! Fixed-step classical Runge-Kutta.

use crate::phasor::Cx;

pub trait OdeState: Clone {
    /// Returns `self + a·k`.
    fn axpy(&self, a: f64, k: &Self) -> Self;
}

impl OdeState for f64 {
    fn axpy(&self, a: f64, k: &Self) -> Self {
        self + a * k
    }
}

impl OdeState for Cx {
    fn axpy(&self, a: f64, k: &Self) -> Self {
        self + k * a
    }
}

impl<const N: usize> OdeState for [f64; N] {
    fn axpy(&self, a: f64, k: &Self) -> Self {
        let mut out = *self;
        for (o, x) in out.iter_mut().zip(k) {
            *o += a * x;
        }
        out
    }
}

impl OdeState for Vec<f64> {
    fn axpy(&self, a: f64, k: &Self) -> Self {
        self.iter().zip(k).map(|(y, x)| y + a * x).collect()
    }
}

impl<A: OdeState, B: OdeState> OdeState for (A, B) {
    fn axpy(&self, a: f64, k: &Self) -> Self {
        (self.0.axpy(a, &k.0), self.1.axpy(a, &k.1))
    }
}

/// One RK4 step of `dy/dt = f(t, y)`.
pub fn rk4<S, F>(t: f64, y: &S, dt: f64, mut f: F) -> S
where
    S: OdeState,
    F: FnMut(f64, &S) -> S,
{
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * dt, &y.axpy(0.5 * dt, &k1));
    let k3 = f(t + 0.5 * dt, &y.axpy(0.5 * dt, &k2));
    let k4 = f(t + dt, &y.axpy(dt, &k3));
    y.axpy(dt / 6.0, &k1)
        .axpy(dt / 3.0, &k2)
        .axpy(dt / 3.0, &k3)
        .axpy(dt / 6.0, &k4)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_fourth_order() {
        let exact = (-1.0f64).exp();
        let err = |n: usize| {
            let dt = 1.0 / n as f64;
            let mut y = 1.0;
            for k in 0..n {
                y = rk4(k as f64 * dt, &y, dt, |_, y| -y);
            }
            (y - exact).abs()
        };
        let ratio = err(10) / err(20);
        assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
    }

    #[test]
    fn rotation_preserves_modulus() {
        let mut z = Cx::new(1.0, 0.0);
        for _ in 0..1000 {
            z = rk4(0.0, &z, 1e-3, |_, z| Cx::new(0.0, 1.0) * z);
        }
        assert!((z.norm() - 1.0).abs() < 1e-12);
        assert!((z - Cx::from_polar(1.0, 1.0)).norm() < 1e-12);
    }
}
