//! Fixed-step classical Runge–Kutta integrator on complex vectors.

use crate::C64;

pub(crate) struct Rk4 {
    k1: Vec<C64>,
    k2: Vec<C64>,
    k3: Vec<C64>,
    k4: Vec<C64>,
    tmp: Vec<C64>,
}

impl Rk4 {
    pub(crate) fn new(n: usize) -> Self {
        let z = vec![C64::new(0.0, 0.0); n];
        Self { k1: z.clone(), k2: z.clone(), k3: z.clone(), k4: z.clone(), tmp: z }
    }

    fn resize(&mut self, n: usize) {
        for v in [&mut self.k1, &mut self.k2, &mut self.k3, &mut self.k4, &mut self.tmp] {
            v.resize(n, C64::new(0.0, 0.0));
        }
    }

    /// Advances `y` from `t` to `t + h` for `y' = f(t, y)`; `f` overwrites its output.
    pub(crate) fn step<F>(&mut self, f: &mut F, t: f64, h: f64, y: &mut [C64])
    where
        F: FnMut(f64, &[C64], &mut [C64]),
    {
        let n = y.len();
        self.resize(n);
        let half = 0.5 * h;
        f(t, y, &mut self.k1);
        for ((t_, &yi), &k) in self.tmp.iter_mut().zip(y.iter()).zip(&self.k1) {
            *t_ = yi + k * half;
        }
        f(t + half, &self.tmp, &mut self.k2);
        for ((t_, &yi), &k) in self.tmp.iter_mut().zip(y.iter()).zip(&self.k2) {
            *t_ = yi + k * half;
        }
        f(t + half, &self.tmp, &mut self.k3);
        for ((t_, &yi), &k) in self.tmp.iter_mut().zip(y.iter()).zip(&self.k3) {
            *t_ = yi + k * h;
        }
        f(t + h, &self.tmp, &mut self.k4);
        let sixth = h / 6.0;
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += (self.k1[i] + (self.k2[i] + self.k3[i]) * 2.0 + self.k4[i]) * sixth;
        }
    }
}
