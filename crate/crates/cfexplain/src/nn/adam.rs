//! Adam optimizer with bias correction, operating on [`Param`] slices.

use super::Param;

pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    /// Applies one update to every param, then zeroes the grads.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        self.step += 1;
        let t = self.step as f32;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for p in params.iter_mut() {
            let g = &p.grad;
            p.m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            p.v
                .zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let lr = self.lr;
            let eps = self.eps;
            ndarray::Zip::from(&mut p.value)
                .and(&p.m)
                .and(&p.v)
                .for_each(|w, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
            p.grad.fill(0.0);
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        // minimize (w - 3)^2 elementwise
        let mut p = Param::new("w", &[4]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            for (g, w) in p.grad.iter_mut().zip(p.value.iter()) {
                *g = 2.0 * (w - 3.0);
            }
            opt.step(&mut [&mut p]);
        }
        for w in p.value.iter() {
            assert!((w - 3.0).abs() < 1e-3, "converged to {w}");
        }
        assert_eq!(opt.steps_taken(), 500);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // with bias correction the very first update has magnitude ~lr
        let mut p = Param::new("w", &[1]);
        p.grad.fill(0.5);
        let mut opt = Adam::new(0.01);
        opt.step(&mut [&mut p]);
        assert!((p.value[[0]].abs() - 0.01).abs() < 1e-6);
        // grads were consumed
        assert_eq!(p.grad[[0]], 0.0);
    }
}
