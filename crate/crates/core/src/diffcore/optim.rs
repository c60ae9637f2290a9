use std::f64::consts::PI;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Cosine annealing from `lr0` to `lr_min` over `total` steps.
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total == 0 {
            return self.lr0;
        }
        let frac = (step.min(self.total) as f64) / self.total as f64;
        self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1.0 + (PI * frac).cos())
    }
}

/// Rescales `grads` so their joint l2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads
            .iter_mut()
            .flat_map(|g| g.iter_mut())
            .for_each(|x| *x *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_decreases_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(&[2]);
        let f = |x: &[f64]| x[0] * x[0] + 4.0 * x[1] * x[1];
        let mut prev = f(&x);
        let start = prev;
        for it in 0..300 {
            let g = vec![vec![2.0 * x[0], 8.0 * x[1]]];
            opt.step(vec![x.as_mut_slice()], &g, 0.01);
            let cur = f(&x);
            if it > 5 {
                assert!(cur <= prev + 1e-12, "iteration {it}: {cur} > {prev}");
            }
            prev = cur;
        }
        assert!(prev < 0.1 * start);
    }

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule {
            lr0: 1e-3,
            lr_min: 0.0,
            total: 100,
        };
        assert_eq!(s.lr(0), 1e-3);
        assert!((s.lr(50) - 5e-4).abs() < 1e-15);
        assert!(s.lr(100).abs() < 1e-18);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }
}
