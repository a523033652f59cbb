//! Adaptive moments with decoupled weight decay.

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize, lr: f32, weight_decay: f32, beta1: f32, beta2: f32, eps: f32) -> Self {
        Self {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// `theta <- theta * (1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [f32], grad: &[f32]) {
        assert_eq!(params.len(), self.m.len(), "optimizer state size");
        assert_eq!(grad.len(), self.m.len(), "gradient size");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut opt = AdamW::new(3, 1e-2, 0.5, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0f32, -2.0, 0.25];
        let before = p.clone();
        opt.step(&mut p, &[0.0; 3]);
        let decay = 1.0f32 - 1e-2 * 0.5;
        for (a, b) in p.iter().zip(&before) {
            assert_eq!(*a, b * decay);
        }
    }

    #[test]
    fn zero_lr_is_frozen() {
        let mut opt = AdamW::new(2, 0.0, 1e-4, 0.9, 0.999, 1e-8);
        let mut p = vec![0.3f32, -0.7];
        for _ in 0..10 {
            opt.step(&mut p, &[1.0, -3.0]);
        }
        assert_eq!(p, vec![0.3, -0.7]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut opt = AdamW::new(2, 1e-3, 0.0, 0.9, 0.999, 1e-8);
        let mut p = vec![0.0f32, 0.0];
        opt.step(&mut p, &[5.0, -0.1]);
        assert!((p[0] + 1e-3).abs() < 1e-8);
        assert!((p[1] - 1e-3).abs() < 1e-7);
    }
}
