/// Adam with bias-corrected first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    /// One update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_signed_learning_rate() {
        let mut a = Adam::new(2);
        let mut p = [1.0, 1.0];
        a.step(&mut p, &[3.0, -0.02], 0.01);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut a = Adam::new(3);
        let mut p = [0.5, -2.0, 7.0];
        for _ in 0..5 {
            a.step(&mut p, &[0.0; 3], 0.1);
        }
        assert_eq!(p, [0.5, -2.0, 7.0]);
    }

    #[test]
    fn constant_gradient_steps_do_not_grow() {
        let mut a = Adam::new(1);
        let mut p = [0.0];
        a.step(&mut p, &[2.0], 1e-3);
        let first = p[0];
        a.step(&mut p, &[2.0], 1e-3);
        let second = p[0] - first;
        assert!(second.abs() <= first.abs() + 1e-12);
    }
}
