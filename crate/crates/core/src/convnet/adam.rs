//! Adam optimiser over a list of parameter tensors.

use super::ConvNetError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update: `p -= lr * m_hat / (sqrt(v_hat) + eps)` with bias-corrected
    /// moments.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        cfg: &AdamConfig,
    ) -> Result<(), ConvNetError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(ConvNetError::Shape(format!(
                "adam holds {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(ConvNetError::Shape(format!(
                    "tensor {i}: state {} params {} grads {}",
                    self.m[i].len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for j in 0..p.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut state = AdamState::new(&[1]);
        let mut p = [0.5];
        state
            .step(&mut [&mut p[..]], &[&[1.0][..]], &AdamConfig::default())
            .unwrap();
        assert!((p[0] - (0.5 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut state = AdamState::new(&[3]);
        let mut p = [1.0, -2.0, 3.0];
        for _ in 0..100 {
            state
                .step(&mut [&mut p[..]], &[&[0.0; 3][..]], &AdamConfig::default())
                .unwrap();
        }
        assert_eq!(p, [1.0, -2.0, 3.0]);
    }

    /// Straight-line Adam on f(x) = x^2, written independently of `step`.
    fn reference_trace(steps: usize) -> f64 {
        let (lr, b1, b2, eps) = (1e-3f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=steps {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        x
    }

    #[test]
    fn quadratic_descent() {
        // With lr = 1e-3 each step moves x by at most ~1e-3, so 500 steps from
        // x = 1 reach about 0.5. A larger step size shows convergence.
        let mut state = AdamState::new(&[1]);
        let mut x = [1.0];
        for _ in 0..500 {
            let g = [2.0 * x[0]];
            state
                .step(&mut [&mut x[..]], &[&g[..]], &AdamConfig::default())
                .unwrap();
        }
        assert!((x[0] - reference_trace(500)).abs() < 1e-12);

        let fast = AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut state = AdamState::new(&[1]);
        let mut x = [1.0];
        for _ in 0..500 {
            let g = [2.0 * x[0]];
            state.step(&mut [&mut x[..]], &[&g[..]], &fast).unwrap();
        }
        assert!(x[0].abs() < 0.1);
    }

    #[test]
    fn shape_mismatch() {
        let mut state = AdamState::new(&[2]);
        let mut p = [0.0; 3];
        assert!(state
            .step(&mut [&mut p[..]], &[&[0.0; 3][..]], &AdamConfig::default())
            .is_err());
    }
}
