use crate::scalar::Scalar;

/// A named trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self {
            name: name.into(),
            shape,
            value,
            grad,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Adaptive-moment optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one network, aligned with its
/// parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_params(params: &[&Param<T>]) -> Self {
        Self {
            t: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    /// Applies one bias-corrected update using the gradients currently
    /// stored in `params`. A zero learning rate leaves values untouched.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut [&mut Param<T>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter mismatch");
        self.t += 1;
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let corr1 = 1.0 - b1.powi(self.t as i32);
        let corr2 = 1.0 - b2.powi(self.t as i32);
        let step = T::from_f64(cfg.lr * corr2.sqrt() / corr1);
        let eps = T::from_f64(cfg.eps * corr2.sqrt());
        let (b1, b2) = (T::from_f64(b1), T::from_f64(b2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + c1 * g;
                v[i] = b2 * v[i] + c2 * g * g;
                if cfg.lr != 0.0 {
                    p.value[i] -= step * m[i] / (v[i].sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Param::new("x", vec![2], vec![3.0f64, -2.0]);
        let mut st = AdamState::for_params(&[&p]);
        let cfg = AdamConfig::new(0.05, 0.9, 0.999);
        for _ in 0..2000 {
            p.grad = p.value.iter().map(|x| 2.0 * x).collect();
            st.step(&cfg, &mut [&mut p]);
        }
        assert!(p.value.iter().all(|x| x.abs() < 1e-3), "{:?}", p.value);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = Param::new("x", vec![3], vec![1.0f32, 2.0, 3.0]);
        let before = p.value.clone();
        let mut st = AdamState::for_params(&[&p]);
        p.grad = vec![1.0, -1.0, 0.5];
        for _ in 0..5 {
            st.step(&AdamConfig::new(0.0, 0.9, 0.999), &mut [&mut p]);
        }
        assert_eq!(p.value, before);
    }
}
