use super::{CaeError, CaeParams};
use crate::scalar::Scalar;

pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// SGD with classical momentum: `v ← μ·v − η·g`, `θ ← θ + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub learning_rate: T,
    pub momentum: T,
    /// When set, gradients whose global L2 norm exceeds this are rescaled
    /// to it before the update.
    pub max_grad_norm: Option<T>,
    velocity: Option<CaeParams<T>>,
}

impl<T: Scalar> Default for Sgd<T> {
    fn default() -> Self {
        Self::new(T::lit(DEFAULT_LEARNING_RATE), T::lit(DEFAULT_MOMENTUM))
    }
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: T, momentum: T) -> Self {
        Self { learning_rate, momentum, max_grad_norm: None, velocity: None }
    }

    pub fn with_max_grad_norm(mut self, max_norm: T) -> Self {
        self.max_grad_norm = Some(max_norm);
        self
    }

    pub fn velocity(&self) -> Option<&CaeParams<T>> {
        self.velocity.as_ref()
    }

    /// Drops accumulated momentum.
    pub fn reset(&mut self) {
        self.velocity = None;
    }

    /// Applies one update. On a non-finite result neither the parameters
    /// nor the velocity change.
    pub fn step(&mut self, params: &mut CaeParams<T>, grads: &CaeParams<T>) -> Result<(), CaeError> {
        if !params.same_shape(grads) {
            return Err(CaeError::ShapeMismatch("gradient shape differs from parameters".into()));
        }
        let mut velocity = match self.velocity.take() {
            Some(v) if v.same_shape(params) => v,
            _ => params.zeros_like(),
        };
        let old_velocity = velocity.clone();
        let mut scale = T::one();
        if let Some(max) = self.max_grad_norm {
            let norm = grads.tensors().iter().flat_map(|t| t.1.iter()).fold(T::zero(), |acc, &g| acc + g * g).sqrt();
            if norm > max {
                scale = max / norm;
            }
        }
        let mut updated = params.clone();
        let mut finite = true;
        for ((theta, v), g) in updated.tensors_mut().into_iter().zip(velocity.tensors_mut()).zip(grads.tensors()) {
            for ((t, vi), &gi) in theta.iter_mut().zip(v.iter_mut()).zip(g.1) {
                *vi = self.momentum * *vi - self.learning_rate * (scale * gi);
                *t += *vi;
                finite &= t.is_finite() && vi.is_finite();
            }
        }
        if !finite {
            self.velocity = Some(old_velocity);
            return Err(CaeError::NonFiniteUpdate);
        }
        *params = updated;
        self.velocity = Some(velocity);
        Ok(())
    }
}

/// One stateless step with an explicit velocity buffer.
pub fn sgd_step<T: Scalar>(
    params: &mut CaeParams<T>,
    velocity: &mut CaeParams<T>,
    grads: &CaeParams<T>,
    learning_rate: T,
    momentum: T,
) -> Result<(), CaeError> {
    let mut opt = Sgd { learning_rate, momentum, max_grad_norm: None, velocity: Some(velocity.clone()) };
    opt.step(params, grads)?;
    if let Some(v) = opt.velocity {
        *velocity = v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cae::{init_params, ArchConfig};

    fn setup() -> (CaeParams<f64>, CaeParams<f64>) {
        let cfg = ArchConfig { filter_size: 3, filters_per_layer: vec![2], ..ArchConfig::default() };
        (init_params(&cfg, 1).unwrap(), init_params(&cfg, 2).unwrap())
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let (mut p, g) = setup();
        let before = p.clone();
        Sgd::new(0.0, 0.9).step(&mut p, &g).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn plain_step_without_momentum() {
        let (mut p, g) = setup();
        let before = p.to_flat();
        Sgd::new(0.01, 0.0).step(&mut p, &g).unwrap();
        for ((a, b), gi) in p.to_flat().iter().zip(before).zip(g.to_flat()) {
            assert_eq!(*a, b - 0.01 * gi);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let (mut p, g) = setup();
        let before = p.to_flat();
        let mut opt = Sgd::new(0.1, 0.5);
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        for ((a, b), gi) in p.to_flat().iter().zip(before).zip(g.to_flat()) {
            let v1 = -0.1 * gi;
            let v2 = 0.5 * v1 - 0.1 * gi;
            assert!((a - (b + v1 + v2)).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping_rescales_only_large_gradients() {
        let (p0, g) = setup();
        let norm = g.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut loose = p0.clone();
        let mut plain = p0.clone();
        Sgd::new(0.1, 0.0).with_max_grad_norm(norm * 2.0).step(&mut loose, &g).unwrap();
        Sgd::new(0.1, 0.0).step(&mut plain, &g).unwrap();
        assert_eq!(loose, plain);
        let mut tight = p0.clone();
        Sgd::new(0.1, 0.0).with_max_grad_norm(norm / 4.0).step(&mut tight, &g).unwrap();
        for ((a, b), gi) in tight.to_flat().iter().zip(p0.to_flat()).zip(g.to_flat()) {
            assert!((a - (b - 0.1 * gi / 4.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_update_rejected() {
        let (mut p, mut g) = setup();
        g.encoder[0].weights[0] = f64::NAN;
        let before = p.clone();
        let mut opt = Sgd::default();
        assert_eq!(opt.step(&mut p, &g), Err(CaeError::NonFiniteUpdate));
        assert_eq!(p, before);
    }
}
