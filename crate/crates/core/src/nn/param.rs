use super::{Float, Tensor};

/// Trainable tensor with its gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Float> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let z = Tensor::zeros(value.shape());
        Self {
            grad: z.clone(),
            m: z.clone(),
            v: z,
            value,
            step: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn cast<U: Float>(&self) -> Parameter<U> {
        Parameter {
            value: self.value.cast(),
            grad: self.grad.cast(),
            m: self.m.cast(),
            v: self.v.cast(),
            step: self.step,
        }
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update from the current gradient. Gradients are left in place.
    pub fn step<T: Float>(&self, p: &mut Parameter<T>) {
        p.step += 1;
        let t = p.step as i32;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let c1 = T::c(1.0 - self.beta1.powi(t));
        let c2 = T::c(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::c(self.lr), T::c(self.eps));
        let one = T::one();
        let g = p.grad.data();
        let m = p.m.data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + (one - b1) * gi;
        }
        let v = p.v.data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + (one - b2) * gi * gi;
        }
        let (m, v) = (p.m.data(), p.v.data());
        for ((x, &mi), &vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
            *x -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Parameter<f64> {
        Parameter::new(Tensor::full([1, 1, 1, 1], v))
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(2.0);
        p.grad.fill(1.0);
        Adam::new(0.01).step(&mut p);
        assert!((p.value.data()[0] - (2.0 - 0.01)).abs() < 1e-9);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn zero_gradient_keeps_value_and_decays_moments() {
        let mut p = scalar(2.0);
        Adam::new(0.01).step(&mut p);
        assert_eq!(p.value.data()[0], 2.0);
        p.m.fill(0.5);
        p.v.fill(0.25);
        Adam::new(0.01).step(&mut p);
        assert!((p.m.data()[0] - 0.45).abs() < 1e-15);
        assert!((p.v.data()[0] - 0.24975).abs() < 1e-15);
    }

    #[test]
    fn minimizes_square() {
        let mut p = scalar(1.0);
        let opt = Adam::new(0.1);
        let mut reached = None;
        for i in 0..200 {
            let x = p.value.data()[0];
            p.grad.fill(2.0 * x);
            opt.step(&mut p);
            if reached.is_none() && p.value.data()[0].abs() < 1e-3 {
                reached = Some(i);
            }
        }
        assert!(reached.is_some());
        assert!(p.value.data()[0].abs() < 1e-3, "final {}", p.value.data()[0]);
    }
}
