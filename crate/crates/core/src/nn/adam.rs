use super::{Gradients, ParamId, ParamStore, Scalar, Tensor};

/// Adam with bias correction and a per-parameter learning rate.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: Vec<u64>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: vec![0; params.len()],
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Parameters without a gradient, or with a
    /// learning rate of exactly zero, are left untouched and keep their
    /// moment estimates.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &Gradients<T>,
        lr: impl Fn(ParamId) -> f64,
    ) {
        for id in 0..params.len() {
            let Some(g) = grads.param(id) else { continue };
            let rate = lr(id);
            if rate == 0.0 {
                continue;
            }
            self.t[id] += 1;
            let t = self.t[id] as i32;
            let b1 = T::from_f64(self.beta1);
            let b2 = T::from_f64(self.beta2);
            let c1 = T::from_f64(1.0 - self.beta1.powi(t));
            let c2 = T::from_f64(1.0 - self.beta2.powi(t));
            let eps = T::from_f64(self.eps);
            let lr = T::from_f64(rate);
            let p = params.get_mut(id).data_mut();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor<T>, &Tensor<T>, u64) {
        (&self.m[id], &self.v[id], self.t[id])
    }

    pub fn set_moments(&mut self, id: ParamId, m: Tensor<T>, v: Tensor<T>, t: u64) {
        assert_eq!(m.shape(), self.m[id].shape());
        assert_eq!(v.shape(), self.v[id].shape());
        self.m[id] = m;
        self.v[id] = v;
        self.t[id] = t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let mut adam = Adam::new(&store);
        let grads = {
            let mut g = Graph::new(&store);
            let w = g.param(id);
            let t = g.constant(Tensor::from_vec(&[2], vec![0.0, 0.0]));
            let l = g.mse(w, t).unwrap();
            g.backward(l)
        };
        adam.step(&mut store, &grads, |_| 0.1);
        // bias-corrected first step is lr * sign(g)
        let p = store.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_unchanged() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::from_vec(&[3], vec![0.3, 0.1, -0.7]));
        let before = store.get(id).clone();
        let mut adam = Adam::new(&store);
        let grads = {
            let mut g = Graph::new(&store);
            let w = g.param(id);
            let t = g.constant(Tensor::zeros(&[3]));
            let l = g.mse(w, t).unwrap();
            g.backward(l)
        };
        adam.step(&mut store, &grads, |_| 0.0);
        assert_eq!(store.get(id), &before);
        assert_eq!(adam.moments(id).2, 0);
    }
}
