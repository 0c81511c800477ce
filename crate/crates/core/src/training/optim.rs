use sdtnet_tensor::{Float, Gradients, ParamId, ParamStore, ShapeError};

/// Triangular wave starting at `lr_max`, reaching `lr_min` half-way through
/// each period and returning to `lr_max` at its end.
pub fn triangular_lr(epoch: f64, lr_max: f64, lr_min: f64, period: f64) -> f64 {
    let phase = epoch.max(0.0).rem_euclid(period) / period;
    let dist = if phase <= 0.5 { phase } else { 1.0 - phase };
    lr_max - (lr_max - lr_min) * 2.0 * dist
}

/// `shadow <- decay * shadow + (1 - decay) * params`, tensor by tensor.
pub fn ema_update<F: Float>(shadow: &mut ParamStore<F>, params: &ParamStore<F>, decay: f64) -> Result<(), ShapeError> {
    if shadow.len() != params.len() {
        return Err(ShapeError::new(format!(
            "ema: {} shadow tensors for {} parameters",
            shadow.len(),
            params.len()
        )));
    }
    let (d, e) = (F::from_f64(decay), F::from_f64(1.0 - decay));
    for id in params.ids().collect::<Vec<_>>() {
        let p = params.get(id);
        let s = shadow.get_mut(id);
        if s.shape() != p.shape() {
            return Err(ShapeError::new(format!(
                "ema: {} has shape {:?}, parameter {:?}",
                params.name(id),
                s.shape(),
                p.shape()
            )));
        }
        if decay == 0.0 {
            s.data_mut().copy_from_slice(p.data());
            continue;
        }
        for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = d * *a + e * b;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-tensor step counts, so disjoint parameter groups can be
/// updated on their own schedules.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub m: ParamStore<F>,
    pub v: ParamStore<F>,
    pub steps: Vec<u64>,
}

impl<F: Float> Adam<F> {
    pub fn new(params: &ParamStore<F>, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: vec![0; params.len()],
        }
    }

    /// Updates every parameter that has a gradient; others are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (id, g) in grads.params() {
            let ParamId(i) = id;
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j].as_f64();
                let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * gj;
                let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * gj * gj;
                m[j] = F::from_f64(mj);
                v[j] = F::from_f64(vj);
                let upd = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                p[j] = F::from_f64(p[j].as_f64() - upd);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use sdtnet_tensor::{Graph, Parallelism, Tensor};

    use super::*;

    #[test]
    fn triangular_values() {
        let lr = |e| triangular_lr(e, 1e-4, 1e-5, 20.0);
        assert!((lr(0.0) - 1e-4).abs() < 1e-18);
        assert!((lr(5.0) - 5.5e-5).abs() < 1e-18);
        assert!((lr(10.0) - 1e-5).abs() < 1e-18);
        assert!((lr(20.0) - 1e-4).abs() < 1e-18);
        for i in 0..200 {
            let e = i as f64 * 0.37;
            assert!((lr(e) - lr(e + 20.0)).abs() < 1e-15);
            assert!((1e-5 - 1e-18..=1e-4 + 1e-18).contains(&lr(e)));
        }
    }

    fn store(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a", Tensor::full(&[3], v));
        s.add("b", Tensor::full(&[2, 2], v));
        s
    }

    #[test]
    fn ema_rules() {
        let p = store(2.0);
        let mut s = store(5.0);
        ema_update(&mut s, &p, 0.0).unwrap();
        assert_eq!(s, p);
        let mut s = store(5.0);
        ema_update(&mut s, &p, 1.0).unwrap();
        assert_eq!(s, store(5.0));
        let mut s = store(5.0);
        let d = 0.9;
        for _ in 0..10 {
            ema_update(&mut s, &p, d).unwrap();
        }
        let expected = 2.0 + 0.9f64.powi(10) * 3.0;
        assert!(s.iter().all(|(_, _, t)| t.data().iter().all(|&v| (v as f64 - expected).abs() < 1e-5)));
        let mut short = ParamStore::new();
        short.add("a", Tensor::<f32>::zeros(&[3]));
        assert!(ema_update(&mut short, &p, 0.5).is_err());
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut params = ParamStore::new();
        let id = params.add("x", Tensor::<f64>::from_f64(&[2], &[3.0, -2.0]).unwrap());
        let mut adam = Adam::new(&params, AdamConfig::default());
        for _ in 0..2000 {
            let g = Graph::new(Parallelism::Sequential);
            let x = g.param(&params, id);
            let loss = g.mean(g.mul(x, x).unwrap());
            let grads = g.backward(loss);
            adam.step(&mut params, &grads, 0.01);
        }
        assert!(params.get(id).norm() < 1e-2);
        assert_eq!(adam.steps[0], 2000);
    }

    #[test]
    fn adam_first_step_has_learning_rate_size() {
        let mut params = ParamStore::new();
        let id = params.add("x", Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap());
        let mut adam = Adam::new(&params, AdamConfig::default());
        let g = Graph::new(Parallelism::Sequential);
        let x = g.param(&params, id);
        let grads = g.backward(g.scale(x, 3.0));
        adam.step(&mut params, &grads, 0.1);
        assert!((params.get(id).data()[0] - 0.9).abs() < 1e-6);
    }
}
