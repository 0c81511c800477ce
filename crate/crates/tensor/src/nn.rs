//! Parameterised layers. Layers hold only parameter ids; values live in a
//! [`ParamStore`] so the same layer can run on raw or averaged weights.

use rand::Rng;

use crate::{Float, Graph, ParamId, ParamStore, ShapeError, Var};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_he(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, rng);
        let bias = store.add(format!("{name}.bias"), crate::Tensor::zeros(&[cout]));
        Self { weight, bias, cin, cout, k }
    }

    pub fn forward<F: Float>(&self, g: &Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var, ShapeError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        fin: usize,
        fout: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_he(format!("{name}.weight"), &[fout, fin], fin, rng);
        let bias = store.add(format!("{name}.bias"), crate::Tensor::zeros(&[fout]));
        Self { weight, bias, fin, fout }
    }

    pub fn forward<F: Float>(&self, g: &Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var, ShapeError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}
