//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Nodes that do
//! not depend on a trainable leaf are recorded as constants and skipped by
//! [`Graph::backward`], so forward-only passes cost no more than evaluation.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::kernels::{self, Dims};
use crate::{Float, ParamId, ParamStore, Parallelism, ShapeError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Exp(Var),
    LeakyRelu(Var, F),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
    },
    MaxPool2 {
        x: Var,
        idx: Vec<u32>,
    },
    Upsample2(Var),
    ConcatChannels(Vec<Var>),
    NarrowChannels {
        x: Var,
        start: usize,
    },
    ConcatBatch(Vec<Var>),
    NarrowBatch {
        x: Var,
        start: usize,
    },
    SoftmaxChannels(Var),
    StraightThrough(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
    Film {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    GlobalAvgPool(Var),
    Mean(Var),
    /// Scalar function with precomputed local gradients.
    Scalar(Vec<(Var, Tensor<F>)>),
}

struct Node<F> {
    value: Rc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

type TrainableFilter = Box<dyn Fn(ParamId) -> bool>;

pub struct Graph<F: Float> {
    nodes: RefCell<Vec<Node<F>>>,
    params: RefCell<HashMap<ParamId, Var>>,
    trainable: Option<TrainableFilter>,
    par: Parallelism,
}

/// Result of [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: HashMap<ParamId, Var>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&id).and_then(|v| self.get(*v))
    }

    /// Parameter gradients in ascending id order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<F>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(id, v)| self.get(*v).map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.params()
            .iter()
            .map(|(_, g)| g.norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

impl<F: Float> Graph<F> {
    pub fn new(par: Parallelism) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            trainable: None,
            par,
        }
    }

    /// Graph in which only parameters accepted by `filter` receive gradients;
    /// every other parameter enters as a constant.
    pub fn with_trainable(par: Parallelism, filter: impl Fn(ParamId) -> bool + 'static) -> Self {
        let mut g = Self::new(par);
        g.trainable = Some(Box::new(filter));
        g
    }

    /// Graph in which no parameter receives gradients.
    pub fn inference(par: Parallelism) -> Self {
        Self::with_trainable(par, |_| false)
    }

    pub fn parallelism(&self) -> Parallelism {
        self.par
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<F>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant input.
    pub fn constant(&self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf that receives a gradient.
    pub fn input(&self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let trainable = self.trainable.as_ref().is_none_or(|f| f(id));
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.params.borrow_mut().insert(id, v);
        v
    }

    /// Copy of `v` that blocks gradients.
    pub fn detach(&self, v: Var) -> Var {
        let t = (*self.value(v)).clone();
        self.constant(t)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), ShapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(ShapeError::new(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.same_shape(a, b, "add")?;
        let t = self.zip(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let s = F::from_f64(s);
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), self.rg(a))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let s = F::from_f64(s);
        let t = self.value(a).map(|x| x + s);
        self.push(t, Op::AddScalar(a), self.rg(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        self.push(t, Op::Exp(a), self.rg(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let s = F::from_f64(slope);
        let t = self.value(a).map(|x| if x > F::zero() { x } else { x * s });
        self.push(t, Op::LeakyRelu(a, s), self.rg(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let t = self.value(a).map(|x| F::one() / (F::one() + (-x).exp()));
        self.push(t, Op::Sigmoid(a), self.rg(a))
    }

    /// Same-padded stride-1 convolution. `w` is `[cout, cin, k, k]`, `b` is `[cout]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var, ShapeError> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = xv.dims4()?;
        let (cout, cin, k, k2) = wv.dims4()?;
        if cin != c || k != k2 || k % 2 == 0 {
            return Err(ShapeError::new(format!(
                "conv2d: input {:?} with weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let bv = b.map(|b| self.value(b));
        if let Some(bv) = &bv {
            if bv.len() != cout {
                return Err(ShapeError::new(format!("conv2d: bias {:?} for {cout} outputs", bv.shape())));
            }
        }
        let dims = Dims::new(n, c, h, wd);
        let out = kernels::conv2d_forward(self.par, xv.data(), dims, wv.data(), bv.as_ref().map(|t| t.data()), cout, k);
        let t = Tensor::new(&[n, cout, h, wd], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, k }, rg))
    }

    pub fn maxpool2(&self, x: Var) -> Result<Var, ShapeError> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(ShapeError::new(format!("maxpool2: odd spatial size {h}x{w}")));
        }
        let (vals, idx) = kernels::maxpool2_forward(self.par, xv.data(), Dims::new(n, c, h, w));
        let t = Tensor::new(&[n, c, h / 2, w / 2], vals)?;
        Ok(self.push(t, Op::MaxPool2 { x, idx }, self.rg(x)))
    }

    pub fn upsample2(&self, x: Var) -> Result<Var, ShapeError> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let out = kernels::upsample2_forward(self.par, xv.data(), Dims::new(n, c, h, w));
        let t = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(t, Op::Upsample2(x), self.rg(x)))
    }

    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var, ShapeError> {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let (n, _, h, w) = vals
            .first()
            .ok_or_else(|| ShapeError::new("concat of zero tensors"))?
            .dims4()?;
        let mut ctot = 0;
        for v in &vals {
            let (n2, c, h2, w2) = v.dims4()?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(ShapeError::new(format!("concat_channels: {:?} vs {:?}", vals[0].shape(), v.shape())));
            }
            ctot += c;
        }
        let mut data = Vec::with_capacity(n * ctot * h * w);
        for b in 0..n {
            for v in &vals {
                let item = v.len() / n;
                data.extend_from_slice(&v.data()[b * item..(b + 1) * item]);
            }
        }
        let t = Tensor::new(&[n, ctot, h, w], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatChannels(parts.to_vec()), rg))
    }

    pub fn narrow_channels(&self, x: Var, start: usize, len: usize) -> Result<Var, ShapeError> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        if start + len > c {
            return Err(ShapeError::new(format!("narrow_channels {start}+{len} of {c}")));
        }
        let p = h * w;
        let mut data = Vec::with_capacity(n * len * p);
        for b in 0..n {
            data.extend_from_slice(&xv.data()[(b * c + start) * p..(b * c + start + len) * p]);
        }
        let t = Tensor::new(&[n, len, h, w], data)?;
        Ok(self.push(t, Op::NarrowChannels { x, start }, self.rg(x)))
    }

    pub fn concat_batch(&self, parts: &[Var]) -> Result<Var, ShapeError> {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor<F>> = vals.iter().map(|v| v.as_ref()).collect();
        let t = Tensor::stack_batch(&refs)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatBatch(parts.to_vec()), rg))
    }

    pub fn narrow_batch(&self, x: Var, start: usize, len: usize) -> Result<Var, ShapeError> {
        let t = self.value(x).narrow_batch(start, len)?;
        Ok(self.push(t, Op::NarrowBatch { x, start }, self.rg(x)))
    }

    pub fn softmax_channels(&self, x: Var) -> Result<Var, ShapeError> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let out = kernels::softmax_channels(xv.data(), Dims::new(n, c, h, w));
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push(t, Op::SoftmaxChannels(x), self.rg(x)))
    }

    /// Per-pixel one-hot of the channel argmax in the forward pass; the
    /// backward pass is the identity.
    pub fn straight_through_one_hot(&self, x: Var) -> Result<Var, ShapeError> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let out = kernels::one_hot_argmax(xv.data(), Dims::new(n, c, h, w));
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push(t, Op::StraightThrough(x), self.rg(x)))
    }

    /// `x [B, in] -> x w^T + b` with `w [out, in]`, `b [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var, ShapeError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (bsz, fin) = match xv.shape() {
            [bsz, fin] => (*bsz, *fin),
            s => return Err(ShapeError::new(format!("linear: input must be 2-D, got {s:?}"))),
        };
        let (fout, fin2) = match wv.shape() {
            [o, i] => (*o, *i),
            s => return Err(ShapeError::new(format!("linear: weight must be 2-D, got {s:?}"))),
        };
        if fin != fin2 || bv.len() != fout {
            return Err(ShapeError::new(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut out = Vec::with_capacity(bsz * fout);
        for _ in 0..bsz {
            out.extend_from_slice(bv.data());
        }
        F::gemm(bsz, fin, fout, F::one(), xv.data(), fin as isize, 1, wv.data(), 1, fin as isize, F::one(), &mut out, fout as isize, 1);
        let t = Tensor::new(&[bsz, fout], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var, ShapeError> {
        let t = (*self.value(x)).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), self.rg(x)))
    }

    /// Feature-wise affine modulation: `x * gamma + beta`, with `gamma` and
    /// `beta` of shape `[B, C]` broadcast over the spatial axes.
    pub fn film(&self, x: Var, gamma: Var, beta: Var) -> Result<Var, ShapeError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, c, h, w) = xv.dims4()?;
        if gv.shape() != [n, c] || bv.shape() != [n, c] {
            return Err(ShapeError::new(format!(
                "film: x {:?}, gamma {:?}, beta {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let p = h * w;
        let mut data = xv.data().to_vec();
        for (j, chunk) in data.chunks_mut(p).enumerate() {
            let (g, b) = (gv.data()[j], bv.data()[j]);
            for v in chunk {
                *v = *v * g + b;
            }
        }
        let t = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(t, Op::Film { x, gamma, beta }, rg))
    }

    /// Spatial mean, `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var, ShapeError> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let p = h * w;
        let inv = F::from_f64(1.0 / p as f64);
        let data = xv.data().chunks(p).map(|ch| ch.iter().copied().sum::<F>() * inv).collect();
        let t = Tensor::new(&[n, c], data)?;
        Ok(self.push(t, Op::GlobalAvgPool(x), self.rg(x)))
    }

    /// Mean of all elements as a one-element tensor.
    pub fn mean(&self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.sum() / F::from_f64(xv.len().max(1) as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), self.rg(x))
    }

    /// Records a scalar-valued function of `inputs` whose value and local
    /// gradients were computed outside the graph. `f` receives the input values
    /// and returns the value and one gradient per input (same shape as that input).
    pub fn scalar_fn<E>(
        &self,
        inputs: &[Var],
        f: impl FnOnce(&[&Tensor<F>]) -> Result<(f64, Vec<Tensor<F>>), E>,
    ) -> Result<Var, E> {
        let vals: Vec<_> = inputs.iter().map(|&v| self.value(v)).collect();
        let refs: Vec<&Tensor<F>> = vals.iter().map(|v| v.as_ref()).collect();
        let (value, grads) = f(&refs)?;
        assert_eq!(grads.len(), inputs.len(), "scalar_fn must return one gradient per input");
        let rg = inputs.iter().any(|&v| self.rg(v));
        let saved = inputs
            .iter()
            .zip(grads)
            .filter(|(v, _)| self.rg(**v))
            .map(|(v, g)| (*v, g))
            .collect();
        Ok(self.push(Tensor::scalar(F::from_f64(value)), Op::Scalar(saved), rg))
    }

    /// Gradients of the scalar `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let contributions = self.local_grads(&nodes, node, &dy);
            grads[i] = Some(dy);
            for (v, g) in contributions {
                if !nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients {
            grads,
            params: self.params.borrow().clone(),
        }
    }

    fn local_grads(&self, nodes: &[Node<F>], node: &Node<F>, dy: &Tensor<F>) -> Vec<(Var, Tensor<F>)> {
        let val = |v: Var| nodes[v.0].value.clone();
        let rg = |v: Var| nodes[v.0].requires_grad;
        let like = |v: Var, data: Vec<F>| Tensor::new(nodes[v.0].value.shape(), data).expect("gradient shape");
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Sub(a, b) => vec![(*a, dy.clone()), (*b, dy.map(|g| -g))],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut out = Vec::new();
                if rg(*a) {
                    out.push((*a, like(*a, dy.data().iter().zip(vb.data()).map(|(&g, &y)| g * y).collect())));
                }
                if rg(*b) {
                    out.push((*b, like(*b, dy.data().iter().zip(va.data()).map(|(&g, &x)| g * x).collect())));
                }
                out
            }
            Op::Scale(a, s) => vec![(*a, dy.map(|g| g * *s))],
            Op::AddScalar(a) => vec![(*a, dy.clone())],
            Op::Exp(a) => {
                let data = dy.data().iter().zip(node.value.data()).map(|(&g, &y)| g * y).collect();
                vec![(*a, like(*a, data))]
            }
            Op::LeakyRelu(a, s) => {
                let va = val(*a);
                let data = dy
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&g, &x)| if x > F::zero() { g } else { g * *s })
                    .collect();
                vec![(*a, like(*a, data))]
            }
            Op::Sigmoid(a) => {
                let data = dy
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| g * y * (F::one() - y))
                    .collect();
                vec![(*a, like(*a, data))]
            }
            Op::Conv2d { x, w, b, k } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, c, h, wd) = xv.dims4().expect("4-D");
                let cout = wv.shape()[0];
                let gr = kernels::conv2d_backward(self.par, xv.data(), Dims::new(n, c, h, wd), wv.data(), cout, *k, dy.data(), rg(*x), rg(*w));
                let mut out = Vec::new();
                if rg(*w) {
                    out.push((*w, like(*w, gr.dweight)));
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    out.push((b, like(b, gr.dbias)));
                }
                if let Some(dx) = gr.dx {
                    out.push((*x, like(*x, dx)));
                }
                out
            }
            Op::MaxPool2 { x, idx } => {
                let len = nodes[x.0].value.len();
                vec![(*x, like(*x, kernels::maxpool2_backward(dy.data(), idx, len)))]
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = nodes[x.0].value.dims4().expect("4-D");
                vec![(*x, like(*x, kernels::upsample2_backward(self.par, dy.data(), Dims::new(n, c, h, w))))]
            }
            Op::ConcatChannels(parts) => {
                let n = dy.batch();
                let item = dy.len() / n;
                let mut offset = 0;
                let mut out = Vec::new();
                for &p in parts {
                    let pitem = nodes[p.0].value.len() / n;
                    if rg(p) {
                        let mut data = Vec::with_capacity(n * pitem);
                        for b in 0..n {
                            data.extend_from_slice(&dy.data()[b * item + offset..b * item + offset + pitem]);
                        }
                        out.push((p, like(p, data)));
                    }
                    offset += pitem;
                }
                out
            }
            Op::NarrowChannels { x, start } => {
                let (n, c, h, w) = nodes[x.0].value.dims4().expect("4-D");
                let len = dy.shape()[1];
                let p = h * w;
                let mut data = vec![F::zero(); n * c * p];
                for b in 0..n {
                    data[(b * c + start) * p..(b * c + start + len) * p]
                        .copy_from_slice(&dy.data()[b * len * p..(b + 1) * len * p]);
                }
                vec![(*x, like(*x, data))]
            }
            Op::ConcatBatch(parts) => {
                let mut offset = 0;
                let mut out = Vec::new();
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if rg(p) {
                        out.push((p, like(p, dy.data()[offset..offset + len].to_vec())));
                    }
                    offset += len;
                }
                out
            }
            Op::NarrowBatch { x, start } => {
                let xv = val(*x);
                let item = xv.len() / xv.batch().max(1);
                let mut data = vec![F::zero(); xv.len()];
                data[start * item..start * item + dy.len()].copy_from_slice(dy.data());
                vec![(*x, like(*x, data))]
            }
            Op::SoftmaxChannels(x) => {
                let (n, c, h, w) = node.value.dims4().expect("4-D");
                let dx = kernels::softmax_channels_backward(node.value.data(), dy.data(), Dims::new(n, c, h, w));
                vec![(*x, like(*x, dx))]
            }
            Op::StraightThrough(x) => vec![(*x, dy.clone())],
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (bsz, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                let mut out = Vec::new();
                if rg(*w) {
                    let mut dw = vec![F::zero(); fout * fin];
                    // dW = dY^T X
                    F::gemm(fout, bsz, fin, F::one(), dy.data(), 1, fout as isize, xv.data(), fin as isize, 1, F::zero(), &mut dw, fin as isize, 1);
                    out.push((*w, like(*w, dw)));
                }
                if rg(*b) {
                    let mut db = vec![F::zero(); fout];
                    for row in dy.data().chunks(fout) {
                        for (a, &g) in db.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    out.push((*b, like(*b, db)));
                }
                if rg(*x) {
                    let mut dx = vec![F::zero(); bsz * fin];
                    F::gemm(bsz, fout, fin, F::one(), dy.data(), fout as isize, 1, wv.data(), fin as isize, 1, F::zero(), &mut dx, fin as isize, 1);
                    out.push((*x, like(*x, dx)));
                }
                out
            }
            Op::Reshape(x) => vec![(*x, like(*x, dy.data().to_vec()))],
            Op::Film { x, gamma, beta } => {
                let (xv, gv) = (val(*x), val(*gamma));
                let p = xv.shape()[2] * xv.shape()[3];
                let mut out = Vec::new();
                if rg(*x) {
                    let mut dx = dy.data().to_vec();
                    for (j, chunk) in dx.chunks_mut(p).enumerate() {
                        let g = gv.data()[j];
                        for v in chunk {
                            *v *= g;
                        }
                    }
                    out.push((*x, like(*x, dx)));
                }
                if rg(*gamma) {
                    let dg = dy
                        .data()
                        .chunks(p)
                        .zip(xv.data().chunks(p))
                        .map(|(g, x)| g.iter().zip(x).map(|(&a, &b)| a * b).sum())
                        .collect();
                    out.push((*gamma, like(*gamma, dg)));
                }
                if rg(*beta) {
                    let db = dy.data().chunks(p).map(|g| g.iter().copied().sum()).collect();
                    out.push((*beta, like(*beta, db)));
                }
                out
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = nodes[x.0].value.dims4().expect("4-D");
                let p = h * w;
                let inv = F::from_f64(1.0 / p as f64);
                let mut dx = Vec::with_capacity(dy.len() * p);
                for &g in dy.data() {
                    dx.extend(std::iter::repeat_n(g * inv, p));
                }
                vec![(*x, like(*x, dx))]
            }
            Op::Mean(x) => {
                let len = nodes[x.0].value.len();
                let g = dy.data()[0] / F::from_f64(len.max(1) as f64);
                vec![(*x, like(*x, vec![g; len]))]
            }
            Op::Scalar(saved) => {
                let g = dy.data()[0];
                saved.iter().map(|(v, local)| (*v, local.map(|l| l * g))).collect()
            }
        }
    }
}
