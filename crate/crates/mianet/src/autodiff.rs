//! Reverse-mode differentiation with exactly the layers the trainable modules
//! need: fully connected, 3x3 same-padding convolution, ReLU, two-class pixel
//! cross-entropy, plus elementwise/structural glue ops, an SGD optimizer and a
//! finite-difference gradient verifier.
//!
//! A [`Tape`] and the [`ParamStore`] it reads from form one single-threaded
//! training context. Forward methods record nodes; [`Tape::backward`] walks
//! them in reverse and accumulates into `Parameter::grad`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{read_miat, write_miat};
use crate::tensor::{BinaryMask, Tensor};

/// A learnable weight with its gradient accumulator and momentum state.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub velocity: Tensor,
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Registry of parameters; registration order is the checkpoint order.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let shape = value.shape().to_vec();
        self.params.push(Parameter {
            name,
            grad: Tensor::zeros(&shape),
            velocity: Tensor::zeros(&shape),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Sum of |g| over every parameter element, for diagnostics.
    pub fn grad_l1(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.data().iter().map(|v| v.abs()).sum::<f64>())
            .sum()
    }
}

/// Weights drawn uniformly from `[-a, a]`, `a = sqrt(6 / fan_in)`.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let a = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite init")
}

/// SGD settings.
#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            batch_size: 4,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

/// One optimizer step: `v <- momentum*v + (g + wd*value); value <- value - lr*v`,
/// then gradients are zeroed.
pub fn sgd_step(store: &mut ParamStore, cfg: &SgdConfig) {
    for p in store.params.iter_mut() {
        for i in 0..p.value.len() {
            let g = p.grad.data()[i] + cfg.weight_decay * p.value.data()[i];
            let v = cfg.momentum * p.velocity.data()[i] + g;
            p.velocity.data_mut()[i] = v;
            p.value.data_mut()[i] -= cfg.learning_rate * v;
        }
        p.grad.data_mut().fill(0.0);
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Relu(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv3x3 { x: Var, w: Var, b: Var, stride: usize },
    Concat0(Var, Var),
    ExpandVector(Var),
    ResizeBilinear(Var),
    SpatialRows(Var),
    Reshape(Var),
    SelectRow { x: Var, row: usize },
    MeanRowsSubset { x: Var, rows: Vec<usize> },
    L2Distance(Var, Var),
    CosineDistance(Var, Var),
    CrossEntropy2 { logits: Var, target: BinaryMask },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of forward operations with the inputs backward needs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.scalar()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Reads a parameter's current value onto the tape; backward will
    /// accumulate into its gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "mul {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * k).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("scale");
        self.push(value, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v + k).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("add_scalar");
        self.push(value, Op::AddScalar(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let value = Tensor::new(vec![1], vec![s]).expect("sum");
        self.push(value, Op::Sum(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("relu");
        self.push(value, Op::Relu(x))
    }

    /// `y = x W^T + b` with `x: [n,in]`, `w: [out,in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ([n, xin], [wout, win]) = (dims2(self.value(x))?, dims2(self.value(w))?);
        if xin != win || self.value(b).shape() != [wout] {
            return Err(Error::ShapeMismatch(format!(
                "linear x{:?} w{:?} b{:?}",
                self.value(x).shape(),
                self.value(w).shape(),
                self.value(b).shape()
            )));
        }
        let mut data = vec![0.0; n * wout];
        {
            let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
            for i in 0..n {
                let xr = &xv.data()[i * xin..(i + 1) * xin];
                for o in 0..wout {
                    let wr = &wv.data()[o * win..(o + 1) * win];
                    let dot: f64 = xr.iter().zip(wr).map(|(a, c)| a * c).sum();
                    data[i * wout + o] = dot + bv.data()[o];
                }
            }
        }
        let value = Tensor::new(vec![n, wout], data)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Same-padding 3x3 convolution with stride 1 or 2.
    /// `x: [cin,h,w]`, `w: [cout,cin,3,3]`, `b: [cout]`; output spatial dims
    /// are `ceil(h/stride) x ceil(w/stride)`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let value = conv3x3_forward(self.value(x), self.value(w), self.value(b), stride)?;
        Ok(self.push(value, Op::Conv3x3 { x, w, b, stride }))
    }

    /// Leading-axis concatenation of `[c,h,w]` pairs or rank-1 vectors.
    pub fn concat0(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = crate::tensor::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Concat0(a, b)))
    }

    pub fn expand_vector(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let value = crate::tensor::expand_vector(self.value(v), h, w)?;
        Ok(self.push(value, Op::ExpandVector(v)))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if self.value(x).rank() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "tape resize expects [c,h,w], got {:?}",
                self.value(x).shape()
            )));
        }
        let value = crate::tensor::resize_bilinear(self.value(x), out_h, out_w)?;
        Ok(self.push(value, Op::ResizeBilinear(x)))
    }

    /// `[c,h,w] -> [h*w, c]`, row k holding the channel vector of pixel
    /// `(k / w, k % w)`.
    pub fn spatial_rows(&mut self, x: Var) -> Result<Var> {
        let [c, h, w] = dims3(self.value(x))?;
        let mut data = vec![0.0; h * w * c];
        for ch in 0..c {
            for k in 0..h * w {
                data[k * c + ch] = self.value(x).data()[ch * h * w + k];
            }
        }
        let value = Tensor::new(vec![h * w, c], data)?;
        Ok(self.push(value, Op::SpatialRows(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let [n, c] = dims2(self.value(x))?;
        if row >= n {
            return Err(Error::ShapeMismatch(format!("row {row} out of {n}")));
        }
        let value = Tensor::new(
            vec![c],
            self.value(x).data()[row * c..(row + 1) * c].to_vec(),
        )?;
        Ok(self.push(value, Op::SelectRow { x, row }))
    }

    /// Mean over a subset of rows of `[n,c]`.
    pub fn mean_rows_subset(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let [n, c] = dims2(self.value(x))?;
        if rows.is_empty() {
            return Err(Error::ShapeMismatch("empty row subset".into()));
        }
        if rows.iter().any(|&r| r >= n) {
            return Err(Error::ShapeMismatch("row subset out of range".into()));
        }
        let mut data = vec![0.0; c];
        for &r in rows {
            for j in 0..c {
                data[j] += self.value(x).data()[r * c + j];
            }
        }
        for v in data.iter_mut() {
            *v /= rows.len() as f64;
        }
        let value = Tensor::new(vec![c], data)?;
        Ok(self.push(
            value,
            Op::MeanRowsSubset {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = crate::tensor::l2_distance(self.value(a), self.value(b))?;
        let value = Tensor::new(vec![1], vec![d])?;
        Ok(self.push(value, Op::L2Distance(a, b)))
    }

    /// `1 - cos(a,b)` with the same epsilon guard as the similarity kernel.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() || self.value(a).rank() != 1 {
            return Err(Error::ShapeMismatch("cosine distance operands".into()));
        }
        let (s, _, _, _) = cosine_parts(self.value(a).data(), self.value(b).data());
        let value = Tensor::new(vec![1], vec![1.0 - s])?;
        Ok(self.push(value, Op::CosineDistance(a, b)))
    }

    /// Mean over pixels of `-log softmax(logits)[target]` for 2-class logits.
    pub fn cross_entropy_2class(&mut self, logits: Var, target: &BinaryMask) -> Result<Var> {
        let [c, h, w] = dims3(self.value(logits))?;
        if c != 2 {
            return Err(Error::ShapeMismatch(format!("expected 2 logit planes, got {c}")));
        }
        if (target.height(), target.width()) != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "logits {h}x{w} vs mask {}x{}",
                target.height(),
                target.width()
            )));
        }
        let lv = self.value(logits);
        let n = (h * w) as f64;
        let mut loss = 0.0;
        for i in 0..h * w {
            let (l0, l1) = (lv.data()[i], lv.data()[h * w + i]);
            let m = l0.max(l1);
            let z = ((l0 - m).exp() + (l1 - m).exp()).ln() + m;
            let lt = if target.data()[i] == 1 { l1 } else { l0 };
            loss += z - lt;
        }
        let value = Tensor::new(vec![1], vec![loss / n])?;
        Ok(self.push(
            value,
            Op::CrossEntropy2 {
                logits,
                target: target.clone(),
            },
        ))
    }

    /// Reverse pass from a scalar loss; accumulates into `Parameter::grad`.
    /// A tape can only run backward once.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if self.value(loss).len() != 1 {
            return Err(Error::ShapeMismatch("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(vec![1], vec![1.0])?);

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            // Split borrows: the node being differentiated vs its parents.
            let (node_val, op) = {
                let n = &self.nodes[idx];
                (n.value.clone(), &n.op)
            };
            macro_rules! acc {
                ($var:expr, $delta:expr) => {{
                    let delta: Tensor = $delta;
                    let slot = &mut grads[$var.0];
                    match slot {
                        Some(t) => {
                            for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                                *a += b;
                            }
                        }
                        None => *slot = Some(delta),
                    }
                }};
            }
            match op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    acc!(a, g.clone());
                    acc!(b, g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let bv = self.nodes[b.0].value.clone();
                    let av = self.nodes[a.0].value.clone();
                    acc!(a, elementwise(&g, &bv));
                    acc!(b, elementwise(&g, &av));
                }
                Op::Scale(x, k) => {
                    let (x, k) = (*x, *k);
                    let data = g.data().iter().map(|v| v * k).collect();
                    acc!(x, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::AddScalar(x) => {
                    let x = *x;
                    acc!(x, g);
                }
                Op::Sum(x) => {
                    let x = *x;
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    acc!(x, Tensor::filled(&shape, g.scalar()));
                }
                Op::Relu(x) => {
                    let x = *x;
                    let xv = self.nodes[x.0].value.clone();
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    acc!(x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let xv = self.nodes[x.0].value.clone();
                    let wv = self.nodes[w.0].value.clone();
                    let [n, cin] = dims2(&xv)?;
                    let [cout, _] = dims2(&wv)?;
                    let mut dx = Tensor::zeros(&[n, cin]);
                    let mut dw = Tensor::zeros(&[cout, cin]);
                    let mut db = Tensor::zeros(&[cout]);
                    for i in 0..n {
                        for o in 0..cout {
                            let gv = g.data()[i * cout + o];
                            if gv == 0.0 {
                                continue;
                            }
                            db.data_mut()[o] += gv;
                            for k in 0..cin {
                                dx.data_mut()[i * cin + k] += gv * wv.data()[o * cin + k];
                                dw.data_mut()[o * cin + k] += gv * xv.data()[i * cin + k];
                            }
                        }
                    }
                    acc!(x, dx);
                    acc!(w, dw);
                    acc!(b, db);
                }
                Op::Conv3x3 { x, w, b, stride } => {
                    let (x, w, b, stride) = (*x, *w, *b, *stride);
                    let xv = self.nodes[x.0].value.clone();
                    let wv = self.nodes[w.0].value.clone();
                    let [cin, h, wd] = dims3(&xv)?;
                    let cout = wv.shape()[0];
                    let [_, oh, ow] = dims3(&node_val)?;
                    let mut dx = Tensor::zeros(&[cin, h, wd]);
                    let mut dw = Tensor::zeros(&[cout, cin, 3, 3]);
                    let mut db = Tensor::zeros(&[cout]);
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g.data()[(co * oh + oy) * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                db.data_mut()[co] += gv;
                                for ci in 0..cin {
                                    for ky in 0..3 {
                                        let iy = (oy * stride + ky).wrapping_sub(1);
                                        if iy >= h {
                                            continue;
                                        }
                                        for kx in 0..3 {
                                            let ix = (ox * stride + kx).wrapping_sub(1);
                                            if ix >= wd {
                                                continue;
                                            }
                                            let widx = ((co * cin + ci) * 3 + ky) * 3 + kx;
                                            dx.data_mut()[(ci * h + iy) * wd + ix] +=
                                                gv * wv.data()[widx];
                                            dw.data_mut()[widx] +=
                                                gv * xv.data()[(ci * h + iy) * wd + ix];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    acc!(x, dx);
                    acc!(w, dw);
                    acc!(b, db);
                }
                Op::Concat0(a, b) => {
                    let (a, b) = (*a, *b);
                    let na = self.nodes[a.0].value.len();
                    let sa = self.nodes[a.0].value.shape().to_vec();
                    let sb = self.nodes[b.0].value.shape().to_vec();
                    acc!(a, Tensor::new(sa, g.data()[..na].to_vec())?);
                    acc!(b, Tensor::new(sb, g.data()[na..].to_vec())?);
                }
                Op::ExpandVector(v) => {
                    let v = *v;
                    let [c, h, w] = dims3(&node_val)?;
                    let mut dv = Tensor::zeros(&[c]);
                    for ch in 0..c {
                        dv.data_mut()[ch] = g.data()[ch * h * w..(ch + 1) * h * w].iter().sum();
                    }
                    acc!(v, dv);
                }
                Op::ResizeBilinear(x) => {
                    let x = *x;
                    let [c, h, w] = dims3(&self.nodes[x.0].value.clone())?;
                    let [_, oh, ow] = dims3(&node_val)?;
                    acc!(x, resize_backward(&g, c, h, w, oh, ow));
                }
                Op::SpatialRows(x) => {
                    let x = *x;
                    let [c, h, w] = dims3(&self.nodes[x.0].value.clone())?;
                    let mut dx = Tensor::zeros(&[c, h, w]);
                    for k in 0..h * w {
                        for ch in 0..c {
                            dx.data_mut()[ch * h * w + k] = g.data()[k * c + ch];
                        }
                    }
                    acc!(x, dx);
                }
                Op::Reshape(x) => {
                    let x = *x;
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    acc!(x, g.reshaped(&shape)?);
                }
                Op::SelectRow { x, row } => {
                    let (x, row) = (*x, *row);
                    let [n, c] = dims2(&self.nodes[x.0].value.clone())?;
                    let mut dx = Tensor::zeros(&[n, c]);
                    dx.data_mut()[row * c..(row + 1) * c].copy_from_slice(g.data());
                    acc!(x, dx);
                }
                Op::MeanRowsSubset { x, rows } => {
                    let x = *x;
                    let rows = rows.clone();
                    let [n, c] = dims2(&self.nodes[x.0].value.clone())?;
                    let mut dx = Tensor::zeros(&[n, c]);
                    let k = rows.len() as f64;
                    for &r in &rows {
                        for j in 0..c {
                            dx.data_mut()[r * c + j] += g.data()[j] / k;
                        }
                    }
                    acc!(x, dx);
                }
                Op::L2Distance(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let d = node_val.scalar();
                    let gv = g.scalar();
                    let c = av.len();
                    let mut da = Tensor::zeros(&[c]);
                    let mut db = Tensor::zeros(&[c]);
                    if d > 1e-12 {
                        for i in 0..c {
                            let diff = (av.data()[i] - bv.data()[i]) / d;
                            da.data_mut()[i] = gv * diff;
                            db.data_mut()[i] = -gv * diff;
                        }
                    }
                    acc!(a, da);
                    acc!(b, db);
                }
                Op::CosineDistance(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let gv = g.scalar();
                    let (_, dot, na, nb) = cosine_parts(av.data(), bv.data());
                    let denom = na * nb + crate::tensor::EPS_COSINE;
                    let c = av.len();
                    let mut da = Tensor::zeros(&[c]);
                    let mut db = Tensor::zeros(&[c]);
                    for i in 0..c {
                        let mut ds_dai = bv.data()[i] / denom;
                        if na > 1e-12 {
                            ds_dai -= dot * nb * av.data()[i] / (na * denom * denom);
                        }
                        let mut ds_dbi = av.data()[i] / denom;
                        if nb > 1e-12 {
                            ds_dbi -= dot * na * bv.data()[i] / (nb * denom * denom);
                        }
                        da.data_mut()[i] = -gv * ds_dai;
                        db.data_mut()[i] = -gv * ds_dbi;
                    }
                    acc!(a, da);
                    acc!(b, db);
                }
                Op::CrossEntropy2 { logits, target } => {
                    let logits = *logits;
                    let target = target.clone();
                    let lv = self.nodes[logits.0].value.clone();
                    let [_, h, w] = dims3(&lv)?;
                    let n = (h * w) as f64;
                    let gv = g.scalar();
                    let mut dl = Tensor::zeros(&[2, h, w]);
                    for i in 0..h * w {
                        let (l0, l1) = (lv.data()[i], lv.data()[h * w + i]);
                        let m = l0.max(l1);
                        let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
                        let z = e0 + e1;
                        let (p0, p1) = (e0 / z, e1 / z);
                        let t = target.data()[i] as usize;
                        dl.data_mut()[i] = gv * (p0 - if t == 0 { 1.0 } else { 0.0 }) / n;
                        dl.data_mut()[h * w + i] = gv * (p1 - if t == 1 { 1.0 } else { 0.0 }) / n;
                    }
                    acc!(logits, dl);
                }
            }
        }
        Ok(())
    }
}

/// The untaped convolution kernel; the tape op and the frozen encoder both
/// use it.
pub fn conv3x3_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidStride(stride));
    }
    let [cin, h, wd] = dims3(x)?;
    let ws = w.shape();
    if ws.len() != 4 || ws[1] != cin || ws[2] != 3 || ws[3] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "conv weights {ws:?} for input [{cin},{h},{wd}]"
        )));
    }
    let cout = ws[0];
    if b.shape() != [cout] {
        return Err(Error::ShapeMismatch("conv bias".into()));
    }
    let oh = h.div_ceil(stride);
    let ow = wd.div_ceil(stride);
    let mut out = vec![0.0; cout * oh * ow];
    let xd = x.data();
    let wd_ = w.data();
    for co in 0..cout {
        out[co * oh * ow..(co + 1) * oh * ow].fill(b.data()[co]);
        for ci in 0..cin {
            let plane = &xd[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wgt = wd_[((co * cin + ci) * 3 + ky) * 3 + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky).wrapping_sub(1);
                        if iy >= h {
                            continue;
                        }
                        let row = &plane[iy * wd..(iy + 1) * wd];
                        let orow = &mut out[(co * oh + oy) * ow..(co * oh + oy + 1) * ow];
                        for ox in 0..ow {
                            let ix = (ox * stride + kx).wrapping_sub(1);
                            if ix < wd {
                                orow[ox] += wgt * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out)
}

fn elementwise(g: &Tensor, other: &Tensor) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
    Tensor::new(g.shape().to_vec(), data).expect("elementwise")
}

fn cosine_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sim = dot / (na * nb + crate::tensor::EPS_COSINE);
    (sim, dot, na, nb)
}

fn resize_backward(g: &Tensor, c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Tensor {
    let mut dx = Tensor::zeros(&[c, h, w]);
    for oy in 0..oh {
        let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
        let fy = sy.floor();
        let ty = sy - fy;
        let y0 = fy.clamp(0.0, (h - 1) as f64) as usize;
        let y1 = (fy + 1.0).clamp(0.0, (h - 1) as f64) as usize;
        for ox in 0..ow {
            let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
            let fx = sx.floor();
            let tx = sx - fx;
            let x0 = fx.clamp(0.0, (w - 1) as f64) as usize;
            let x1 = (fx + 1.0).clamp(0.0, (w - 1) as f64) as usize;
            for ch in 0..c {
                let gv = g.data()[(ch * oh + oy) * ow + ox];
                if gv == 0.0 {
                    continue;
                }
                let d = dx.data_mut();
                d[(ch * h + y0) * w + x0] += gv * (1.0 - ty) * (1.0 - tx);
                d[(ch * h + y0) * w + x1] += gv * (1.0 - ty) * tx;
                d[(ch * h + y1) * w + x0] += gv * ty * (1.0 - tx);
                d[(ch * h + y1) * w + x1] += gv * ty * tx;
            }
        }
    }
    dx
}

fn dims2(t: &Tensor) -> Result<[usize; 2]> {
    match t.shape() {
        [a, b] => Ok([*a, *b]),
        s => Err(Error::ShapeMismatch(format!("expected rank 2, got {s:?}"))),
    }
}

fn dims3(t: &Tensor) -> Result<[usize; 3]> {
    match t.shape() {
        [a, b, c] => Ok([*a, *b, *c]),
        s => Err(Error::ShapeMismatch(format!("expected rank 3, got {s:?}"))),
    }
}

// --- finite-difference verification ---

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub rtol: f64,
    /// Absolute floor below which tiny gradients are not judged relatively.
    pub atol: f64,
    /// Elements checked per parameter before seeded subsampling kicks in.
    pub max_elems_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rtol: 1e-4,
            atol: 1e-7,
            max_elems_per_param: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked_elements: usize,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares the analytic gradients currently held in `store` (populated by a
/// prior backward pass) against central finite differences of `loss_fn`.
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        checked_elements: 0,
        failures: Vec::new(),
    };
    for idx in 0..store.len() {
        let n = store.params[idx].value.len();
        let mut elems: Vec<usize> = (0..n).collect();
        if n > cfg.max_elems_per_param {
            elems.shuffle(&mut rng);
            elems.truncate(cfg.max_elems_per_param);
            elems.sort_unstable();
        }
        for e in elems {
            let original = store.params[idx].value.data()[e];
            store.params[idx].value.data_mut()[e] = original + cfg.step;
            let plus = loss_fn(store)?;
            store.params[idx].value.data_mut()[e] = original - cfg.step;
            let minus = loss_fn(store)?;
            store.params[idx].value.data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let analytic = store.params[idx].grad.data()[e];
            let err = (numeric - analytic).abs();
            let scale = numeric.abs().max(analytic.abs());
            let rel = err / scale.max(1e-12);
            report.checked_elements += 1;
            if scale > cfg.atol && rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{}[{}]", store.params[idx].name, e);
            }
            if err > cfg.atol + cfg.rtol * scale {
                report.failures.push(format!(
                    "{}[{}]: analytic {analytic:.6e} vs numeric {numeric:.6e}",
                    store.params[idx].name, e
                ));
            }
        }
    }
    Ok(report)
}

// --- checkpoint format ---

pub const MIAC_MAGIC: [u8; 4] = *b"MIAC";

/// Writes all parameter values: magic, u32 count, then per parameter a u16
/// name length, the UTF-8 name and an embedded MIAT tensor.
pub fn write_checkpoint<W: Write>(w: &mut W, store: &ParamStore) -> Result<()> {
    w.write_all(&MIAC_MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        write_miat(w, &p.value)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MIAC_MAGIC {
        return Err(Error::Format(format!("bad MIAC magic {magic:02X?}")));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let count = u32::from_le_bytes(buf4) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut buf2 = [0u8; 2];
        r.read_exact(&mut buf2)?;
        let len = u16::from_le_bytes(buf2) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Format("non-UTF8 parameter name".into()))?;
        out.push((name, read_miat(r)?));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, store)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Loads a checkpoint into an already-constructed store; every name and shape
/// must match, otherwise the error lists the offending dims.
pub fn load_checkpoint_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let bytes = fs::read(path)?;
    let entries = read_checkpoint(&mut bytes.as_slice())?;
    if entries.len() != store.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint has {} parameters, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for (i, (name, value)) in entries.into_iter().enumerate() {
        let p = &mut store.params[i];
        if p.name != name {
            return Err(Error::CheckpointMismatch(format!(
                "parameter {i}: checkpoint {name:?} vs model {:?}",
                p.name
            )));
        }
        if p.value.shape() != value.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "{name}: checkpoint shape {:?} vs model shape {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
        p.grad.data_mut().fill(0.0);
        p.velocity.data_mut().fill(0.0);
    }
    Ok(())
}
