//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients
//! into every node that (transitively) depends on a trainable leaf. Layers are
//! expressed as coarse fused operations (convolution, batch norm, a full GRU
//! recurrence) so that a forward pass produces a few hundred nodes rather than
//! millions.
//!
//! All arrays handed out by the tape are in standard (row-major) layout.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{s, Array1, Array2, Array3, ArrayD, Axis, Ix2, Ix3, IxDyn, Zip};

use crate::error::{Error, Result};

pub type Tensor = ArrayD<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient rule of a recorded operation: receives the gradient flowing into
/// the op's output and a mask telling which parents need a gradient.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` means no gradient reached the node (it is constant with
    /// respect to the loss or was detached).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn to2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn to3(t: &Tensor) -> ndarray::ArrayView3<'_, f64> {
    t.view().into_dimensionality::<Ix3>().expect("rank-3 tensor")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value.as_standard_layout().into_owned(), Vec::new(), None, true)
    }

    /// A value no gradient flows into.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value.as_standard_layout().into_owned(), Vec::new(), None, false)
    }

    /// Same value as `v` with the gradient path cut.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an operation with a caller-supplied gradient rule.
    pub fn custom(&self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        let value = value.as_standard_layout().into_owned();
        if requires_grad {
            self.push(
                value,
                parents.iter().map(|p| p.0).collect(),
                Some(backward),
                true,
            )
        } else {
            self.push(value, Vec::new(), None, false)
        }
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(nodes[loss.0].value.raw_dim()));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, need) else {
                    continue;
                };
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
            // Intermediate gradients stay available for inspection.
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = &*va + &*vb;
        Ok(self.custom(
            out,
            &[a, b],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "sub: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = &*va - &*vb;
        Ok(self.custom(
            out,
            &[a, b],
            Box::new(|g, _| vec![Some(g.clone()), Some(-g)]),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "mul: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = &*va * &*vb;
        Ok(self.custom(
            out,
            &[a, b],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g * &*vb),
                    needs[1].then(|| g * &*va),
                ]
            }),
        ))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let out = &*self.value(a) * factor;
        self.custom(out, &[a], Box::new(move |g, _| vec![Some(g * factor)]))
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mul_mask(&self, a: Var, mask: Tensor) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != mask.shape() {
            return Err(Error::shape("mul_mask: mask shape differs from input"));
        }
        let out = &*va * &mask;
        Ok(self.custom(out, &[a], Box::new(move |g, _| vec![Some(g * &mask)])))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        let mask = out.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        self.custom(out, &[a], Box::new(move |g, _| vec![Some(g * &mask)]))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let original = va.shape().to_vec();
        let out = va
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|e| Error::shape(format!("reshape {original:?} -> {shape:?}: {e}")))?;
        Ok(self.custom(
            out,
            &[a],
            Box::new(move |g, _| {
                vec![Some(
                    g.clone()
                        .into_shape_with_order(IxDyn(&original))
                        .expect("reshape gradient"),
                )]
            }),
        ))
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len().max(1) as f64;
        let dim = va.raw_dim();
        let out = ArrayD::from_elem(IxDyn(&[]), va.sum() / n);
        self.custom(
            out,
            &[a],
            Box::new(move |g, _| {
                let gv = g.iter().next().copied().unwrap_or(0.0);
                vec![Some(ArrayD::from_elem(dim.clone(), gv / n))]
            }),
        )
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape(format!(
                "matmul: {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = to2(&va).dot(&to2(&vb)).into_dyn();
        Ok(self.custom(
            out,
            &[a, b],
            Box::new(move |g, needs| {
                let g2 = to2(g);
                vec![
                    needs[0].then(|| g2.dot(&to2(&vb).t()).into_dyn()),
                    needs[1].then(|| to2(&va).t().dot(&g2).into_dyn()),
                ]
            }),
        ))
    }

    /// Adds `bias: [D]` along the last axis of `x`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = *vx.shape().last().unwrap_or(&0);
        if vb.ndim() != 1 || vb.len() != d {
            return Err(Error::shape(format!(
                "add_bias: {:?} + {:?}",
                vx.shape(),
                vb.shape()
            )));
        }
        let out = &*vx + &*vb;
        Ok(self.custom(
            out,
            &[x, bias],
            Box::new(move |g, needs| {
                let db = needs[1].then(|| {
                    let rows = g.len() / d.max(1);
                    g.view()
                        .into_shape_with_order((rows, d))
                        .expect("contiguous gradient")
                        .sum_axis(Axis(0))
                        .into_dyn()
                });
                vec![Some(g.clone()), db]
            }),
        ))
    }

    /// Fully connected layer on the last axis: `x: [.., I]`, `w: [I, O]`, `b: [O]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x);
        let inner = *shape.last().ok_or_else(|| Error::shape("linear: scalar input"))?;
        let rows = shape.iter().product::<usize>() / inner.max(1);
        let out_dim = self.shape(w).get(1).copied().unwrap_or(0);
        let flat = if shape.len() == 2 {
            x
        } else {
            self.reshape(x, &[rows, inner])?
        };
        let y = self.matmul(flat, w)?;
        let y = self.add_bias(y, b)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape.clone();
            *out_shape.last_mut().expect("nonempty") = out_dim;
            self.reshape(y, &out_shape)
        }
    }

    // ------------------------------------------------------------------
    // Convolution and pooling on channel-last sequences [N, L, C]
    // ------------------------------------------------------------------

    /// 1-D convolution with stride 1 and "same" padding. The kernel is
    /// stored as `[K, C_in, C_out]`; for even `K` the extra pad goes right.
    pub fn conv1d_same(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.ndim() != 3 || vw.ndim() != 3 || vx.shape()[2] != vw.shape()[1] {
            return Err(Error::shape(format!(
                "conv1d: input {:?}, kernel {:?}",
                vx.shape(),
                vw.shape()
            )));
        }
        let (n, l, cin) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (k, cout) = (vw.shape()[0], vw.shape()[2]);
        let pad = (k - 1) / 2;
        let width = k * cin;

        let xs = vx.as_slice().expect("standard layout");
        let mut patches = Array2::<f64>::zeros((n * l, width));
        {
            let ps = patches.as_slice_mut().expect("fresh array");
            for ni in 0..n {
                for t in 0..l {
                    let row = (ni * l + t) * width;
                    for kk in 0..k {
                        let src = t as isize + kk as isize - pad as isize;
                        if src < 0 || src >= l as isize {
                            continue;
                        }
                        let from = (ni * l + src as usize) * cin;
                        ps[row + kk * cin..row + (kk + 1) * cin]
                            .copy_from_slice(&xs[from..from + cin]);
                    }
                }
            }
        }
        let w2 = vw
            .as_ref()
            .clone()
            .into_shape_with_order((width, cout))
            .expect("contiguous kernel");
        let pre = patches.dot(&w2);
        let conv = self.custom(
            pre.into_shape_with_order((n, l, cout))
                .expect("conv output")
                .into_dyn(),
            &[x, w],
            Box::new(move |g, needs| {
                let g2 = g
                    .view()
                    .into_shape_with_order((n * l, cout))
                    .expect("contiguous gradient");
                let dw = needs[1].then(|| {
                    patches
                        .t()
                        .dot(&g2)
                        .into_shape_with_order((k, cin, cout))
                        .expect("kernel grad")
                        .into_dyn()
                });
                let dx = needs[0].then(|| {
                    let dp = g2.dot(&w2.t());
                    let dps = dp.as_slice().expect("fresh array");
                    let mut dx = vec![0.0; n * l * cin];
                    for ni in 0..n {
                        for t in 0..l {
                            let row = (ni * l + t) * width;
                            for kk in 0..k {
                                let src = t as isize + kk as isize - pad as isize;
                                if src < 0 || src >= l as isize {
                                    continue;
                                }
                                let to = (ni * l + src as usize) * cin;
                                for c in 0..cin {
                                    dx[to + c] += dps[row + kk * cin + c];
                                }
                            }
                        }
                    }
                    ArrayD::from_shape_vec(IxDyn(&[n, l, cin]), dx).expect("dx shape")
                });
                vec![dx, dw]
            }),
        );
        self.add_bias(conv, b)
    }

    /// Non-overlapping max pooling over time (kernel = stride = `k`);
    /// trailing steps that do not fill a window are dropped.
    pub fn max_pool_time(&self, x: Var, k: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 3 || k == 0 {
            return Err(Error::shape("max_pool_time expects [N, L, C] and k > 0"));
        }
        let (n, l, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let lo = l / k;
        if lo == 0 {
            return Err(Error::shape(format!(
                "max_pool_time: length {l} shorter than kernel {k}"
            )));
        }
        let x3 = to3(&vx);
        let mut out = Array3::<f64>::zeros((n, lo, c));
        let mut arg = vec![0usize; n * lo * c];
        for ni in 0..n {
            for t in 0..lo {
                for ci in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_t = t * k;
                    for j in 0..k {
                        let v = x3[[ni, t * k + j, ci]];
                        if v > best {
                            best = v;
                            best_t = t * k + j;
                        }
                    }
                    out[[ni, t, ci]] = best;
                    arg[(ni * lo + t) * c + ci] = best_t;
                }
            }
        }
        Ok(self.custom(
            out.into_dyn(),
            &[x],
            Box::new(move |g, _| {
                let g3 = to3(g);
                let mut dx = Array3::<f64>::zeros((n, l, c));
                for ni in 0..n {
                    for t in 0..lo {
                        for ci in 0..c {
                            dx[[ni, arg[(ni * lo + t) * c + ci], ci]] += g3[[ni, t, ci]];
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        ))
    }

    /// Max over the whole time axis: `[N, L, C] -> [N, C]`.
    pub fn global_max_time(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 3 || vx.shape()[1] == 0 {
            return Err(Error::shape("global_max_time expects non-empty [N, L, C]"));
        }
        let (n, l, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let x3 = to3(&vx);
        let mut out = Array2::<f64>::from_elem((n, c), f64::NEG_INFINITY);
        let mut arg = vec![0usize; n * c];
        for ni in 0..n {
            for t in 0..l {
                for ci in 0..c {
                    let v = x3[[ni, t, ci]];
                    if v > out[[ni, ci]] {
                        out[[ni, ci]] = v;
                        arg[ni * c + ci] = t;
                    }
                }
            }
        }
        Ok(self.custom(
            out.into_dyn(),
            &[x],
            Box::new(move |g, _| {
                let g2 = to2(g);
                let mut dx = Array3::<f64>::zeros((n, l, c));
                for ni in 0..n {
                    for ci in 0..c {
                        dx[[ni, arg[ni * c + ci], ci]] = g2[[ni, ci]];
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        ))
    }

    // ------------------------------------------------------------------
    // Normalization and activations on rows
    // ------------------------------------------------------------------

    /// Batch normalization of `x: [M, C]` using the batch's own statistics.
    /// Returns the output together with the batch mean and the unbiased
    /// batch variance, which the caller folds into running statistics.
    pub fn batch_norm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Array1<f64>, Array1<f64>)> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        if vx.ndim() != 2 || vg.len() != vx.shape()[1] || vb.len() != vx.shape()[1] {
            return Err(Error::shape(format!(
                "batch_norm: input {:?}, gamma {:?}",
                vx.shape(),
                vg.shape()
            )));
        }
        let m = vx.shape()[0];
        if m < 2 {
            return Err(Error::invalid(
                "batch_norm in training mode needs at least 2 rows",
            ));
        }
        let x2 = to2(&vx);
        let mean = x2.mean_axis(Axis(0)).expect("nonempty");
        let centered = &x2 - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("nonempty");
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = &centered * &inv_std;
        let g1 = vg.view().into_dimensionality::<ndarray::Ix1>().expect("rank 1");
        let b1 = vb.view().into_dimensionality::<ndarray::Ix1>().expect("rank 1");
        let out = &xhat * &g1 + &b1;
        let unbiased = &var * (m as f64 / (m as f64 - 1.0));
        let gamma_vals = g1.to_owned();
        let var_out = self.custom(
            out.into_dyn(),
            &[x, gamma, beta],
            Box::new(move |g, needs| {
                let g2 = to2(g);
                let sum_g = g2.sum_axis(Axis(0));
                let sum_gx = (&g2 * &xhat).sum_axis(Axis(0));
                let dx = needs[0].then(|| {
                    let mf = m as f64;
                    let scale = &gamma_vals * &inv_std / mf;
                    let inner = &g2 * mf - &sum_g - &xhat * &sum_gx;
                    (inner * &scale).into_dyn()
                });
                vec![
                    dx,
                    needs[1].then(|| sum_gx.clone().into_dyn()),
                    needs[2].then(|| sum_g.clone().into_dyn()),
                ]
            }),
        );
        Ok((var_out, mean, unbiased))
    }

    /// Batch normalization of `x: [M, C]` with fixed statistics.
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
        eps: f64,
    ) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = vg.len();
        if vx.ndim() != 2 || vx.shape()[1] != c || running_mean.len() != c || vb.len() != c {
            return Err(Error::shape(format!(
                "batch_norm(eval): input {:?}, gamma {:?}",
                vx.shape(),
                vg.shape()
            )));
        }
        let inv_std = running_var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = (&to2(&vx) - running_mean) * &inv_std;
        let g1 = vg.view().into_dimensionality::<ndarray::Ix1>().expect("rank 1");
        let b1 = vb.view().into_dimensionality::<ndarray::Ix1>().expect("rank 1");
        let out = &xhat * &g1 + &b1;
        let scale = &g1 * &inv_std;
        Ok(self.custom(
            out.into_dyn(),
            &[x, gamma, beta],
            Box::new(move |g, needs| {
                let g2 = to2(g);
                vec![
                    needs[0].then(|| (&g2 * &scale).into_dyn()),
                    needs[1].then(|| (&g2 * &xhat).sum_axis(Axis(0)).into_dyn()),
                    needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn()),
                ]
            }),
        ))
    }

    /// Row-wise softmax of `[M, D]`.
    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 2 {
            return Err(Error::shape("softmax_rows expects [M, D]"));
        }
        let probs = softmax2(&to2(&vx));
        let saved = probs.clone();
        Ok(self.custom(
            probs.into_dyn(),
            &[x],
            Box::new(move |g, _| {
                let g2 = to2(g);
                let dot = (&g2 * &saved).sum_axis(Axis(1)).insert_axis(Axis(1));
                vec![Some(((&g2 - &dot) * &saved).into_dyn())]
            }),
        ))
    }

    /// Mean cross-entropy of `logits: [M, K]` against integer labels.
    pub fn cross_entropy_logits(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.ndim() != 2 || vl.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "cross_entropy: logits {:?}, {} labels",
                vl.shape(),
                labels.len()
            )));
        }
        let k = vl.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax2(&to2(&vl));
        let m = labels.len() as f64;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs[[i, y]].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / m;
        let labels = labels.to_vec();
        Ok(self.custom(
            ArrayD::from_elem(IxDyn(&[]), loss),
            &[logits],
            Box::new(move |g, _| {
                let gv = g.iter().next().copied().unwrap_or(0.0);
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d[[i, y]] -= 1.0;
                }
                vec![Some((d * (gv / m)).into_dyn())]
            }),
        ))
    }

    // ------------------------------------------------------------------
    // Sequence plumbing
    // ------------------------------------------------------------------

    /// Repeats `x: [N, D]` over a new time axis: `[N, T, D]`.
    pub fn tile_time(&self, x: Var, steps: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 2 {
            return Err(Error::shape("tile_time expects [N, D]"));
        }
        let x2 = to2(&vx);
        let (n, d) = x2.dim();
        let out = x2
            .insert_axis(Axis(1))
            .broadcast((n, steps, d))
            .expect("broadcast")
            .to_owned();
        Ok(self.custom(
            out.into_dyn(),
            &[x],
            Box::new(|g, _| vec![Some(to3(g).sum_axis(Axis(1)).into_dyn())]),
        ))
    }

    /// Concatenation of two `[N, T, _]` tensors along the last axis.
    pub fn concat_last(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 3 || vb.ndim() != 3 || va.shape()[..2] != vb.shape()[..2] {
            return Err(Error::shape(format!(
                "concat_last: {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let da = va.shape()[2];
        let out = ndarray::concatenate(Axis(2), &[to3(&va), to3(&vb)])
            .expect("matching shapes")
            .as_standard_layout()
            .into_owned();
        Ok(self.custom(
            out.into_dyn(),
            &[a, b],
            Box::new(move |g, _| {
                let g3 = to3(g);
                vec![
                    Some(g3.slice(s![.., .., ..da]).to_owned().into_dyn()),
                    Some(g3.slice(s![.., .., da..]).to_owned().into_dyn()),
                ]
            }),
        ))
    }

    /// The recurrent half of a GRU layer (gate order r, z, n).
    ///
    /// `input_gates: [N, T, 3H]` holds the precomputed input projections
    /// `x W_ih + b_ih`; the recurrence starts from a zero hidden state and
    /// returns all hidden states `[N, T, H]` in input time order. With
    /// `reverse` the sequence is consumed from the last step to the first.
    pub fn gru_recurrence(
        &self,
        input_gates: Var,
        w_hh: Var,
        b_hh: Var,
        reverse: bool,
    ) -> Result<Var> {
        let (vi, vw, vb) = (self.value(input_gates), self.value(w_hh), self.value(b_hh));
        if vi.ndim() != 3 || vw.ndim() != 2 {
            return Err(Error::shape("gru_recurrence expects [N, T, 3H] and [H, 3H]"));
        }
        let (n, steps, three_h) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
        let h = vw.shape()[0];
        if three_h != 3 * h || vw.shape()[1] != 3 * h || vb.len() != 3 * h {
            return Err(Error::shape(format!(
                "gru_recurrence: gates {:?}, w_hh {:?}, b_hh {:?}",
                vi.shape(),
                vw.shape(),
                vb.shape()
            )));
        }
        let gi = to3(&vi);
        let w = to2(&vw).to_owned();
        let bias = vb
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("rank 1")
            .to_owned();
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };

        // Per processed step: previous hidden state, gates r, z, n and the
        // hidden-side candidate projection h W_hn + b_hn.
        let mut h_prev_all = Vec::with_capacity(steps);
        let mut r_all = Vec::with_capacity(steps);
        let mut z_all = Vec::with_capacity(steps);
        let mut n_all = Vec::with_capacity(steps);
        let mut hn_all = Vec::with_capacity(steps);
        let mut out = Array3::<f64>::zeros((n, steps, h));
        let mut hidden = Array2::<f64>::zeros((n, h));
        for &t in &order {
            let gh = hidden.dot(&w) + &bias;
            let gx = gi.slice(s![.., t, ..]);
            let r = Zip::from(gx.slice(s![.., ..h]))
                .and(gh.slice(s![.., ..h]))
                .map_collect(|&a, &b| sigmoid(a + b));
            let z = Zip::from(gx.slice(s![.., h..2 * h]))
                .and(gh.slice(s![.., h..2 * h]))
                .map_collect(|&a, &b| sigmoid(a + b));
            let hn = gh.slice(s![.., 2 * h..]).to_owned();
            let cand = Zip::from(gx.slice(s![.., 2 * h..]))
                .and(&r)
                .and(&hn)
                .map_collect(|&a, &rr, &b| (a + rr * b).tanh());
            let next = Zip::from(&z)
                .and(&cand)
                .and(&hidden)
                .map_collect(|&zz, &nn, &hp| (1.0 - zz) * nn + zz * hp);
            out.slice_mut(s![.., t, ..]).assign(&next);
            h_prev_all.push(std::mem::replace(&mut hidden, next));
            r_all.push(r);
            z_all.push(z);
            n_all.push(cand);
            hn_all.push(hn);
        }

        Ok(self.custom(
            out.into_dyn(),
            &[input_gates, w_hh, b_hh],
            Box::new(move |g, needs| {
                let g3 = to3(g);
                let mut d_gi = Array3::<f64>::zeros((n, steps, 3 * h));
                let mut d_w = Array2::<f64>::zeros((h, 3 * h));
                let mut d_b = Array1::<f64>::zeros(3 * h);
                let mut carry = Array2::<f64>::zeros((n, h));
                for (step, &t) in order.iter().enumerate().rev() {
                    let dh = &carry + &g3.slice(s![.., t, ..]);
                    let (hp, r, z, cand, hn) = (
                        &h_prev_all[step],
                        &r_all[step],
                        &z_all[step],
                        &n_all[step],
                        &hn_all[step],
                    );
                    let mut d_gh = Array2::<f64>::zeros((n, 3 * h));
                    {
                        let mut dgi_t = d_gi.slice_mut(s![.., t, ..]);
                        for i in 0..n {
                            for j in 0..h {
                                let dhv = dh[[i, j]];
                                let (zv, nv, rv) = (z[[i, j]], cand[[i, j]], r[[i, j]]);
                                let dn = dhv * (1.0 - zv);
                                let dz = dhv * (hp[[i, j]] - nv);
                                let da_n = dn * (1.0 - nv * nv);
                                let dr = da_n * hn[[i, j]];
                                let da_r = dr * rv * (1.0 - rv);
                                let da_z = dz * zv * (1.0 - zv);
                                dgi_t[[i, j]] = da_r;
                                dgi_t[[i, h + j]] = da_z;
                                dgi_t[[i, 2 * h + j]] = da_n;
                                d_gh[[i, j]] = da_r;
                                d_gh[[i, h + j]] = da_z;
                                d_gh[[i, 2 * h + j]] = da_n * rv;
                            }
                        }
                    }
                    if needs[1] {
                        d_w += &hp.t().dot(&d_gh);
                    }
                    if needs[2] {
                        d_b += &d_gh.sum_axis(Axis(0));
                    }
                    carry = &dh * z + d_gh.dot(&w.t());
                }
                vec![
                    needs[0].then(|| d_gi.into_dyn()),
                    needs[1].then(|| d_w.into_dyn()),
                    needs[2].then(|| d_b.into_dyn()),
                ]
            }),
        ))
    }

    /// Pointwise grouped linear map: `x: [N, T, G*k]`, `w: [G, k]`,
    /// `b: [G]` gives `[N, T, G]` where output channel `g` only reads input
    /// channels `g*k .. (g+1)*k`.
    pub fn grouped_pointwise(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.ndim() != 3 || vw.ndim() != 2 {
            return Err(Error::shape("grouped_pointwise expects [N, T, G*k] and [G, k]"));
        }
        let (groups, k) = (vw.shape()[0], vw.shape()[1]);
        let (n, steps, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        if c != groups * k || vb.len() != groups {
            return Err(Error::shape(format!(
                "grouped_pointwise: input {:?}, weight {:?}, bias {:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            )));
        }
        let x3 = to3(&vx);
        let w2 = to2(&vw).to_owned();
        let b1 = vb.iter().copied().collect::<Vec<_>>();
        let mut out = Array3::<f64>::zeros((n, steps, groups));
        for ni in 0..n {
            for t in 0..steps {
                for gi in 0..groups {
                    let mut acc = b1[gi];
                    for j in 0..k {
                        acc += x3[[ni, t, gi * k + j]] * w2[[gi, j]];
                    }
                    out[[ni, t, gi]] = acc;
                }
            }
        }
        let saved_x = x3.to_owned();
        Ok(self.custom(
            out.into_dyn(),
            &[x, w, b],
            Box::new(move |g, _| {
                let g3 = to3(g);
                let mut dx = Array3::<f64>::zeros((n, steps, c));
                let mut dw = Array2::<f64>::zeros((groups, k));
                let mut db = Array1::<f64>::zeros(groups);
                for ni in 0..n {
                    for t in 0..steps {
                        for gi in 0..groups {
                            let gv = g3[[ni, t, gi]];
                            db[gi] += gv;
                            for j in 0..k {
                                dx[[ni, t, gi * k + j]] += gv * w2[[gi, j]];
                                dw[[gi, j]] += gv * saved_x[[ni, t, gi * k + j]];
                            }
                        }
                    }
                }
                vec![Some(dx.into_dyn()), Some(dw.into_dyn()), Some(db.into_dyn())]
            }),
        ))
    }
}

/// Numerically stable row softmax.
pub fn softmax2(x: &ndarray::ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Compares the tape gradient of `f` at `inputs` against central
    /// differences for every input element.
    fn check<F>(inputs: Vec<Tensor>, f: F)
    where
        F: Fn(&Tape, &[Var]) -> Var,
    {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[which]).expect("gradient").clone();
            for idx in 0..input.len() {
                let eval = |delta: f64| {
                    let tape = Tape::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            let mut t = t.clone();
                            if i == which {
                                t.as_slice_mut().unwrap()[idx] += delta;
                            }
                            tape.leaf(t)
                        })
                        .collect();
                    let v = f(&tape, &vars);
                    tape.value(v).sum()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {which}[{idx}]: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    /// Random weighted sum so that every output element matters.
    fn project(tape: &Tape, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.shape(v);
        let w = tape.constant(random(&shape, &mut rng));
        let p = tape.mul(v, w).unwrap();
        let n = tape.value(p).len() as f64;
        tape.scale(tape.mean_all(p), n)
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(
            vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng), random(&[2], &mut rng)],
            |t, v| {
                let y = t.linear(v[0], v[1], v[2]).unwrap();
                project(t, y, 9)
            },
        );
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(
            vec![
                random(&[2, 7, 3], &mut rng),
                random(&[4, 3, 2], &mut rng),
                random(&[2], &mut rng),
            ],
            |t, v| {
                let y = t.conv1d_same(v[0], v[1], v[2]).unwrap();
                project(t, y, 3)
            },
        );
    }

    #[test]
    fn conv_same_padding_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 6, 2], &mut rng);
        let w = random(&[4, 2, 3], &mut rng);
        let tape = Tape::new();
        let (vx, vw, vb) = (
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(ArrayD::zeros(IxDyn(&[3]))),
        );
        let y = tape.value(tape.conv1d_same(vx, vw, vb).unwrap());
        // K = 4: one step of padding on the left, two on the right.
        for t in 0..6 {
            for o in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    let src = t as isize + k as isize - 1;
                    if (0..6).contains(&src) {
                        for c in 0..2 {
                            acc += x[[0, src as usize, c]] * w[[k, c, o]];
                        }
                    }
                }
                assert!((y[[0, t, o]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(
            vec![random(&[5, 3], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng)],
            |t, v| {
                let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap();
                project(t, y, 4)
            },
        );
        let rm = Array1::from(vec![0.1, -0.2, 0.3]);
        let rv = Array1::from(vec![1.5, 0.5, 2.0]);
        check(
            vec![random(&[4, 3], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng)],
            move |t, v| {
                let y = t.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5).unwrap();
                project(t, y, 5)
            },
        );
    }

    #[test]
    fn pooling_and_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(vec![random(&[2, 9, 3], &mut rng)], |t, v| {
            let p = t.max_pool_time(v[0], 2).unwrap();
            let g = t.global_max_time(p).unwrap();
            let s = t.softmax_rows(g).unwrap();
            project(t, s, 6)
        });
    }

    #[test]
    fn gru_gradients_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for reverse in [false, true] {
            check(
                vec![
                    random(&[2, 5, 9], &mut rng),
                    random(&[3, 9], &mut rng),
                    random(&[9], &mut rng),
                ],
                move |t, v| {
                    let y = t.gru_recurrence(v[0], v[1], v[2], reverse).unwrap();
                    project(t, y, 7)
                },
            );
        }
    }

    #[test]
    fn gru_matches_step_by_step_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 2;
        let gi = random(&[1, 3, 3 * h], &mut rng);
        let w = random(&[h, 3 * h], &mut rng);
        let b = random(&[3 * h], &mut rng);
        let tape = Tape::new();
        let out = tape
            .gru_recurrence(
                tape.constant(gi.clone()),
                tape.constant(w.clone()),
                tape.constant(b.clone()),
                false,
            )
            .unwrap();
        let out = tape.value(out);
        let mut hidden = vec![0.0; h];
        for t in 0..3 {
            let gh: Vec<f64> = (0..3 * h)
                .map(|j| b[[j]] + (0..h).map(|i| hidden[i] * w[[i, j]]).sum::<f64>())
                .collect();
            let next: Vec<f64> = (0..h)
                .map(|j| {
                    let r = sigmoid(gi[[0, t, j]] + gh[j]);
                    let z = sigmoid(gi[[0, t, h + j]] + gh[h + j]);
                    let n = (gi[[0, t, 2 * h + j]] + r * gh[2 * h + j]).tanh();
                    (1.0 - z) * n + z * hidden[j]
                })
                .collect();
            for j in 0..h {
                assert!((out[[0, t, j]] - next[j]).abs() < 1e-12);
            }
            hidden = next;
        }
    }

    #[test]
    fn sequence_plumbing_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        check(
            vec![
                random(&[2, 3], &mut rng),
                random(&[2, 4, 2], &mut rng),
                random(&[5, 1], &mut rng),
                random(&[5], &mut rng),
            ],
            |t, v| {
                let tiled = t.tile_time(v[0], 4).unwrap();
                let cat = t.concat_last(tiled, v[1]).unwrap();
                let y = t.grouped_pointwise(cat, v[2], v[3]).unwrap();
                project(t, y, 11)
            },
        );
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        check(vec![random(&[4, 3], &mut rng)], |t, v| {
            t.cross_entropy_logits(v[0], &[0, 2, 1, 2]).unwrap()
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let d = tape.detach(a);
        let y = tape.mul(a, d).unwrap();
        let loss = tape.mean_all(y);
        let grads = tape.backward(loss);
        // d/da of mean(a * stop(a)) is stop(a) / 2 = 1.5.
        assert_eq!(grads.get(a).unwrap().as_slice().unwrap(), &[1.5, 1.5]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn shared_leaf_accumulates_from_both_uses() {
        let tape = Tape::new();
        let a = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 2.0));
        let y = tape.mul(a, a).unwrap();
        let grads = tape.backward(tape.mean_all(y));
        assert_eq!(grads.get(a).unwrap()[[0]], 4.0);
    }
}
