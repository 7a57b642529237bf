use std::collections::HashMap;
use std::rc::Rc;

use super::ops::{self, ConvGeometry};
use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::{lit, Scalar};

/// Handle to a value produced on a [`Tape`].
///
/// Cloning is cheap: the value is reference counted and immutable.
#[derive(Clone, Debug)]
pub struct Var<S: Scalar = f64> {
    id: usize,
    tracked: bool,
    value: Rc<Tensor<S>>,
}

impl<S: Scalar> Var<S> {
    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[S] {
        self.value.data()
    }

    /// `true` when the value depends on a parameter registered with gradients.
    pub fn tracked(&self) -> bool {
        self.tracked
    }

    pub fn id(&self) -> usize {
        self.id
    }
}

enum Op<S: Scalar> {
    Conv2d {
        x: Var<S>,
        w: Var<S>,
        b: Option<Var<S>>,
        geom: ConvGeometry,
    },
    Linear {
        x: Var<S>,
        w: Var<S>,
        b: Option<Var<S>>,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    Bmm {
        a: Var<S>,
        b: Var<S>,
        dims: (usize, usize, usize, usize),
        transpose_b: bool,
    },
    Add {
        a: Var<S>,
        b: Var<S>,
    },
    Sub {
        a: Var<S>,
        b: Var<S>,
    },
    Mul {
        a: Var<S>,
        b: Var<S>,
    },
    Div {
        a: Var<S>,
        b: Var<S>,
        out: Rc<Tensor<S>>,
    },
    AddBroadcast {
        a: Var<S>,
        b: Var<S>,
    },
    Scale {
        x: Var<S>,
        c: S,
    },
    Shift {
        x: Var<S>,
    },
    Relu {
        x: Var<S>,
    },
    Gelu {
        x: Var<S>,
    },
    Sigmoid {
        x: Var<S>,
        out: Rc<Tensor<S>>,
    },
    Ln {
        x: Var<S>,
    },
    Clamp {
        x: Var<S>,
        lo: S,
        hi: S,
    },
    LayerNorm {
        x: Var<S>,
        gamma: Var<S>,
        beta: Var<S>,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Softmax {
        x: Var<S>,
        out: Rc<Tensor<S>>,
    },
    Sum {
        x: Var<S>,
    },
    MeanRows {
        x: Var<S>,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: Var<S>,
    },
    Gather {
        x: Var<S>,
        map: Vec<usize>,
    },
    Concat {
        parts: Vec<Var<S>>,
    },
    Narrow {
        x: Var<S>,
        start: usize,
    },
}

struct Node<S: Scalar> {
    out: usize,
    op: Op<S>,
}

/// Records differentiable operations for one forward pass.
///
/// A tape is single-threaded and single-use: [`Tape::backward`] consumes the
/// recording. An inference tape ([`Tape::inference`]) records nothing and
/// frees intermediates as soon as their handles are dropped.
pub struct Tape<S: Scalar = f64> {
    recording: bool,
    consumed: bool,
    next_id: usize,
    nodes: Vec<Node<S>>,
    kink_hash: u64,
    grad_fault: Option<S>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], keyed by variable.
pub struct Gradients<S: Scalar = f64> {
    grads: HashMap<usize, Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: &Var<S>) -> Tensor<S> {
        match self.grads.get(&var.id) {
            Some(g) => Tensor::new(var.shape().to_vec(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(var.shape()),
        }
    }

    /// Moves the gradient of `var` out of the set.
    pub fn take(&mut self, var: &Var<S>) -> Vec<S> {
        self.grads
            .remove(&var.id)
            .unwrap_or_else(|| vec![S::zero(); var.value.numel()])
    }

    /// Stores the gradient of `var` on `tensor` (which must share its shape).
    pub fn attach(&self, var: &Var<S>, tensor: &mut Tensor<S>) -> Result<()> {
        if tensor.shape() != var.shape() {
            return shape_err(format!(
                "cannot attach gradient of {:?} to tensor {:?}",
                var.shape(),
                tensor.shape()
            ));
        }
        tensor.set_grad(self.wrt(var).into_data())
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, g: Vec<S>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a = *a + v),
        None => *slot = Some(g),
    }
}

fn zip_map<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl<S: Scalar> Tape<S> {
    /// A recording tape.
    pub fn new() -> Self {
        Tape {
            recording: true,
            consumed: false,
            next_id: 0,
            nodes: Vec::new(),
            kink_hash: 0xcbf2_9ce4_8422_2325,
            grad_fault: None,
        }
    }

    /// A tape that evaluates eagerly and records nothing.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of the side of every kink (ReLU at 0, clamp bounds) the forward
    /// pass touched. Two evaluations with equal fingerprints took the same
    /// piecewise-smooth branch everywhere.
    pub fn kink_fingerprint(&self) -> u64 {
        self.kink_hash
    }

    /// Scales every ReLU input gradient by `factor`. Only for exercising the
    /// gradient checker's failure path.
    #[doc(hidden)]
    pub fn inject_relu_grad_fault(&mut self, factor: S) {
        self.grad_fault = Some(factor);
    }

    fn mix_kink(&mut self, side: u8) {
        self.kink_hash = (self.kink_hash ^ side as u64).wrapping_mul(0x0100_0000_01b3);
    }

    fn fresh(&mut self, value: Tensor<S>, tracked: bool) -> Var<S> {
        let id = self.next_id;
        self.next_id += 1;
        Var {
            id,
            tracked,
            value: Rc::new(value),
        }
    }

    /// Registers a differentiable leaf (a parameter or input).
    pub fn param(&mut self, value: Tensor<S>) -> Var<S> {
        let tracked = self.recording;
        self.fresh(value, tracked)
    }

    /// Registers a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<S>) -> Var<S> {
        self.fresh(value, false)
    }

    fn emit(&mut self, value: Tensor<S>, inputs: &[&Var<S>], op: impl FnOnce() -> Op<S>) -> Var<S> {
        let tracked = self.recording && inputs.iter().any(|v| v.tracked);
        let var = self.fresh(value, tracked);
        if tracked {
            self.nodes.push(Node {
                out: var.id,
                op: op(),
            });
        }
        var
    }

    pub fn conv2d(
        &mut self,
        x: &Var<S>,
        w: &Var<S>,
        b: Option<&Var<S>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<S>> {
        let out = ops::conv2d(x.value(), w.value(), b.map(|b| b.value()), stride, padding)?;
        let geom = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.emit(out, &inputs, || Op::Conv2d {
            x: x.clone(),
            w: w.clone(),
            b: b.cloned(),
            geom,
        }))
    }

    pub fn linear(&mut self, x: &Var<S>, w: &Var<S>, b: Option<&Var<S>>) -> Result<Var<S>> {
        let (d_out, d_in) = ops::linear_dims(x.value(), w.value(), b.map(|b| b.value()))?;
        let rows = x.value.numel() / d_in.max(1);
        let out = ops::linear(x.value(), w.value(), b.map(|b| b.value()))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.emit(out, &inputs, || Op::Linear {
            x: x.clone(),
            w: w.clone(),
            b: b.cloned(),
            rows,
            d_in,
            d_out,
        }))
    }

    pub fn bmm(&mut self, a: &Var<S>, b: &Var<S>, transpose_b: bool) -> Result<Var<S>> {
        let dims = ops::bmm_dims(a.shape(), b.shape(), transpose_b)?;
        let out = ops::bmm(a.value(), b.value(), transpose_b)?;
        Ok(self.emit(out, &[a, b], || Op::Bmm {
            a: a.clone(),
            b: b.clone(),
            dims,
            transpose_b,
        }))
    }

    fn same_shape(a: &Var<S>, b: &Var<S>, what: &str) -> Result<()> {
        if a.shape() != b.shape() {
            return shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: &Var<S>,
        b: &Var<S>,
        what: &str,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        Self::same_shape(a, b, what)?;
        Tensor::new(a.shape().to_vec(), zip_map(a.data(), b.data(), f))
    }

    pub fn add(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.emit(out, &[a, b], || Op::Add {
            a: a.clone(),
            b: b.clone(),
        }))
    }

    pub fn sub(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.emit(out, &[a, b], || Op::Sub {
            a: a.clone(),
            b: b.clone(),
        }))
    }

    pub fn mul(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.emit(out, &[a, b], || Op::Mul {
            a: a.clone(),
            b: b.clone(),
        }))
    }

    pub fn div(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        let out = Rc::new(self.binary(a, b, "div", |x, y| x / y)?);
        let keep = out.clone();
        let var = self.emit((*out).clone(), &[a, b], || Op::Div {
            a: a.clone(),
            b: b.clone(),
            out: keep,
        });
        Ok(var)
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s, repeated over the leading axes.
    pub fn add_broadcast(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err(format!("cannot broadcast {sb:?} onto {sa:?}"));
        }
        let inner = b.value.numel().max(1);
        let data = a
            .data()
            .chunks(inner)
            .flat_map(|chunk| chunk.iter().zip(b.data()).map(|(&x, &y)| x + y))
            .collect();
        let out = Tensor::new(sa.to_vec(), data)?;
        Ok(self.emit(out, &[a, b], || Op::AddBroadcast {
            a: a.clone(),
            b: b.clone(),
        }))
    }

    pub fn scale(&mut self, x: &Var<S>, c: S) -> Var<S> {
        let out = x.value.map(|v| v * c);
        self.emit(out, &[x], || Op::Scale { x: x.clone(), c })
    }

    pub fn add_scalar(&mut self, x: &Var<S>, c: S) -> Var<S> {
        let out = x.value.map(|v| v + c);
        self.emit(out, &[x], || Op::Shift { x: x.clone() })
    }

    pub fn relu(&mut self, x: &Var<S>) -> Var<S> {
        if !self.recording {
            for &v in x.data() {
                self.mix_kink((v > S::zero()) as u8);
            }
        }
        let out = ops::relu(x.value());
        self.emit(out, &[x], || Op::Relu { x: x.clone() })
    }

    pub fn gelu(&mut self, x: &Var<S>) -> Var<S> {
        let out = ops::gelu(x.value());
        self.emit(out, &[x], || Op::Gelu { x: x.clone() })
    }

    pub fn sigmoid(&mut self, x: &Var<S>) -> Var<S> {
        let out = Rc::new(ops::sigmoid(x.value()));
        let keep = out.clone();
        self.emit((*out).clone(), &[x], || Op::Sigmoid {
            x: x.clone(),
            out: keep,
        })
    }

    /// Natural logarithm.
    pub fn ln(&mut self, x: &Var<S>) -> Var<S> {
        let out = x.value.map(|v| v.ln());
        self.emit(out, &[x], || Op::Ln { x: x.clone() })
    }

    pub fn clamp(&mut self, x: &Var<S>, lo: S, hi: S) -> Var<S> {
        if !self.recording {
            for &v in x.data() {
                let side = if v < lo {
                    0
                } else if v > hi {
                    2
                } else {
                    1
                };
                self.mix_kink(side);
            }
        }
        let out = x.value.map(|v| v.max(lo).min(hi));
        self.emit(out, &[x], || Op::Clamp {
            x: x.clone(),
            lo,
            hi,
        })
    }

    pub fn layer_norm(
        &mut self,
        x: &Var<S>,
        gamma: &Var<S>,
        beta: &Var<S>,
        eps: S,
    ) -> Result<Var<S>> {
        let (out, cache) = ops::layer_norm_forward(x.value(), gamma.value(), beta.value(), eps)?;
        Ok(self.emit(out, &[x, gamma, beta], || Op::LayerNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            xhat: cache.xhat,
            rstd: cache.rstd,
        }))
    }

    pub fn softmax(&mut self, x: &Var<S>) -> Var<S> {
        let out = Rc::new(ops::softmax(x.value()));
        let keep = out.clone();
        self.emit((*out).clone(), &[x], || Op::Softmax {
            x: x.clone(),
            out: keep,
        })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: &Var<S>) -> Var<S> {
        let total = x.data().iter().copied().fold(S::zero(), |a, v| a + v);
        self.emit(Tensor::scalar(total), &[x], || Op::Sum { x: x.clone() })
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: &Var<S>) -> Var<S> {
        let n = x.value.numel().max(1);
        let s = self.sum(x);
        self.scale(&s, S::one() / lit(n as f64))
    }

    /// Mean over the leading axis of a 2-D tensor: `[N,C] → [C]`.
    pub fn mean_rows(&mut self, x: &Var<S>) -> Result<Var<S>> {
        let [rows, cols] = *x.shape() else {
            return shape_err(format!("mean_rows expects [N,C], got {:?}", x.shape()));
        };
        let inv = S::one() / lit(rows.max(1) as f64);
        let mut acc = vec![S::zero(); cols];
        for row in x.data().chunks(cols.max(1)) {
            acc.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
        }
        acc.iter_mut().for_each(|a| *a = *a * inv);
        let out = Tensor::new(vec![cols], acc)?;
        Ok(self.emit(out, &[x], || Op::MeanRows {
            x: x.clone(),
            rows,
            cols,
        }))
    }

    pub fn reshape(&mut self, x: &Var<S>, shape: &[usize]) -> Result<Var<S>> {
        let out = x.value().clone().reshape(shape)?;
        Ok(self.emit(out, &[x], || Op::Reshape { x: x.clone() }))
    }

    fn gather_op(&mut self, x: &Var<S>, shape: Vec<usize>, map: Vec<usize>) -> Result<Var<S>> {
        let out = Tensor::new(shape, ops::gather(x.data(), &map))?;
        Ok(self.emit(out, &[x], || Op::Gather { x: x.clone(), map }))
    }

    pub fn permute(&mut self, x: &Var<S>, perm: &[usize]) -> Result<Var<S>> {
        let map = ops::permute_map(x.shape(), perm)?;
        let shape = perm.iter().map(|&p| x.shape()[p]).collect();
        self.gather_op(x, shape, map)
    }

    /// Rows of a `[R,D]` table selected by `index`, giving `[len(index), D]`.
    pub fn index_select(&mut self, table: &Var<S>, index: &[usize]) -> Result<Var<S>> {
        let [rows, d] = *table.shape() else {
            return shape_err(format!(
                "index_select expects [R,D], got {:?}",
                table.shape()
            ));
        };
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return shape_err(format!("index {bad} out of range for {rows} rows"));
        }
        let map = index.iter().flat_map(|&i| i * d..(i + 1) * d).collect();
        self.gather_op(table, vec![index.len(), d], map)
    }

    pub fn window_partition(&mut self, x: &Var<S>, window: usize) -> Result<Var<S>> {
        let out = ops::window_partition(x.value(), window)?;
        let (h, w, c) = ops::hwc_dims(x.value())?;
        let map = ops::window_partition_map(h, w, c, window);
        Ok(self.emit(out, &[x], || Op::Gather { x: x.clone(), map }))
    }

    pub fn window_reverse(&mut self, wins: &Var<S>, h: usize, w: usize) -> Result<Var<S>> {
        let out = ops::window_reverse(wins.value(), h, w)?;
        let c = wins.shape()[2];
        let window = (wins.shape()[1] as f64).sqrt().round() as usize;
        let fwd = ops::window_partition_map(h, w, c, window);
        let mut map = vec![0; fwd.len()];
        for (i, &src) in fwd.iter().enumerate() {
            map[src] = i;
        }
        Ok(self.emit(out, &[wins], || Op::Gather {
            x: wins.clone(),
            map,
        }))
    }

    pub fn cyclic_shift(&mut self, x: &Var<S>, dy: isize, dx: isize) -> Result<Var<S>> {
        let (h, w, c) = ops::hwc_dims(x.value())?;
        let map = ops::cyclic_shift_map(h, w, c, dy, dx);
        self.gather_op(x, vec![h, w, c], map)
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[&Var<S>]) -> Result<Var<S>> {
        let values: Vec<&Tensor<S>> = parts.iter().map(|p| p.value()).collect();
        let out = ops::concat_axis0(&values)?;
        Ok(self.emit(out, parts, || Op::Concat {
            parts: parts.iter().map(|&p| p.clone()).collect(),
        }))
    }

    pub fn concat_channels(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        self.concat(&[a, b])
    }

    /// Slice `start..start+len` of the leading axis.
    pub fn narrow(&mut self, x: &Var<S>, start: usize, len: usize) -> Result<Var<S>> {
        let out = ops::narrow_axis0(x.value(), start, len)?;
        let inner: usize = x.shape()[1..].iter().product();
        Ok(self.emit(out, &[x], || Op::Narrow {
            x: x.clone(),
            start: start * inner,
        }))
    }

    /// Reverse-mode sweep from a one-element `loss`.
    ///
    /// Consumes the recording; calling it twice is an error.
    pub fn backward(&mut self, loss: &Var<S>) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::Backward("tape already consumed".into()));
        }
        if !loss.value.is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.next_id];
        let mut leaf_shapes = HashMap::new();
        if loss.tracked {
            grads[loss.id] = Some(vec![S::one()]);
        }
        let fault = self.grad_fault;
        while let Some(node) = self.nodes.pop() {
            let Some(gy) = grads[node.out].take() else {
                continue;
            };
            backward_node(node.op, gy, &mut grads, &mut leaf_shapes, fault)?;
        }
        let mut out = HashMap::new();
        for &id in leaf_shapes.keys() {
            if let Some(g) = grads[id].take() {
                out.insert(id, g);
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Routes gradient `g` to `var`; remembers shapes of tracked inputs so
/// leaves can be reported.
fn send<S: Scalar>(
    grads: &mut [Option<Vec<S>>],
    shapes: &mut HashMap<usize, Vec<usize>>,
    var: &Var<S>,
    g: Vec<S>,
) {
    if var.tracked {
        shapes.entry(var.id).or_insert_with(|| var.shape().to_vec());
        accumulate(&mut grads[var.id], g);
    }
}

fn backward_node<S: Scalar>(
    op: Op<S>,
    gy: Vec<S>,
    grads: &mut [Option<Vec<S>>],
    shapes: &mut HashMap<usize, Vec<usize>>,
    fault: Option<S>,
) -> Result<()> {
    match op {
        Op::Conv2d { x, w, b, geom } => {
            let (dx, dw, db) =
                ops::conv2d_backward(&geom, x.data(), w.data(), &gy, x.tracked, w.tracked);
            if let Some(dx) = dx {
                send(grads, shapes, &x, dx);
            }
            if let Some(dw) = dw {
                send(grads, shapes, &w, dw);
            }
            if let Some(b) = b {
                send(grads, shapes, &b, db);
            }
        }
        Op::Linear {
            x,
            w,
            b,
            rows,
            d_in,
            d_out,
        } => {
            if x.tracked {
                let mut dx = vec![S::zero(); rows * d_in];
                S::gemm(
                    rows,
                    d_out,
                    d_in,
                    &gy,
                    d_out as isize,
                    1,
                    w.data(),
                    d_in as isize,
                    1,
                    S::zero(),
                    &mut dx,
                    d_in as isize,
                    1,
                );
                send(grads, shapes, &x, dx);
            }
            if w.tracked {
                let mut dw = vec![S::zero(); d_out * d_in];
                S::gemm(
                    d_out,
                    rows,
                    d_in,
                    &gy,
                    1,
                    d_out as isize,
                    x.data(),
                    d_in as isize,
                    1,
                    S::zero(),
                    &mut dw,
                    d_in as isize,
                    1,
                );
                send(grads, shapes, &w, dw);
            }
            if let Some(b) = b {
                let mut db = vec![S::zero(); d_out];
                for row in gy.chunks(d_out) {
                    db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
                send(grads, shapes, &b, db);
            }
        }
        Op::Bmm {
            a,
            b,
            dims: (batch, m, k, n),
            transpose_b,
        } => {
            if a.tracked {
                // dA = dC · Bᵀ (or dC · B when B was transposed).
                let mut da = vec![S::zero(); batch * m * k];
                let (rsb, csb) = if transpose_b {
                    (k as isize, 1)
                } else {
                    (1, n as isize)
                };
                for i in 0..batch {
                    S::gemm(
                        m,
                        n,
                        k,
                        &gy[i * m * n..],
                        n as isize,
                        1,
                        &b.data()[i * k * n..],
                        rsb,
                        csb,
                        S::zero(),
                        &mut da[i * m * k..],
                        k as isize,
                        1,
                    );
                }
                send(grads, shapes, &a, da);
            }
            if b.tracked {
                let mut db = vec![S::zero(); batch * k * n];
                for i in 0..batch {
                    if transpose_b {
                        // B is [n,k]: dB = dCᵀ · A.
                        S::gemm(
                            n,
                            m,
                            k,
                            &gy[i * m * n..],
                            1,
                            n as isize,
                            &a.data()[i * m * k..],
                            k as isize,
                            1,
                            S::zero(),
                            &mut db[i * k * n..],
                            k as isize,
                            1,
                        );
                    } else {
                        // B is [k,n]: dB = Aᵀ · dC.
                        S::gemm(
                            k,
                            m,
                            n,
                            &a.data()[i * m * k..],
                            1,
                            k as isize,
                            &gy[i * m * n..],
                            n as isize,
                            1,
                            S::zero(),
                            &mut db[i * k * n..],
                            n as isize,
                            1,
                        );
                    }
                }
                send(grads, shapes, &b, db);
            }
        }
        Op::Add { a, b } => {
            if b.tracked {
                send(grads, shapes, &b, gy.clone());
            }
            send(grads, shapes, &a, gy);
        }
        Op::Sub { a, b } => {
            if b.tracked {
                send(grads, shapes, &b, gy.iter().map(|&v| -v).collect());
            }
            send(grads, shapes, &a, gy);
        }
        Op::Mul { a, b } => {
            if a.tracked {
                send(grads, shapes, &a, zip_map(&gy, b.data(), |g, y| g * y));
            }
            if b.tracked {
                send(grads, shapes, &b, zip_map(&gy, a.data(), |g, x| g * x));
            }
        }
        Op::Div { a, b, out } => {
            if a.tracked {
                send(grads, shapes, &a, zip_map(&gy, b.data(), |g, y| g / y));
            }
            if b.tracked {
                let db = gy
                    .iter()
                    .zip(out.data())
                    .zip(b.data())
                    .map(|((&g, &q), &y)| -g * q / y)
                    .collect();
                send(grads, shapes, &b, db);
            }
        }
        Op::AddBroadcast { a, b } => {
            if b.tracked {
                let inner = b.value.numel().max(1);
                let mut db = vec![S::zero(); inner];
                for chunk in gy.chunks(inner) {
                    db.iter_mut().zip(chunk).for_each(|(d, &v)| *d = *d + v);
                }
                send(grads, shapes, &b, db);
            }
            send(grads, shapes, &a, gy);
        }
        Op::Scale { x, c } => send(grads, shapes, &x, gy.iter().map(|&g| g * c).collect()),
        Op::Shift { x } | Op::Reshape { x } => send(grads, shapes, &x, gy),
        Op::Relu { x } => {
            let scale = fault.unwrap_or_else(S::one);
            let dx = zip_map(&gy, x.data(), |g, v| {
                if v > S::zero() {
                    g * scale
                } else {
                    S::zero()
                }
            });
            send(grads, shapes, &x, dx);
        }
        Op::Gelu { x } => {
            let dx = zip_map(&gy, x.data(), |g, v| g * ops::gelu_grad_scalar(v));
            send(grads, shapes, &x, dx);
        }
        Op::Sigmoid { x, out } => {
            let dx = zip_map(&gy, out.data(), |g, s| g * s * (S::one() - s));
            send(grads, shapes, &x, dx);
        }
        Op::Ln { x } => send(grads, shapes, &x, zip_map(&gy, x.data(), |g, v| g / v)),
        Op::Clamp { x, lo, hi } => {
            let dx = zip_map(&gy, x.data(), |g, v| {
                if v >= lo && v <= hi {
                    g
                } else {
                    S::zero()
                }
            });
            send(grads, shapes, &x, dx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = x.value.last_dim();
            let dn: S = lit(d as f64);
            if gamma.tracked {
                let mut dg = vec![S::zero(); d];
                for (gr, xr) in gy.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dg[j] = dg[j] + gr[j] * xr[j];
                    }
                }
                send(grads, shapes, &gamma, dg);
            }
            if beta.tracked {
                let mut db = vec![S::zero(); d];
                for gr in gy.chunks(d) {
                    db.iter_mut().zip(gr).for_each(|(a, &v)| *a = *a + v);
                }
                send(grads, shapes, &beta, db);
            }
            if x.tracked {
                let mut dx = vec![S::zero(); gy.len()];
                for (r, ((gr, xr), out)) in gy
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(dx.chunks_mut(d))
                    .enumerate()
                {
                    let mut mean_g = S::zero();
                    let mut mean_gx = S::zero();
                    for j in 0..d {
                        let gh = gr[j] * gamma.data()[j];
                        mean_g = mean_g + gh;
                        mean_gx = mean_gx + gh * xr[j];
                    }
                    mean_g = mean_g / dn;
                    mean_gx = mean_gx / dn;
                    for j in 0..d {
                        let gh = gr[j] * gamma.data()[j];
                        out[j] = rstd[r] * (gh - mean_g - xr[j] * mean_gx);
                    }
                }
                send(grads, shapes, &x, dx);
            }
        }
        Op::Softmax { x, out } => {
            let d = out.last_dim().max(1);
            let mut dx = vec![S::zero(); gy.len()];
            for ((gr, yr), dr) in gy.chunks(d).zip(out.data().chunks(d)).zip(dx.chunks_mut(d)) {
                let dot = gr.iter().zip(yr).fold(S::zero(), |a, (&g, &y)| a + g * y);
                for j in 0..d {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            send(grads, shapes, &x, dx);
        }
        Op::Sum { x } => {
            let n = x.value.numel();
            send(grads, shapes, &x, vec![gy[0]; n]);
        }
        Op::MeanRows { x, rows, cols } => {
            let inv = S::one() / lit(rows.max(1) as f64);
            let mut dx = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                dx.extend(gy.iter().map(|&g| g * inv));
            }
            send(grads, shapes, &x, dx);
        }
        Op::Gather { x, map } => {
            let n = x.value.numel();
            send(grads, shapes, &x, ops::scatter(&gy, &map, n));
        }
        Op::Concat { parts } => {
            let mut offset = 0;
            for p in parts {
                let n = p.value.numel();
                if p.tracked {
                    send(grads, shapes, &p, gy[offset..offset + n].to_vec());
                }
                offset += n;
            }
        }
        Op::Narrow { x, start } => {
            let mut dx = vec![S::zero(); x.value.numel()];
            dx[start..start + gy.len()].copy_from_slice(&gy);
            send(grads, shapes, &x, dx);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_and_square_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let s = tape.sum(&x);
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.wrt(&x).data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(&x, &x).unwrap();
        let s = tape.sum(&sq);
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.wrt(&x).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unused_input_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2]));
        let y = tape.param(Tensor::ones(&[2]));
        let s = tape.sum(&x);
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.wrt(&y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_reuse_and_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(&x), Err(Error::Backward(_))));
        let s = tape.sum(&x);
        tape.backward(&s).unwrap();
        assert!(tape.backward(&s).is_err());
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(&x);
        let s = tape.sum(&r);
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.wrt(&x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[2], 3.0));
        let a = tape.scale(&x, 2.0);
        let b = tape.add(&a, &x).unwrap();
        let s = tape.sum(&b);
        let mut g = tape.backward(&s).unwrap();
        let mut t = Tensor::zeros(&[2]);
        g.attach(&x, &mut t).unwrap();
        assert_eq!(t.grad().unwrap(), &[3.0, 3.0]);
        assert_eq!(g.take(&x), vec![3.0, 3.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.param(Tensor::ones(&[4]));
        let y = tape.relu(&x);
        let _ = tape.sum(&y);
        assert!(tape.is_empty());
        assert!(!y.tracked());
    }
}
