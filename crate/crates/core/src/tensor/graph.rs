use super::ops;
use super::{gemm, Mat, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// What a backward rule sees: the forward inputs and output, the incoming
/// gradient, and which inputs actually need a gradient.
pub struct BackwardCtx<'a, S: Real> {
    pub inputs: Vec<&'a Tensor<S>>,
    pub output: &'a Tensor<S>,
    pub grad: &'a Tensor<S>,
    pub needs: Vec<bool>,
}

pub type BackwardFn<S> = Box<dyn Fn(&BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> + Send>;

struct Node<S: Real> {
    value: Tensor<S>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<S>>,
    requires_grad: bool,
    param: Option<String>,
}

/// Gradients of a scalar with respect to every leaf that required one.
pub struct Gradients<S: Real> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Define-by-run tape: every operation appends a node, and `backward`
/// walks the nodes in exact reverse recording order.
pub struct Graph<S: Real = f32> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Neg,
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that records values only; nothing on it can be differentiated.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// A differentiable input that is not a named parameter.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        let rg = self.grad_enabled;
        self.push_leaf(value, rg, None)
    }

    /// Records the current value of a named parameter.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var> {
        let p = store.get(name)?;
        let rg = self.grad_enabled && p.requires_grad;
        Ok(self.push_leaf(p.value.clone(), rg, Some(name.to_string())))
    }

    fn push_leaf(&mut self, value: Tensor<S>, requires_grad: bool, param: Option<String>) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), backward: None, requires_grad, param });
        Var(self.nodes.len() - 1)
    }

    /// Appends an operation node. The backward rule is dropped when no input
    /// requires a gradient.
    pub fn record(&mut self, value: Tensor<S>, inputs: &[Var], backward: BackwardFn<S>) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar; returns gradients of all leaves.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<S>> {
        let out = &self.nodes[loss.0].value;
        if !out.is_scalar() {
            return Err(Error::invalid("backward", format!("loss must be a scalar, got shape {:?}", out.shape())));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(out.shape().to_vec(), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|&j| &self.nodes[j].value).collect(),
                output: &node.value,
                grad: &g,
                needs: node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect(),
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&j, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&ig)?,
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Reverse pass that accumulates into the store's parameter gradients.
    /// A parameter recorded several times receives the sum of its uses.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<S>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (&node.param, &grads.grads[i]) {
                store.get_mut(name)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------------

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (ElementwiseOp::Relu, None) => Ok(self.relu(a)),
            (ElementwiseOp::Neg, None) => Ok(self.scale(a, -1.0)),
            (ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul, Some(b)) => self.binary(op, a, b),
            _ => Err(Error::invalid("elementwise", format!("{op:?} called with the wrong number of operands"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    fn binary(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return Ok(self.binary_same(op, a, b));
        }
        let layout = Broadcast::resolve(&sa, &sb)?;
        let va = self.value(a);
        let vb = self.value(b);
        let f = |x: S, y: S| match op {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Sub => x - y,
            ElementwiseOp::Mul => x * y,
            _ => unreachable!(),
        };
        let mut out = Vec::with_capacity(layout.numel());
        for i in 0..layout.numel() {
            out.push(f(va.data()[layout.index_a(i)], vb.data()[layout.index_b(i)]));
        }
        let value = Tensor::new(layout.out.clone(), out)?;
        Ok(self.record(
            value,
            &[a, b],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
                let ga = ctx.needs[0].then(|| {
                    let local: Vec<S> = match op {
                        ElementwiseOp::Mul => (0..g.len()).map(|i| g[i] * y.data()[layout.index_b(i)]).collect(),
                        _ => g.to_vec(),
                    };
                    layout.reduce_a(&local, x.shape())
                });
                let gb = ctx.needs[1].then(|| {
                    let local: Vec<S> = match op {
                        ElementwiseOp::Mul => (0..g.len()).map(|i| g[i] * x.data()[layout.index_a(i)]).collect(),
                        ElementwiseOp::Sub => g.iter().map(|&v| -v).collect(),
                        _ => g.to_vec(),
                    };
                    layout.reduce_b(&local, y.shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    fn binary_same(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let out: Vec<S> = match op {
            ElementwiseOp::Add => va.iter().zip(vb).map(|(&x, &y)| x + y).collect(),
            ElementwiseOp::Sub => va.iter().zip(vb).map(|(&x, &y)| x - y).collect(),
            ElementwiseOp::Mul => va.iter().zip(vb).map(|(&x, &y)| x * y).collect(),
            _ => unreachable!(),
        };
        let value = Tensor::new(self.shape(a).to_vec(), out).unwrap();
        self.record(
            value,
            &[a, b],
            Box::new(move |ctx| {
                let g = ctx.grad;
                let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
                let times = |other: &Tensor<S>| {
                    let d = g.data().iter().zip(other.data()).map(|(&p, &q)| p * q).collect();
                    Tensor::new(g.shape().to_vec(), d).unwrap()
                };
                let ga = ctx.needs[0].then(|| match op {
                    ElementwiseOp::Mul => times(y),
                    _ => g.clone(),
                });
                let gb = ctx.needs[1].then(|| match op {
                    ElementwiseOp::Mul => times(x),
                    ElementwiseOp::Sub => g.map(|v| -v),
                    _ => g.clone(),
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > S::zero() { v } else { S::zero() });
        self.record(
            value,
            &[a],
            Box::new(|ctx| {
                let x = ctx.inputs[0].data();
                let data =
                    ctx.grad.data().iter().zip(x).map(|(&g, &v)| if v > S::zero() { g } else { S::zero() }).collect();
                vec![Some(Tensor::new(ctx.grad.shape().to_vec(), data).unwrap())]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cs = S::cast_from(c);
        let value = self.value(a).map(|v| v * cs);
        self.record(value, &[a], Box::new(move |ctx| vec![Some(ctx.grad.map(|g| g * cs))]))
    }

    // ---- shape -------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.record(
            value,
            &[a],
            Box::new(|ctx| vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape().to_vec()).unwrap())]),
        ))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.record(
            value,
            &[a, b],
            Box::new(|ctx| {
                let (x, y, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                let ga = ctx.needs[0].then(|| {
                    let mut d = vec![S::zero(); m * k];
                    gemm(Mat::new(g.data(), m, n), Mat::t(y.data(), n, k), &mut d, false);
                    Tensor::new([m, k], d).unwrap()
                });
                let gb = ctx.needs[1].then(|| {
                    let mut d = vec![S::zero(); k * n];
                    gemm(Mat::t(x.data(), k, m), Mat::new(g.data(), m, n), &mut d, false);
                    Tensor::new([k, n], d).unwrap()
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `x · wᵀ + bias` for `x: N×in`, `w: out×in`, `bias: out`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![S::zero(); n * dout];
        gemm(Mat::new(self.value(x).data(), n, din), Mat::t(self.value(w).data(), din, dout), &mut out, false);
        let value = Tensor::new([n, dout], out)?;
        let y = self.record(
            value,
            &[x, w],
            Box::new(move |ctx| {
                let (xv, wv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let gx = ctx.needs[0].then(|| {
                    let mut d = vec![S::zero(); n * din];
                    gemm(Mat::new(g.data(), n, dout), Mat::new(wv.data(), dout, din), &mut d, false);
                    Tensor::new([n, din], d).unwrap()
                });
                let gw = ctx.needs[1].then(|| {
                    let mut d = vec![S::zero(); dout * din];
                    gemm(Mat::t(g.data(), dout, n), Mat::new(xv.data(), n, din), &mut d, false);
                    Tensor::new([dout, din], d).unwrap()
                });
                vec![gx, gw]
            }),
        );
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(S::cast_from(self.value(a).sum_f64()));
        self.record(
            value,
            &[a],
            Box::new(|ctx| {
                let g = ctx.grad.item();
                vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), g))]
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over every axis after the first two: `B×C×... -> B×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::invalid("global_avg_pool", format!("expected rank >= 3, got shape {shape:?}")));
        }
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let src = self.value(x).data();
        let out: Vec<S> = (0..b * c)
            .map(|i| {
                let s: f64 = src[i * inner..(i + 1) * inner].iter().map(|v| v.as_f64()).sum();
                S::cast_from(s / inner as f64)
            })
            .collect();
        let value = Tensor::new([b, c], out)?;
        Ok(self.record(
            value,
            &[x],
            Box::new(move |ctx| {
                let scale = S::cast_from(1.0 / inner as f64);
                let g = ctx.grad.data();
                let mut d = Vec::with_capacity(b * c * inner);
                for &gi in g {
                    d.extend(std::iter::repeat_n(gi * scale, inner));
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), d).unwrap())]
            }),
        ))
    }

    /// Keeps temporal positions `start..start + len` of a `B×C×T×H×W` tensor.
    pub fn crop_time(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 5 || len == 0 || start + len > shape[2] {
            return Err(Error::invalid(
                "crop_time",
                format!("cannot take frames {start}..{} of shape {shape:?}", start + len),
            ));
        }
        if start == 0 && len == shape[2] {
            return Ok(x);
        }
        let (bc, t, hw) = (shape[0] * shape[1], shape[2], shape[3] * shape[4]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(bc * len * hw);
        for i in 0..bc {
            let base = i * t * hw + start * hw;
            out.extend_from_slice(&src[base..base + len * hw]);
        }
        let mut oshape = shape.clone();
        oshape[2] = len;
        let value = Tensor::new(oshape, out)?;
        Ok(self.record(
            value,
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d = vec![S::zero(); bc * t * hw];
                for i in 0..bc {
                    let base = i * t * hw + start * hw;
                    d[base..base + len * hw].copy_from_slice(&g[i * len * hw..(i + 1) * len * hw]);
                }
                vec![Some(Tensor::new(shape.clone(), d).unwrap())]
            }),
        ))
    }

    // ---- softmax family ----------------------------------------------------

    pub fn softmax(&mut self, z: Var, temperature: f64) -> Result<Var> {
        let value = ops::softmax(self.value(z), temperature)?;
        Ok(self.record(
            value,
            &[z],
            Box::new(move |ctx| {
                // dz = p ⊙ (g − Σ g·p) / τ, per row
                let p = ctx.output;
                let k = *p.shape().last().unwrap();
                let g = ctx.grad.data();
                let mut d = vec![S::zero(); p.len()];
                for (r, row) in p.data().chunks(k).enumerate() {
                    let gr = &g[r * k..(r + 1) * k];
                    let dot: f64 = row.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    for j in 0..k {
                        d[r * k + j] = S::cast_from(row[j].as_f64() * (gr[j].as_f64() - dot) / temperature);
                    }
                }
                vec![Some(Tensor::new(p.shape().to_vec(), d).unwrap())]
            }),
        ))
    }

    pub fn log_softmax(&mut self, z: Var) -> Result<Var> {
        let value = ops::log_softmax(self.value(z))?;
        Ok(self.record(
            value,
            &[z],
            Box::new(|ctx| {
                let lp = ctx.output;
                let k = *lp.shape().last().unwrap();
                let g = ctx.grad.data();
                let mut d = vec![S::zero(); lp.len()];
                for (r, row) in lp.data().chunks(k).enumerate() {
                    let gr = &g[r * k..(r + 1) * k];
                    let gsum: f64 = gr.iter().map(|v| v.as_f64()).sum();
                    for j in 0..k {
                        d[r * k + j] = S::cast_from(gr[j].as_f64() - row[j].as_f64().exp() * gsum);
                    }
                }
                vec![Some(Tensor::new(lp.shape().to_vec(), d).unwrap())]
            }),
        ))
    }

    /// Mean hard-label cross-entropy of `B×K` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} labels for logits of shape {shape:?}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {} classes", shape[1])));
        }
        let (b, k) = (shape[0], shape[1]);
        let lp = ops::log_softmax(self.value(logits))?;
        let loss = -labels.iter().enumerate().map(|(i, &l)| lp.data()[i * k + l].as_f64()).sum::<f64>() / b as f64;
        let labels = labels.to_vec();
        Ok(self.record(
            Tensor::scalar(S::cast_from(loss)),
            &[logits],
            Box::new(move |ctx| {
                let g = ctx.grad.item().as_f64() / b as f64;
                let mut d = lp.to_f64_vec();
                for (i, &l) in labels.iter().enumerate() {
                    for j in 0..k {
                        let p = d[i * k + j].exp();
                        d[i * k + j] = g * (p - if j == l { 1.0 } else { 0.0 });
                    }
                }
                vec![Some(Tensor::from_f64([b, k], &d).unwrap())]
            }),
        ))
    }
}

/// Index mapping for an elementwise binary op where either operand may be a
/// per-channel vector (broadcast along axis 1 of the other operand).
#[derive(Clone)]
struct Broadcast {
    out: Vec<usize>,
    a_vec: bool,
    b_vec: bool,
    channels: usize,
    inner: usize,
}

impl Broadcast {
    fn resolve(a: &[usize], b: &[usize]) -> Result<Self> {
        let plain = |out: &[usize]| Broadcast { out: out.to_vec(), a_vec: false, b_vec: false, channels: 1, inner: 1 };
        if a == b {
            return Ok(plain(a));
        }
        let channel_vec = |full: &[usize], v: &[usize]| full.len() >= 2 && v.len() == 1 && v[0] == full[1];
        let mk = |full: &[usize], a_vec: bool| Broadcast {
            out: full.to_vec(),
            a_vec,
            b_vec: !a_vec,
            channels: full[1],
            inner: full[2..].iter().product(),
        };
        let scalar = |full: &[usize], a_vec: bool| Broadcast {
            out: full.to_vec(),
            a_vec,
            b_vec: !a_vec,
            channels: 1,
            inner: full.iter().product(),
        };
        if b == [1] {
            Ok(scalar(a, false))
        } else if a == [1] {
            Ok(scalar(b, true))
        } else if channel_vec(a, b) {
            Ok(mk(a, false))
        } else if channel_vec(b, a) {
            Ok(mk(b, true))
        } else {
            Err(Error::shape("elementwise", a, b))
        }
    }

    fn numel(&self) -> usize {
        self.out.iter().product()
    }

    fn channel(&self, i: usize) -> usize {
        (i / self.inner) % self.channels
    }

    fn index_a(&self, i: usize) -> usize {
        if self.a_vec {
            self.channel(i)
        } else {
            i
        }
    }

    fn index_b(&self, i: usize) -> usize {
        if self.b_vec {
            self.channel(i)
        } else {
            i
        }
    }

    fn reduce<S: Real>(&self, is_vec: bool, g: &[S], shape: &[usize]) -> Tensor<S> {
        if !is_vec {
            return Tensor::new(shape.to_vec(), g.to_vec()).unwrap();
        }
        let mut acc = vec![0.0f64; self.channels];
        for (i, &v) in g.iter().enumerate() {
            acc[self.channel(i)] += v.as_f64();
        }
        Tensor::from_f64(shape.to_vec(), &acc).unwrap()
    }

    fn reduce_a<S: Real>(&self, g: &[S], shape: &[usize]) -> Tensor<S> {
        self.reduce(self.a_vec, g, shape)
    }

    fn reduce_b<S: Real>(&self, g: &[S], shape: &[usize]) -> Tensor<S> {
        self.reduce(self.b_vec, g, shape)
    }
}
