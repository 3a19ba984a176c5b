//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order; [`GradTape::backward`] visits it once in reverse.

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm_nt, gemm_tn, sigmoid, Tensor};
use crate::scalar::Scalar;
use crate::ssm::kernel::{scan_backward, scan_forward, ScanCache, ScanDims};

/// Handle to a node on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weighted row selection: output row `k` is `Σ w · input[src]` over `rows[k]`.
pub type RowMix<S> = Vec<Vec<(usize, S)>>;

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Softplus(Var),
    NegExp(Var),
    Scan {
        x: Var,
        delta: Var,
        b: Var,
        c: Var,
        a: Var,
        reverse: bool,
        cache: Box<ScanCache<S>>,
    },
    MixRows(Var, RowMix<S>),
    InsertRow {
        src: Var,
        row: Var,
        at: usize,
    },
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<S>,
    },
    MeanRows(Var),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

#[derive(Debug)]
pub struct GradTape<S> {
    nodes: Vec<Node<S>>,
    recording: bool,
}

impl<S: Scalar> Default for GradTape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> GradTape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that keeps values but no adjoint caches; `backward` errors.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).softplus();
        self.push(out, Op::Softplus(a))
    }

    /// Elementwise `−exp(x)`; maps `a_log` to the continuous `A`.
    pub fn neg_exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| -v.exp());
        self.push(out, Op::NegExp(a))
    }

    /// `x · W (+ b)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Fused selective scan; see [`crate::ssm::kernel::scan_forward`].
    pub fn scan(&mut self, x: Var, delta: Var, b: Var, c: Var, a: Var, reverse: bool) -> Result<Var> {
        let (xv, dv, bv, cv, av) = (
            self.value(x),
            self.value(delta),
            self.value(b),
            self.value(c),
            self.value(a),
        );
        let dims = ScanDims {
            tokens: xv.rows(),
            inner: xv.cols(),
            state: av.cols(),
        };
        if dv.shape() != xv.shape()
            || bv.shape() != [dims.tokens, dims.state]
            || cv.shape() != [dims.tokens, dims.state]
            || av.shape() != [dims.inner, dims.state]
        {
            return Err(Error::shape(
                "scan",
                format!(
                    "x {:?}, delta {:?}, B {:?}, C {:?}, A {:?}",
                    xv.shape(),
                    dv.shape(),
                    bv.shape(),
                    cv.shape(),
                    av.shape()
                ),
            ));
        }
        for (t, what) in [(xv, "scan input"), (dv, "delta"), (bv, "B projection"), (cv, "C projection")] {
            if !t.is_finite() {
                return Err(Error::NonFinite(what));
            }
        }
        let (y, cache) = scan_forward(
            xv.data(),
            dv.data(),
            bv.data(),
            cv.data(),
            av.data(),
            dims,
            reverse,
            self.recording,
        );
        let out = Tensor::from_vec(&[dims.tokens, dims.inner], y)?;
        Ok(self.push(
            out,
            Op::Scan {
                x,
                delta,
                b,
                c,
                a,
                reverse,
                cache: Box::new(cache.unwrap_or_default()),
            },
        ))
    }

    pub fn mix_rows(&mut self, src: Var, rows: RowMix<S>) -> Result<Var> {
        let sv = self.value(src);
        let (n, c) = (sv.rows(), sv.cols());
        if rows.is_empty() {
            return Err(Error::shape("mix_rows", "no output rows"));
        }
        let mut data = vec![S::zero(); rows.len() * c];
        for (k, mix) in rows.iter().enumerate() {
            let out = &mut data[k * c..(k + 1) * c];
            for &(i, w) in mix {
                if i >= n {
                    return Err(Error::shape("mix_rows", format!("row {i} of {n}")));
                }
                for (o, &v) in out.iter_mut().zip(sv.row(i)) {
                    *o += w * v;
                }
            }
        }
        let out = Tensor::from_vec(&[rows.len(), c], data)?;
        Ok(self.push(out, Op::MixRows(src, rows)))
    }

    /// Inserts a single row (`1×c` or `c`) before row `at`.
    pub fn insert_row(&mut self, src: Var, row: Var, at: usize) -> Result<Var> {
        let (sv, rv) = (self.value(src), self.value(row));
        let (n, c) = (sv.rows(), sv.cols());
        if rv.len() != c || at > n {
            return Err(Error::shape(
                "insert_row",
                format!("row of {} into {n}×{c} at {at}", rv.len()),
            ));
        }
        let mut data = Vec::with_capacity((n + 1) * c);
        data.extend_from_slice(&sv.data()[..at * c]);
        data.extend_from_slice(rv.data());
        data.extend_from_slice(&sv.data()[at * c..]);
        let out = Tensor::from_vec(&[n + 1, c], data)?;
        Ok(self.push(out, Op::InsertRow { src, row, at }))
    }

    /// Row-wise `x / rms(x) · w` with `rms(x) = √(mean(x²) + ε)`.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: S) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weight));
        let c = xv.cols();
        if wv.len() != c {
            return Err(Error::shape(
                "rms_norm",
                format!("{} weights for {c} columns", wv.len()),
            ));
        }
        let inv_c = S::one() / S::of(c as f64);
        let mut inv_rms = Vec::with_capacity(xv.rows());
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(c) {
            let ms = row.iter().map(|&v| v * v).sum::<S>() * inv_c;
            let r = S::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            data.extend(row.iter().zip(wv.data()).map(|(&v, &w)| v * r * w));
        }
        let out = Tensor::from_vec(xv.shape(), data)?;
        Ok(self.push(out, Op::RmsNorm { x, weight, inv_rms }))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, c) = (av.rows(), av.cols());
        let mut data = vec![S::zero(); c];
        for i in 0..n {
            for (o, &v) in data.iter_mut().zip(av.row(i)) {
                *o += v;
            }
        }
        let inv = S::one() / S::of(n as f64);
        data.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::from_vec(&[1, c], data).expect("nonempty");
        self.push(out, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Softmax cross-entropy of a single logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits).data();
        if label >= lv.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("label {label} for {} classes", lv.len()),
            ));
        }
        let max = lv.iter().copied().fold(S::neg_infinity(), S::max);
        let exps: Vec<S> = lv.iter().map(|&v| (v - max).exp()).collect();
        let z: S = exps.iter().copied().sum();
        let probs: Vec<S> = exps.iter().map(|&e| e / z).collect();
        let loss = z.ln() + max - lv[label];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    /// Adjoints of `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if !self.recording {
            return Err(Error::Config("backward on an inference tape".into()));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::from_vec(lv.shape(), vec![S::one()])?);

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let ga = accumulate(&mut adj, *a, av.shape());
                    gemm_nt(g.data(), bv.data(), ga, m, n, k);
                    let gb = accumulate(&mut adj, *b, bv.shape());
                    gemm_tn(av.data(), g.data(), gb, k, m, n);
                }
                Op::Add(a, b) => {
                    add_into(accumulate(&mut adj, *a, g.shape()), g.data());
                    add_into(accumulate(&mut adj, *b, g.shape()), g.data());
                }
                Op::AddRow(a, bias) => {
                    add_into(accumulate(&mut adj, *a, g.shape()), g.data());
                    let bshape = self.value(*bias).shape().to_vec();
                    let gb = accumulate(&mut adj, *bias, &bshape);
                    for row in g.data().chunks_exact(g.cols()) {
                        add_into(gb, row);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = accumulate(&mut adj, *a, av.shape());
                    for ((o, &gv), &bx) in ga.iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gv * bx;
                    }
                    let gb = accumulate(&mut adj, *b, bv.shape());
                    for ((o, &gv), &ax) in gb.iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gv * ax;
                    }
                }
                Op::Scale(a, s) => {
                    let ga = accumulate(&mut adj, *a, g.shape());
                    for (o, &gv) in ga.iter_mut().zip(g.data()) {
                        *o += gv * *s;
                    }
                }
                Op::Softplus(a) => {
                    let av = self.value(*a);
                    let ga = accumulate(&mut adj, *a, av.shape());
                    for ((o, &gv), &x) in ga.iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gv * sigmoid(x);
                    }
                }
                Op::NegExp(a) => {
                    let ga = accumulate(&mut adj, *a, g.shape());
                    for ((o, &gv), &y) in ga.iter_mut().zip(g.data()).zip(node.value.data()) {
                        *o += gv * y;
                    }
                }
                Op::Scan {
                    x,
                    delta,
                    b,
                    c,
                    a,
                    reverse,
                    cache,
                } => {
                    let (xv, dv, bv, cv, av) = (
                        self.value(*x),
                        self.value(*delta),
                        self.value(*b),
                        self.value(*c),
                        self.value(*a),
                    );
                    let dims = ScanDims {
                        tokens: xv.rows(),
                        inner: xv.cols(),
                        state: av.cols(),
                    };
                    let sg = scan_backward(
                        xv.data(),
                        dv.data(),
                        bv.data(),
                        cv.data(),
                        av.data(),
                        dims,
                        *reverse,
                        cache,
                        g.data(),
                    );
                    let shapes = [
                        (xv.shape().to_vec(), *x, sg.x),
                        (dv.shape().to_vec(), *delta, sg.delta),
                        (bv.shape().to_vec(), *b, sg.b),
                        (cv.shape().to_vec(), *c, sg.c),
                        (av.shape().to_vec(), *a, sg.a),
                    ];
                    for (shape, var, grad) in shapes {
                        add_into(accumulate(&mut adj, var, &shape), &grad);
                    }
                }
                Op::MixRows(src, rows) => {
                    let sshape = self.value(*src).shape().to_vec();
                    let c = g.cols();
                    let gs = accumulate(&mut adj, *src, &sshape);
                    for (k, mix) in rows.iter().enumerate() {
                        let grow = &g.data()[k * c..(k + 1) * c];
                        for &(i, w) in mix {
                            for (o, &gv) in gs[i * c..(i + 1) * c].iter_mut().zip(grow) {
                                *o += w * gv;
                            }
                        }
                    }
                }
                Op::InsertRow { src, row, at } => {
                    let c = g.cols();
                    let sshape = self.value(*src).shape().to_vec();
                    let rshape = self.value(*row).shape().to_vec();
                    let gs = accumulate(&mut adj, *src, &sshape);
                    add_into(&mut gs[..at * c], &g.data()[..at * c]);
                    add_into(&mut gs[at * c..], &g.data()[(at + 1) * c..]);
                    let gr = accumulate(&mut adj, *row, &rshape);
                    add_into(gr, &g.data()[at * c..(at + 1) * c]);
                }
                Op::RmsNorm { x, weight, inv_rms } => {
                    let (xv, wv) = (self.value(*x), self.value(*weight));
                    let c = xv.cols();
                    let inv_c = S::one() / S::of(c as f64);
                    let wshape = wv.shape().to_vec();
                    let mut gw = vec![S::zero(); c];
                    let gx = accumulate(&mut adj, *x, xv.shape());
                    for (((xr, gr), gxr), &r) in xv
                        .data()
                        .chunks_exact(c)
                        .zip(g.data().chunks_exact(c))
                        .zip(gx.chunks_exact_mut(c))
                        .zip(inv_rms)
                    {
                        // with u = x·r and gu = g·w: gx = r·(gu − u·mean(gu·u))
                        let mut dot = S::zero();
                        for (((&xi, &gi), &wi), gwi) in xr.iter().zip(gr).zip(wv.data()).zip(gw.iter_mut()) {
                            let u = xi * r;
                            *gwi += gi * u;
                            dot += gi * wi * u;
                        }
                        let m = dot * inv_c;
                        for (((o, &xi), &gi), &wi) in gxr.iter_mut().zip(xr).zip(gr).zip(wv.data()) {
                            *o += r * (gi * wi - xi * r * m);
                        }
                    }
                    add_into(accumulate(&mut adj, *weight, &wshape), &gw);
                }
                Op::MeanRows(a) => {
                    let ashape = self.value(*a).shape().to_vec();
                    let n = ashape[0];
                    let inv = S::one() / S::of(n as f64);
                    let ga = accumulate(&mut adj, *a, &ashape);
                    let c = g.len();
                    for i in 0..n {
                        for (o, &gv) in ga[i * c..(i + 1) * c].iter_mut().zip(g.data()) {
                            *o += gv * inv;
                        }
                    }
                }
                Op::SumAll(a) => {
                    let ashape = self.value(*a).shape().to_vec();
                    let s = g.data()[0];
                    accumulate(&mut adj, *a, &ashape)
                        .iter_mut()
                        .for_each(|o| *o += s);
                }
                Op::CrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let lshape = self.value(*logits).shape().to_vec();
                    let s = g.data()[0];
                    let gl = accumulate(&mut adj, *logits, &lshape);
                    for (j, (o, &p)) in gl.iter_mut().zip(probs).enumerate() {
                        let target = if j == *label { S::one() } else { S::zero() };
                        *o += s * (p - target);
                    }
                }
            }
            adj[id] = Some(g);
        }
        Ok(Gradients { adj })
    }
}

fn accumulate<'a, S: Scalar>(
    adj: &'a mut [Option<Tensor<S>>],
    v: Var,
    shape: &[usize],
) -> &'a mut [S] {
    adj[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Per-node adjoints produced by [`GradTape::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    adj: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Adjoint of `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.adj.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, zero-filled with `like`'s shape when unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<S>) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
