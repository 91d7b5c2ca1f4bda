//! Reverse-mode automatic differentiation over a linear (Wengert) tape.
//!
//! Every primitive appends one node holding its forward value. Node indices
//! are a topological order by construction, so `backward` walks the node list
//! once from the loss towards the leaves. Nodes whose inputs are all constant
//! do not require a gradient and are skipped entirely during the reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddRowBias(Var, Var),
    Silu(Var),
    SoftmaxRows(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    GatherRows(Var, Vec<Option<usize>>),
    SelectRows(Var, Vec<usize>),
    DepthwiseConv3x3 { x: Var, w: Var, height: usize, width: usize },
    Cosine(Var, Var),
    PickedNll(Var, Vec<(usize, usize)>),
    Bce { pred: Var, target: Vec<f64>, clamp: f64 },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TapeState {
    Recording,
    Consumed,
    Cleared,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    state: TapeState,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            state: TapeState::Recording,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Releases every recorded node. Any later `backward` is an error.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.state = TapeState::Cleared;
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor as a leaf, honouring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Leaf that always participates in differentiation.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).unwrap()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| scale * x + shift).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// Adds a length-`c` bias (shape `[c]` or `[1, c]`) to every row of `x[r×c]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "add_row_bias")?;
        if self.nodes[bias.0].value.len() != c {
            return Err(Error::shape("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let mut out = self.nodes[x.0].value.clone();
        let b = &self.nodes[bias.0].value;
        for row in out.chunks_exact_mut(c) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(vec![r, c], out, Op::AddRowBias(x, bias), rg))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| x * sigmoid(x)).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Silu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "softmax_rows")?;
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![r, c], out, Op::SoftmaxRows(a), rg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| x * x).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), rg))
    }

    /// Row lookup into `table[n×c]`; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, rows: &[Option<usize>]) -> Result<Var> {
        let (n, c) = self.dims2(table, "gather_rows")?;
        let mut out = vec![0.0; rows.len() * c];
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = *r {
                if r >= n {
                    return Err(Error::invalid(format!("gather_rows: row {r} out of range for {n} rows")));
                }
                out[i * c..(i + 1) * c].copy_from_slice(&self.nodes[table.0].value[r * c..(r + 1) * c]);
            }
        }
        let rg = self.rg(table);
        Ok(self.push(vec![rows.len(), c], out, Op::GatherRows(table, rows.to_vec()), rg))
    }

    /// Keeps the listed rows of `x[n×c]`, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::invalid("select_rows: empty row set"));
        }
        let (n, c) = self.dims2(x, "select_rows")?;
        let mut out = vec![0.0; rows.len() * c];
        for (i, &r) in rows.iter().enumerate() {
            if r >= n {
                return Err(Error::invalid(format!("select_rows: row {r} out of range for {n} rows")));
            }
            out[i * c..(i + 1) * c].copy_from_slice(&self.nodes[x.0].value[r * c..(r + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows.len(), c], out, Op::SelectRows(x, rows.to_vec()), rg))
    }

    /// Per-channel 3×3 convolution with zero padding.
    ///
    /// `x` is pixel-major `[height*width, channels]`; `w` is `[9, channels]`
    /// with taps ordered row by row from the top-left neighbour.
    pub fn depthwise_conv3x3(&mut self, x: Var, w: Var, height: usize, width: usize) -> Result<Var> {
        let (p, c) = self.dims2(x, "depthwise_conv3x3")?;
        if p != height * width {
            return Err(Error::shape("depthwise_conv3x3", self.shape(x), &[height, width]));
        }
        if self.shape(w) != [9, c] {
            return Err(Error::shape("depthwise_conv3x3", self.shape(w), &[9, c]));
        }
        let xs = &self.nodes[x.0].value;
        let ws = &self.nodes[w.0].value;
        let mut out = vec![0.0; p * c];
        for_each_tap(height, width, |dst, src, tap| {
            let o = &mut out[dst * c..(dst + 1) * c];
            let xi = &xs[src * c..(src + 1) * c];
            let wt = &ws[tap * c..(tap + 1) * c];
            for ((o, &xv), &wv) in o.iter_mut().zip(xi).zip(wt) {
                *o += wv * xv;
            }
        });
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(vec![p, c], out, Op::DepthwiseConv3x3 { x, w, height, width }, rg))
    }

    /// Cosine similarity of two equally sized tensors (flattened).
    ///
    /// A zero-norm operand yields similarity 0 and no gradient.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].value.len() != self.nodes[b.0].value.len() {
            return Err(Error::shape("cosine", self.shape(a), self.shape(b)));
        }
        let (dot, na, nb) = dot_norms(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let c = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![1], vec![c], Op::Cosine(a, b), rg))
    }

    /// Mean of `-ln p[row, class]` over the picked entries of a probability matrix.
    pub fn picked_nll(&mut self, probs: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.dims2(probs, "picked_nll")?;
        if picks.is_empty() {
            return Err(Error::invalid("picked_nll: no entries"));
        }
        let v = &self.nodes[probs.0].value;
        let mut s = 0.0;
        for &(i, j) in picks {
            if i >= r || j >= c {
                return Err(Error::invalid(format!("picked_nll: entry ({i}, {j}) outside {r}x{c}")));
            }
            s -= v[i * c + j].ln();
        }
        let rg = self.rg(probs);
        Ok(self.push(vec![1], vec![s / picks.len() as f64], Op::PickedNll(probs, picks.to_vec()), rg))
    }

    /// Mean binary cross-entropy of `pred` (clamped to `[clamp, 1-clamp]`) against a constant target.
    pub fn bce(&mut self, pred: Var, target: &Tensor, clamp: f64) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape("bce", self.shape(pred), target.shape()));
        }
        let v = &self.nodes[pred.0].value;
        let mut s = 0.0;
        for (&p, &t) in v.iter().zip(target.data()) {
            let q = p.clamp(clamp, 1.0 - clamp);
            s -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
        }
        let n = v.len() as f64;
        let rg = self.rg(pred);
        Ok(self.push(
            vec![1],
            vec![s / n],
            Op::Bce {
                pred,
                target: target.data().to_vec(),
                clamp,
            },
            rg,
        ))
    }

    /// Populates gradients of `loss` with respect to every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        match self.state {
            TapeState::Cleared => return Err(Error::TapeCleared),
            TapeState::Consumed => return Err(Error::TapeConsumed),
            TapeState::Recording => {}
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.state = TapeState::Consumed;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient accumulated for `v` by the last `backward`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(&self.nodes[v.0].shape, g.clone()).unwrap())
    }

    /// Gradient of `v`, or zeros shaped like `v` if none reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(&self.nodes[v.0].shape))
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&[Node], &mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let mut g = self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n]);
        f(&self.nodes, &mut g);
        self.grads[v.0] = Some(g);
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                self.accumulate(a, |nodes, ga| {
                    // dA = dC · Bᵀ
                    let bv = &nodes[b.0].value;
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            ga[r * k + p] += dot(gr, &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                self.accumulate(b, |nodes, gb| {
                    // dB = Aᵀ · dC
                    let av = &nodes[a.0].value;
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let s = av[r * k + p];
                            if s != 0.0 {
                                axpy(s, gr, &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                self.accumulate(a, |_, ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(a, |_, ga| axpy(1.0, g, ga));
                self.accumulate(b, |_, gb| axpy(1.0, g, gb));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, |_, ga| axpy(1.0, g, ga));
                self.accumulate(b, |_, gb| axpy(-1.0, g, gb));
            }
            Op::Mul(a, b) => {
                self.accumulate(a, |nodes, ga| {
                    for ((o, &gi), &bv) in ga.iter_mut().zip(g).zip(&nodes[b.0].value) {
                        *o += gi * bv;
                    }
                });
                self.accumulate(b, |nodes, gb| {
                    for ((o, &gi), &av) in gb.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        *o += gi * av;
                    }
                });
            }
            Op::Affine(a, s) => self.accumulate(a, |_, ga| axpy(s, g, ga)),
            Op::AddRowBias(x, bias) => {
                self.accumulate(x, |_, gx| axpy(1.0, g, gx));
                self.accumulate(bias, |_, gb| {
                    let c = gb.len();
                    for row in g.chunks_exact(c) {
                        axpy(1.0, row, gb);
                    }
                });
            }
            Op::Silu(a) => self.accumulate(a, |nodes, ga| {
                for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(&nodes[a.0].value) {
                    let s = sigmoid(x);
                    *o += gi * s * (1.0 + x * (1.0 - s));
                }
            }),
            Op::SoftmaxRows(a) => {
                let c = self.nodes[a.0].shape[1];
                let y = std::mem::take(&mut self.nodes[i].value);
                self.accumulate(a, |_, ga| {
                    for ((gr, yr), out) in g.chunks_exact(c).zip(y.chunks_exact(c)).zip(ga.chunks_exact_mut(c)) {
                        let inner = dot(gr, yr);
                        for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - inner);
                        }
                    }
                });
                self.nodes[i].value = y;
            }
            Op::Square(a) => self.accumulate(a, |nodes, ga| {
                for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(&nodes[a.0].value) {
                    *o += 2.0 * x * gi;
                }
            }),
            Op::Sum(a) => self.accumulate(a, |_, ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => self.accumulate(a, |_, ga| {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|o| *o += s);
            }),
            Op::Reshape(a) => self.accumulate(a, |_, ga| axpy(1.0, g, ga)),
            Op::GatherRows(t, rows) => {
                let c = self.nodes[t.0].shape[1];
                self.accumulate(t, |_, gt| {
                    for (k, r) in rows.iter().enumerate() {
                        if let Some(r) = *r {
                            axpy(1.0, &g[k * c..(k + 1) * c], &mut gt[r * c..(r + 1) * c]);
                        }
                    }
                });
            }
            Op::SelectRows(x, rows) => {
                let c = self.nodes[x.0].shape[1];
                self.accumulate(x, |_, gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        axpy(1.0, &g[k * c..(k + 1) * c], &mut gx[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::DepthwiseConv3x3 { x, w, height, width } => {
                let c = self.nodes[x.0].shape[1];
                self.accumulate(x, |nodes, gx| {
                    let ws = &nodes[w.0].value;
                    for_each_tap(height, width, |dst, src, tap| {
                        let gd = &g[dst * c..(dst + 1) * c];
                        let wt = &ws[tap * c..(tap + 1) * c];
                        for ((o, &gv), &wv) in gx[src * c..(src + 1) * c].iter_mut().zip(gd).zip(wt) {
                            *o += gv * wv;
                        }
                    });
                });
                self.accumulate(w, |nodes, gw| {
                    let xs = &nodes[x.0].value;
                    for_each_tap(height, width, |dst, src, tap| {
                        let gd = &g[dst * c..(dst + 1) * c];
                        let xi = &xs[src * c..(src + 1) * c];
                        for ((o, &gv), &xv) in gw[tap * c..(tap + 1) * c].iter_mut().zip(gd).zip(xi) {
                            *o += gv * xv;
                        }
                    });
                });
            }
            Op::Cosine(a, b) => {
                let (dot_ab, na, nb) = dot_norms(&self.nodes[a.0].value, &self.nodes[b.0].value);
                if na == 0.0 || nb == 0.0 {
                    return;
                }
                let cos = dot_ab / (na * nb);
                let gs = g[0];
                // d cos / da = b / (|a||b|) - cos · a / |a|²
                self.accumulate(a, |nodes, ga| {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    for ((o, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                        *o += gs * (y / (na * nb) - cos * x / (na * na));
                    }
                });
                self.accumulate(b, |nodes, gb| {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    for ((o, &y), &x) in gb.iter_mut().zip(bv).zip(av) {
                        *o += gs * (x / (na * nb) - cos * y / (nb * nb));
                    }
                });
            }
            Op::PickedNll(p, picks) => {
                let c = self.nodes[p.0].shape[1];
                let scale = g[0] / picks.len() as f64;
                self.accumulate(p, |nodes, gp| {
                    let pv = &nodes[p.0].value;
                    for &(i, j) in &picks {
                        gp[i * c + j] -= scale / pv[i * c + j];
                    }
                });
            }
            Op::Bce { pred, target, clamp } => {
                let n = target.len() as f64;
                self.accumulate(pred, |nodes, gp| {
                    let pv = &nodes[pred.0].value;
                    for ((o, &p), &t) in gp.iter_mut().zip(pv).zip(&target) {
                        if p > clamp && p < 1.0 - clamp {
                            *o += g[0] * (-t / p + (1.0 - t) / (1.0 - p)) / n;
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-max-stabilised softmax of a slice, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += s * v;
    }
}

fn dot_norms(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    (dot(a, b), dot(a, a).sqrt(), dot(b, b).sqrt())
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s != 0.0 {
                axpy(s, &b[p * n..(p + 1) * n], row);
            }
        }
    }
}

/// Calls `f(dst, src, tap)` for every in-bounds 3×3 neighbour pair.
fn for_each_tap(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize)) {
    for y in 0..height {
        for x in 0..width {
            let dst = y * width + x;
            for dy in 0..3usize {
                let sy = y + dy;
                if sy < 1 || sy > height {
                    continue;
                }
                for dx in 0..3usize {
                    let sx = x + dx;
                    if sx < 1 || sx > width {
                        continue;
                    }
                    f(dst, (sy - 1) * width + (sx - 1), dy * 3 + dx);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::eye(2));
        let b = tape.constant(&Tensor::eye(2));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), Tensor::eye(2).data());
    }

    #[test]
    fn small_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(&t(&[2, 1], &[0.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.data(c), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[2, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0]));
        let s = tape.softmax_rows(a).unwrap();
        let v = tape.data(s);
        for x in &v[..3] {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v[3] - 1.0).abs() < 1e-15);
        assert!(v[4] < 1e-300 && v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_twice_x() {
        let data = [1.0, -2.0, 3.0, 0.5];
        let mut tape = Tape::new();
        let x = tape.param(&t(&[4], &data));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        for (gv, xv) in g.data().iter().zip(data) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(2.0));
        let y = tape.square(x);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_after_clear_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(2.0));
        let y = tape.square(x);
        tape.clear();
        assert!(tape.is_empty());
        assert!(matches!(tape.backward(y), Err(Error::TapeCleared)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::full(&[3], 2.0));
        let c = tape.constant(&Tensor::full(&[3], 5.0));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0; 3]);
    }

    #[test]
    fn cosine_zero_norm_guard() {
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::zeros(&[3]));
        let b = tape.param(&Tensor::full(&[3], 1.0));
        let c = tape.cosine(a, b).unwrap();
        assert_eq!(tape.scalar(c), 0.0);
        tape.backward(c).unwrap();
        assert!(tape.grad(a).is_none());
    }

    #[test]
    fn depthwise_identity_kernel() {
        let mut w = Tensor::zeros(&[9, 2]);
        w.data_mut()[4 * 2] = 1.0;
        w.data_mut()[4 * 2 + 1] = 1.0;
        let x = Tensor::new(&[4, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let wv = tape.constant(&w);
        let y = tape.depthwise_conv3x3(xv, wv, 2, 2).unwrap();
        assert_eq!(tape.data(y), x.data());
    }
}
