use super::conv::ConvGeom;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid {
        x: Var,
        clamp: Option<(f64, f64)>,
    },
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Mix {
        x: Var,
        rows: Vec<Vec<(usize, f64)>>,
    },
    ReduceMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    PairwiseDiff {
        p: Var,
        q: Var,
    },
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    SumLast(Var),
    ScaleRows {
        x: Var,
        s: Var,
    },
    Sum(Var),
    Conv {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    Focal {
        pred: Var,
        target: Tensor,
        alpha: f64,
        beta: f64,
        eps: f64,
    },
    L1At {
        pred: Var,
        entries: Vec<(usize, f64)>,
    },
    Chamfer {
        pred: Var,
        target: Tensor,
        pred_nn: Vec<usize>,
        target_nn: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Ops are appended in evaluation order, so every op's
/// inputs precede it and a single reverse sweep yields all gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Records a value that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Affine map over the last axis: `x·w + b` with `w: K×M`, `b: M`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.rank() != 2 || tw.shape()[0] != tx.cols() {
            return Err(Error::shape(format!(
                "dense: input {:?} vs weight {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let (k, m) = (tw.shape()[0], tw.shape()[1]);
        if let Some(b) = b {
            if self.value(b).len() != m {
                return Err(Error::shape(format!("dense: bias len {} vs {m}", self.value(b).len())));
            }
        }
        let rows = tx.rows();
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            let orow = &mut out[r * m..(r + 1) * m];
            if let Some(b) = b {
                orow.copy_from_slice(self.nodes[b.0].value.data());
            }
            let xr = &tx.data()[r * k..(r + 1) * k];
            for (kk, &a) in xr.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &wv) in orow.iter_mut().zip(&tw.data()[kk * m..(kk + 1) * m]) {
                    *o += a * wv;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        match shape.last_mut() {
            Some(last) => *last = m,
            None => shape.push(m),
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Dense { x, w, b }, rg))
    }

    /// Adds a per-channel bias along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.cols();
        if tb.len() != c {
            return Err(Error::shape(format!("add_bias: {} channels vs bias {}", c, tb.len())));
        }
        let mut t = tx.clone();
        for row in t.data_mut().chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddBias(x, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid { x, clamp: None }, rg)
    }

    /// Sigmoid followed by a clamp to `[lo, hi]`; clamped entries pass no gradient.
    pub fn sigmoid_clamped(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(x).map(|v| sigmoid(v).clamp(lo, hi));
        let rg = self.rg(x);
        self.push(
            t,
            Op::Sigmoid {
                x,
                clamp: Some((lo, hi)),
            },
            rg,
        )
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat of nothing"))?;
        let lead = self.value(*first).shape().split_last().map(|(_, l)| l.to_vec()).unwrap_or_default();
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &x in xs {
            let t = self.value(x);
            let l = t.shape().split_last().map(|(_, l)| l.to_vec()).unwrap_or_default();
            if l != lead {
                return Err(Error::shape(format!(
                    "concat: leading extents {lead:?} vs {l:?}"
                )));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(t, Op::ConcatLast(xs.to_vec()), rg))
    }

    /// Stacks row-matrices (`R_i × C`) into `(ΣR_i) × C`.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat of nothing"))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            if t.cols() != c {
                return Err(Error::shape(format!("concat_rows: {} vs {c} columns", t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows, c], data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(t, Op::ConcatRows(xs.to_vec()), rg))
    }

    /// Row gather: output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            if i >= rows {
                return Err(Error::shape(format!("gather: row {i} out of {rows}")));
            }
            data.extend_from_slice(tx.row(i));
        }
        let t = Tensor::new(vec![index.len(), c], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gather { x, index }, rg))
    }

    /// Weighted row combination: output row `i` is `Σ w · input[j]` over `rows[i]`.
    /// An empty list yields a zero row.
    pub fn mix_rows(&mut self, x: Var, rows: Vec<Vec<(usize, f64)>>) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; rows.len() * c];
        for (i, terms) in rows.iter().enumerate() {
            let dst = &mut data[i * c..(i + 1) * c];
            for &(j, w) in terms {
                if j >= n {
                    return Err(Error::shape(format!("mix_rows: row {j} out of {n}")));
                }
                for (d, s) in dst.iter_mut().zip(tx.row(j)) {
                    *d += w * s;
                }
            }
        }
        let t = Tensor::new(vec![rows.len(), c], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Mix { x, rows }, rg))
    }

    /// Max over one axis. Returns the reduced value and, per output element,
    /// the winning position along `axis`. Ties go to the smallest position.
    pub fn reduce_max(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() {
            return Err(Error::shape(format!("reduce_max: axis {axis} of rank {}", shape.len())));
        }
        let n = shape[axis];
        if n == 0 {
            return Err(Error::Empty("reduce_max over an empty axis".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut values = Vec::with_capacity(outer * inner);
        let mut flat = Vec::with_capacity(outer * inner);
        let mut pos = Vec::with_capacity(outer * inner);
        let d = tx.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let (mut best, mut arg) = (d[base], 0);
                for a in 1..n {
                    let v = d[base + a * inner];
                    if v > best {
                        best = v;
                        arg = a;
                    }
                }
                values.push(best);
                flat.push(base + arg * inner);
                pos.push(arg);
            }
        }
        let mut oshape = shape.to_vec();
        oshape.remove(axis);
        let t = Tensor::new(oshape, values)?;
        let rg = self.rg(x);
        Ok((self.push(t, Op::ReduceMax { x, argmax: flat }, rg), pos))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// All pairwise differences: for `p: N×C`, `q: M×C`, row `j·N + i` is `p_i − q_j`.
    pub fn pairwise_diff(&mut self, p: Var, q: Var) -> Result<Var> {
        let (tp, tq) = (self.value(p), self.value(q));
        if tp.cols() != tq.cols() {
            return Err(Error::shape(format!(
                "pairwise_diff: {} vs {} channels",
                tp.cols(),
                tq.cols()
            )));
        }
        let (n, m, c) = (tp.rows(), tq.rows(), tp.cols());
        let mut data = Vec::with_capacity(n * m * c);
        for j in 0..m {
            let qj = tq.row(j);
            for i in 0..n {
                data.extend(tp.row(i).iter().zip(qj).map(|(a, b)| a - b));
            }
        }
        let t = Tensor::new(vec![m * n, c], data)?;
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(t, Op::PairwiseDiff { p, q }, rg))
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut t = tx.clone();
        let mut norms = Vec::with_capacity(tx.rows());
        for row in t.data_mut().chunks_mut(c.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(t, Op::RowNormalize { x, norms }, rg)
    }

    /// Sums the last axis, keeping it with extent 1.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let data: Vec<f64> = tx.data().chunks(c.max(1)).map(|r| r.iter().sum()).collect();
        let mut shape = tx.shape().to_vec();
        match shape.last_mut() {
            Some(l) => *l = 1,
            None => shape.push(1),
        }
        let t = Tensor::new(shape, data).expect("sum_last shape");
        let rg = self.rg(x);
        self.push(t, Op::SumLast(x), rg)
    }

    /// Multiplies row `r` of `x` by the scalar `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if ts.len() != tx.rows() {
            return Err(Error::shape(format!(
                "scale_rows: {} rows vs {} scales",
                tx.rows(),
                ts.len()
            )));
        }
        let c = tx.cols();
        let mut t = tx.clone();
        for (row, &k) in t.data_mut().chunks_mut(c.max(1)).zip(ts.data()) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::ScaleRows { x, s }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(x);
        self.push(t, Op::Sum(x), rg)
    }

    fn conv(&mut self, x: Var, k: Var, geom: ConvGeom, shape: Vec<usize>) -> Result<Var> {
        let out = geom.forward(self.value(x).data(), self.value(k).data());
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(t, Op::Conv { x, k, geom }, rg))
    }

    /// 3D convolution, zero "same" padding. `x: X×Y×Z×Cin`, `k: kx×ky×kz×Cin×Cout`
    /// with odd kernel extents. Output extents are `ceil(n / stride)`.
    pub fn conv3d(&mut self, x: Var, k: Var, stride: [usize; 3]) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        if tx.rank() != 4 || tk.rank() != 5 {
            return Err(Error::shape(format!(
                "conv3d: input {:?}, kernel {:?}",
                tx.shape(),
                tk.shape()
            )));
        }
        let (s, ks) = (tx.shape(), tk.shape());
        check_conv(s, ks, &stride)?;
        let geom = ConvGeom::same([s[0], s[1], s[2]], [ks[0], ks[1], ks[2]], stride, s[3], ks[4]);
        let shape = vec![geom.output[0], geom.output[1], geom.output[2], ks[4]];
        self.conv(x, k, geom, shape)
    }

    /// 2D convolution, zero "same" padding. `x: X×Y×Cin`, `k: kx×ky×Cin×Cout`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: [usize; 2]) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        if tx.rank() != 3 || tk.rank() != 4 {
            return Err(Error::shape(format!(
                "conv2d: input {:?}, kernel {:?}",
                tx.shape(),
                tk.shape()
            )));
        }
        let (s, ks) = (tx.shape(), tk.shape());
        let s3 = [s[0], s[1], 1, s[2]];
        let k3 = [ks[0], ks[1], 1, ks[2], ks[3]];
        check_conv(&s3, &k3, &[stride[0], stride[1], 1])?;
        let geom = ConvGeom::same([s[0], s[1], 1], [ks[0], ks[1], 1], [stride[0], stride[1], 1], s[2], ks[3]);
        let shape = vec![geom.output[0], geom.output[1], ks[3]];
        self.conv(x, k, geom, shape)
    }

    /// Transposed 2D convolution: input cell `(i, j)` scatters into
    /// `(i·s + a, j·s + b)` for kernel tap `(a, b)`. Output is cropped to `out`.
    pub fn conv_transpose2d(&mut self, x: Var, k: Var, stride: [usize; 2], out: [usize; 2]) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        if tx.rank() != 3 || tk.rank() != 4 || tk.shape()[2] != tx.shape()[2] {
            return Err(Error::shape(format!(
                "conv_transpose2d: input {:?}, kernel {:?}",
                tx.shape(),
                tk.shape()
            )));
        }
        let (s, ks) = (tx.shape(), tk.shape());
        if s[0] == 0 || s[1] == 0 {
            return Err(Error::Empty("conv_transpose2d input".into()));
        }
        let geom = ConvGeom::transposed(
            [s[0], s[1], 1],
            [ks[0], ks[1], 1],
            [stride[0], stride[1], 1],
            s[2],
            ks[3],
            [out[0], out[1], 1],
        );
        self.conv(x, k, geom, vec![out[0], out[1], ks[3]])
    }

    /// Penalty-reduced focal loss summed over all cells. `target == 1` marks
    /// the positive cell; predictions are clamped to `[eps, 1 − eps]`.
    pub fn focal_loss(&mut self, pred: Var, target: &Tensor, alpha: f64, beta: f64, eps: f64) -> Result<Var> {
        let tp = self.value(pred);
        if tp.len() != target.len() {
            return Err(Error::shape(format!(
                "focal_loss: {:?} vs {:?}",
                tp.shape(),
                target.shape()
            )));
        }
        let loss: f64 = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| focal_term(p, t, alpha, beta, eps))
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Focal {
                pred,
                target: target.clone(),
                alpha,
                beta,
                eps,
            },
            rg,
        ))
    }

    /// `Σ |pred[i] − y|` over `(flat index i, y)` entries.
    pub fn l1_at(&mut self, pred: Var, entries: Vec<(usize, f64)>) -> Result<Var> {
        let tp = self.value(pred);
        let mut loss = 0.0;
        for &(i, y) in &entries {
            let p = *tp
                .data()
                .get(i)
                .ok_or_else(|| Error::shape(format!("l1_at: index {i} out of {}", tp.len())))?;
            loss += (p - y).abs();
        }
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(loss), Op::L1At { pred, entries }, rg))
    }

    /// Symmetric Chamfer distance (sum of squared nearest-neighbour distances
    /// in both directions) between `pred: G×3` and a fixed `target: T×3`.
    pub fn chamfer(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let tp = self.value(pred);
        if tp.cols() != 3 || target.cols() != 3 || tp.rows() == 0 || target.rows() == 0 {
            return Err(Error::shape(format!(
                "chamfer: {:?} vs {:?}",
                tp.shape(),
                target.shape()
            )));
        }
        let a = as_points(target);
        let b = as_points(tp);
        let (loss, target_nn, pred_nn) = chamfer_with_matches(&a, &b);
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Chamfer {
                pred,
                target: target.clone(),
                pred_nn,
                target_nn,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Autodiff(format!("node {} is not on this tape", loss.0)))?;
        if node.value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(node.value.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        let shape = self.value(v).shape().to_vec();
        self.acc(grads, v, Tensor::new(shape, data).expect("gradient shape"));
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    self.acc_data(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    self.acc_data(grads, *b, d);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|v| v * s)),
            Op::Dense { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (k, m) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.rows();
                if self.rg(*x) {
                    let mut gx = vec![0.0; rows * k];
                    for r in 0..rows {
                        let gr = &gd[r * m..(r + 1) * m];
                        if gr.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        for kk in 0..k {
                            let wr = &tw.data()[kk * m..(kk + 1) * m];
                            gx[r * k + kk] = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        }
                    }
                    self.acc_data(grads, *x, gx);
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; k * m];
                    for r in 0..rows {
                        let gr = &gd[r * m..(r + 1) * m];
                        let xr = &tx.data()[r * k..(r + 1) * k];
                        for (kk, &a) in xr.iter().enumerate() {
                            if a == 0.0 {
                                continue;
                            }
                            for (d, &gv) in gw[kk * m..(kk + 1) * m].iter_mut().zip(gr) {
                                *d += a * gv;
                            }
                        }
                    }
                    self.acc_data(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![0.0; m];
                        for gr in gd.chunks(m) {
                            for (d, v) in gb.iter_mut().zip(gr) {
                                *d += v;
                            }
                        }
                        self.acc_data(grads, *b, gb);
                    }
                }
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.rg(*b) {
                    let c = self.value(*b).len();
                    let mut gb = vec![0.0; c];
                    for gr in gd.chunks(c) {
                        for (d, v) in gb.iter_mut().zip(gr) {
                            *d += v;
                        }
                    }
                    self.acc_data(grads, *b, gb);
                }
            }
            Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                self.acc_data(grads, *x, d);
            }
            Op::Sigmoid { x, clamp } => {
                let tx = self.value(*x);
                let d = gd
                    .iter()
                    .zip(tx.data())
                    .map(|(g, &xv)| {
                        let s = sigmoid(xv);
                        match clamp {
                            Some((lo, hi)) if s < *lo || s > *hi => 0.0,
                            _ => g * s * (1.0 - s),
                        }
                    })
                    .collect();
                self.acc_data(grads, *x, d);
            }
            Op::ConcatLast(xs) => {
                let total = g.cols();
                let mut off = 0;
                for &x in xs {
                    let c = self.value(x).cols();
                    if self.rg(x) {
                        let d = gd
                            .chunks(total)
                            .flat_map(|r| r[off..off + c].iter().copied())
                            .collect();
                        self.acc_data(grads, x, d);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    if self.rg(x) {
                        self.acc_data(grads, x, gd[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::Gather { x, index } => {
                let c = g.cols();
                let mut d = vec![0.0; self.value(*x).len()];
                for (r, &i) in index.iter().enumerate() {
                    for (dst, v) in d[i * c..(i + 1) * c].iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                        *dst += v;
                    }
                }
                self.acc_data(grads, *x, d);
            }
            Op::Mix { x, rows } => {
                let c = g.cols();
                let mut d = vec![0.0; self.value(*x).len()];
                for (r, terms) in rows.iter().enumerate() {
                    let gr = &gd[r * c..(r + 1) * c];
                    for &(i, w) in terms {
                        for (dst, v) in d[i * c..(i + 1) * c].iter_mut().zip(gr) {
                            *dst += w * v;
                        }
                    }
                }
                self.acc_data(grads, *x, d);
            }
            Op::ReduceMax { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (&i, &v) in argmax.iter().zip(gd) {
                    d[i] += v;
                }
                self.acc_data(grads, *x, d);
            }
            Op::Reshape(x) => self.acc_data(grads, *x, gd.to_vec()),
            Op::PairwiseDiff { p, q } => {
                let (tp, tq) = (self.value(*p), self.value(*q));
                let (n, m, c) = (tp.rows(), tq.rows(), tp.cols());
                let mut dp = vec![0.0; n * c];
                let mut dq = vec![0.0; m * c];
                for j in 0..m {
                    for i in 0..n {
                        let gr = &gd[(j * n + i) * c..(j * n + i + 1) * c];
                        for (ch, &v) in gr.iter().enumerate() {
                            dp[i * c + ch] += v;
                            dq[j * c + ch] -= v;
                        }
                    }
                }
                self.acc_data(grads, *p, dp);
                self.acc_data(grads, *q, dq);
            }
            Op::RowNormalize { x, norms } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let y = node.value.data();
                let mut d = vec![0.0; tx.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let raw: f64 = tx.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gr = &gd[r * c..(r + 1) * c];
                    let yr = &y[r * c..(r + 1) * c];
                    if raw == n && raw > 0.0 {
                        // d(x/‖x‖) = (g − y·(g·y)) / ‖x‖
                        let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ch in 0..c {
                            d[r * c + ch] = (gr[ch] - yr[ch] * gy) / n;
                        }
                    } else {
                        for ch in 0..c {
                            d[r * c + ch] = gr[ch] / n;
                        }
                    }
                }
                self.acc_data(grads, *x, d);
            }
            Op::SumLast(x) => {
                let c = self.value(*x).cols();
                let d = gd.iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect();
                self.acc_data(grads, *x, d);
            }
            Op::ScaleRows { x, s } => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let c = tx.cols();
                if self.rg(*x) {
                    let d = gd
                        .chunks(c)
                        .zip(ts.data())
                        .flat_map(|(gr, &k)| gr.iter().map(move |v| v * k))
                        .collect();
                    self.acc_data(grads, *x, d);
                }
                if self.rg(*s) {
                    let d = gd
                        .chunks(c)
                        .zip(tx.data().chunks(c))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    self.acc_data(grads, *s, d);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc_data(grads, *x, vec![gd[0]; n]);
            }
            Op::Conv { x, k, geom } => {
                let (gin, gk) = geom.backward(
                    self.value(*x).data(),
                    self.value(*k).data(),
                    gd,
                    self.rg(*x),
                    self.rg(*k),
                );
                if let Some(gin) = gin {
                    self.acc_data(grads, *x, gin);
                }
                if let Some(gk) = gk {
                    self.acc_data(grads, *k, gk);
                }
            }
            Op::Focal {
                pred,
                target,
                alpha,
                beta,
                eps,
            } => {
                let tp = self.value(*pred);
                let d = tp
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| gd[0] * focal_grad(p, t, *alpha, *beta, *eps))
                    .collect();
                self.acc_data(grads, *pred, d);
            }
            Op::L1At { pred, entries } => {
                let tp = self.value(*pred);
                let mut d = vec![0.0; tp.len()];
                for &(i, y) in entries {
                    let diff = tp.data()[i] - y;
                    d[i] += gd[0] * if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
                }
                self.acc_data(grads, *pred, d);
            }
            Op::Chamfer {
                pred,
                target,
                pred_nn,
                target_nn,
            } => {
                let tp = self.value(*pred);
                let mut d = vec![0.0; tp.len()];
                // pred → nearest target
                for (j, &i) in pred_nn.iter().enumerate() {
                    for a in 0..3 {
                        d[j * 3 + a] += 2.0 * (tp.data()[j * 3 + a] - target.data()[i * 3 + a]);
                    }
                }
                // target → nearest pred
                for (i, &j) in target_nn.iter().enumerate() {
                    for a in 0..3 {
                        d[j * 3 + a] += 2.0 * (tp.data()[j * 3 + a] - target.data()[i * 3 + a]);
                    }
                }
                d.iter_mut().for_each(|v| *v *= gd[0]);
                self.acc_data(grads, *pred, d);
            }
        }
    }
}

fn check_conv(s: &[usize], ks: &[usize], stride: &[usize; 3]) -> Result<()> {
    if s[..3].iter().any(|&n| n == 0) {
        return Err(Error::Empty(format!("convolution input {s:?}")));
    }
    if ks[3] != s[3] {
        return Err(Error::shape(format!(
            "convolution channels: input has {}, kernel expects {}",
            s[3], ks[3]
        )));
    }
    if ks[..3].iter().any(|k| k % 2 == 0) {
        return Err(Error::shape(format!("same-padded kernel extents must be odd, got {:?}", &ks[..3])));
    }
    if stride.iter().any(|&s| s == 0) {
        return Err(Error::invalid("zero convolution stride"));
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn focal_term(p: f64, t: f64, alpha: f64, beta: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    if t == 1.0 {
        -(1.0 - p).powf(alpha) * p.ln()
    } else {
        -(1.0 - t).powf(beta) * p.powf(alpha) * (1.0 - p).ln()
    }
}

fn focal_grad(p: f64, t: f64, alpha: f64, beta: f64, eps: f64) -> f64 {
    if p < eps || p > 1.0 - eps {
        return 0.0;
    }
    if t == 1.0 {
        alpha * (1.0 - p).powf(alpha - 1.0) * p.ln() - (1.0 - p).powf(alpha) / p
    } else {
        -(1.0 - t).powf(beta) * (alpha * p.powf(alpha - 1.0) * (1.0 - p).ln() - p.powf(alpha) / (1.0 - p))
    }
}

fn as_points(t: &Tensor) -> Vec<[f64; 3]> {
    t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

fn nearest(p: &[f64; 3], set: &[[f64; 3]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, q) in set.iter().enumerate() {
        let d = sq_dist(p, q);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Returns `(loss, nearest-in-b for each a, nearest-in-a for each b)`.
fn chamfer_with_matches(a: &[[f64; 3]], b: &[[f64; 3]]) -> (f64, Vec<usize>, Vec<usize>) {
    let mut a_to_b = 0.0;
    let mut a_nn = Vec::with_capacity(a.len());
    for p in a {
        let (j, d) = nearest(p, b);
        a_to_b += d;
        a_nn.push(j);
    }
    let mut b_to_a = 0.0;
    let mut b_nn = Vec::with_capacity(b.len());
    for q in b {
        let (i, d) = nearest(q, a);
        b_to_a += d;
        b_nn.push(i);
    }
    (a_to_b + b_to_a, a_nn, b_nn)
}

/// Symmetric Chamfer distance between two point sets.
pub fn chamfer_distance(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    chamfer_with_matches(a, b).0
}
