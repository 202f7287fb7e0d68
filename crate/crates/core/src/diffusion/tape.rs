//! Reverse-mode autodiff over dense 2D arrays, generic over f32/f64.
//!
//! Nodes are pushed in topological order; `backward` walks them in reverse.
//! Gradient work is skipped for subgraphs that no trainable leaf feeds,
//! which is what makes frozen-backbone training cheap. The fused attention
//! op recomputes its softmax in the backward pass instead of storing the
//! N x N probability matrices.

use ndarray::{Array2, NdFloat};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

/// Sentinel gather index that reads an implicit zero (used for causal
/// left-padding).
pub const GATHER_ZERO: u32 = u32::MAX;

pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// [N, D] + [1, D]
    AddRow(usize, usize),
    /// [N, D] * [1, D]
    MulRow(usize, usize),
    MatMul(usize, usize),
    /// a * b^T
    MatMulNT(usize, usize),
    Scale(usize, T),
    Silu(usize),
    RmsNorm { x: usize, eps: T },
    LayerNorm { x: usize, eps: T },
    Gather { x: usize, idx: Rc<Vec<u32>> },
    Rope { x: usize, cos: Rc<Array2<T>>, sin: Rc<Array2<T>> },
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<Array2<T>> },
    Mean(usize),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: NdFloat> Gradients<T> {
    pub fn get(&self, id: VarId) -> Option<&Array2<T>> {
        self.grads[id.0].as_ref()
    }
}

fn sigmoid<T: NdFloat>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: NdFloat> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Array2<T> {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> VarId {
        self.nodes.push(Node { value, op, needs_grad });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<T>, requires_grad: bool) -> VarId {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, Op::Add(a.0, b.0), needs)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, Op::Sub(a.0, b.0), needs)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, Op::Mul(a.0, b.0), needs)
    }

    pub fn add_row(&mut self, a: VarId, row: VarId) -> VarId {
        let (_, d) = self.value(a).dim();
        debug_assert_eq!(self.value(row).dim(), (1, d));
        let mut value = self.nodes[a.0].value.clone();
        let r = self.nodes[row.0].value.as_slice().unwrap();
        for chunk in value.as_slice_mut().unwrap().chunks_mut(d) {
            for (v, &b) in chunk.iter_mut().zip(r) {
                *v = *v + b;
            }
        }
        let needs = self.needs(&[a.0, row.0]);
        self.push(value, Op::AddRow(a.0, row.0), needs)
    }

    pub fn mul_row(&mut self, a: VarId, row: VarId) -> VarId {
        let (_, d) = self.value(a).dim();
        debug_assert_eq!(self.value(row).dim(), (1, d));
        let mut value = self.nodes[a.0].value.clone();
        let r = self.nodes[row.0].value.as_slice().unwrap();
        for chunk in value.as_slice_mut().unwrap().chunks_mut(d) {
            for (v, &b) in chunk.iter_mut().zip(r) {
                *v = *v * b;
            }
        }
        let needs = self.needs(&[a.0, row.0]);
        self.push(value, Op::MulRow(a.0, row.0), needs)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        debug_assert_eq!(self.value(a).ncols(), self.value(b).nrows());
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, Op::MatMul(a.0, b.0), needs)
    }

    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        debug_assert_eq!(self.value(a).ncols(), self.value(b).ncols());
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, Op::MatMulNT(a.0, b.0), needs)
    }

    pub fn scale(&mut self, a: VarId, c: T) -> VarId {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        let needs = self.needs(&[a.0]);
        self.push(value, Op::Scale(a.0, c), needs)
    }

    pub fn silu(&mut self, a: VarId) -> VarId {
        let value = self.nodes[a.0].value.mapv(|v| v * sigmoid(v));
        let needs = self.needs(&[a.0]);
        self.push(value, Op::Silu(a.0), needs)
    }

    /// Row-wise x / sqrt(mean(x^2) + eps).
    pub fn rms_norm(&mut self, a: VarId, eps: T) -> VarId {
        let (_, d) = self.value(a).dim();
        let dt = T::from(d).unwrap();
        let mut value = self.nodes[a.0].value.clone();
        for row in value.as_slice_mut().unwrap().chunks_mut(d) {
            let mut ms = T::zero();
            for &v in row.iter() {
                ms = ms + v * v;
            }
            let r = T::one() / (ms / dt + eps).sqrt();
            for v in row.iter_mut() {
                *v = *v * r;
            }
        }
        let needs = self.needs(&[a.0]);
        self.push(value, Op::RmsNorm { x: a.0, eps }, needs)
    }

    /// Row-wise (x - mean) / sqrt(var + eps), no affine part.
    pub fn layer_norm(&mut self, a: VarId, eps: T) -> VarId {
        let (_, d) = self.value(a).dim();
        let dt = T::from(d).unwrap();
        let mut value = self.nodes[a.0].value.clone();
        for row in value.as_slice_mut().unwrap().chunks_mut(d) {
            let mut mean = T::zero();
            for &v in row.iter() {
                mean = mean + v;
            }
            mean = mean / dt;
            let mut var = T::zero();
            for &v in row.iter() {
                let c = v - mean;
                var = var + c * c;
            }
            let r = T::one() / (var / dt + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
        }
        let needs = self.needs(&[a.0]);
        self.push(value, Op::LayerNorm { x: a.0, eps }, needs)
    }

    /// Flat-index gather into a [rows, cols] output; `GATHER_ZERO` entries
    /// read zero. Backward scatter-adds.
    pub fn gather(&mut self, a: VarId, idx: Rc<Vec<u32>>, rows: usize, cols: usize) -> VarId {
        debug_assert_eq!(idx.len(), rows * cols);
        let src = &self.nodes[a.0].value;
        let flat = src.as_slice().expect("gather source must be contiguous");
        let mut out = Vec::with_capacity(rows * cols);
        for &i in idx.iter() {
            out.push(if i == GATHER_ZERO { T::zero() } else { flat[i as usize] });
        }
        let value = Array2::from_shape_vec((rows, cols), out).unwrap();
        let needs = self.needs(&[a.0]);
        self.push(value, Op::Gather { x: a.0, idx }, needs)
    }

    /// Pairwise rotation y = x .* cos + rot(x) .* sin with
    /// rot(x0, x1) = (-x1, x0) over even/odd column pairs. The tables must
    /// match x's shape.
    pub fn rope(&mut self, a: VarId, cos: Rc<Array2<T>>, sin: Rc<Array2<T>>) -> VarId {
        let x = &self.nodes[a.0].value;
        let (n, d) = x.dim();
        debug_assert_eq!(cos.dim(), (n, d));
        debug_assert_eq!(d % 2, 0);
        let mut value = Array2::zeros((n, d));
        {
            let out = value.as_slice_mut().unwrap();
            let xs = x.as_slice().unwrap();
            let cs = cos.as_slice().unwrap();
            let ss = sin.as_slice().unwrap();
            for idx in (0..n * d).step_by(2) {
                let (x0, x1) = (xs[idx], xs[idx + 1]);
                out[idx] = x0 * cs[idx] - x1 * ss[idx];
                out[idx + 1] = x1 * cs[idx + 1] + x0 * ss[idx + 1];
            }
        }
        let needs = self.needs(&[a.0]);
        self.push(value, Op::Rope { x: a.0, cos, sin }, needs)
    }

    /// Fused multi-head attention: q [Nq, D], k/v [Nk, D], softmax over keys
    /// per head with 1/sqrt(head_dim) scaling. The per-head probability
    /// matrices are kept on the op for the backward pass.
    pub fn attention(&mut self, q: VarId, k: VarId, v: VarId, heads: usize) -> VarId {
        let (nq, d) = self.value(q).dim();
        let (nk, dk) = self.value(k).dim();
        debug_assert_eq!(d, dk);
        debug_assert_eq!(self.value(v).dim(), (nk, d));
        debug_assert_eq!(d % heads, 0);
        let hd = d / heads;
        let scale = T::one() / T::from(hd).unwrap().sqrt();
        let mut value = Array2::zeros((nq, d));
        let mut all_probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let qh = self.nodes[q.0].value.slice(ndarray::s![.., cols.clone()]).to_owned();
            let kh = self.nodes[k.0].value.slice(ndarray::s![.., cols.clone()]).to_owned();
            let vh = self.nodes[v.0].value.slice(ndarray::s![.., cols.clone()]).to_owned();
            let mut probs = qh.dot(&kh.t());
            probs.mapv_inplace(|x| x * scale);
            softmax_rows_inplace(&mut probs);
            let oh = probs.dot(&vh);
            value.slice_mut(ndarray::s![.., cols]).assign(&oh);
            all_probs.push(probs);
        }
        let needs = self.needs(&[q.0, k.0, v.0]);
        self.push(value, Op::Attention { q: q.0, k: k.0, v: v.0, heads, probs: all_probs }, needs)
    }

    /// Mean over all elements, as a [1, 1] node.
    pub fn mean(&mut self, a: VarId) -> VarId {
        let x = &self.nodes[a.0].value;
        let n = T::from(x.len()).unwrap();
        let value = Array2::from_elem((1, 1), x.sum() / n);
        let needs = self.needs(&[a.0]);
        self.push(value, Op::Mean(a.0), needs)
    }

    /// Convenience: x * (1 + scale_row) + shift_row.
    pub fn modulate(&mut self, x: VarId, shift: VarId, scale: VarId) -> VarId {
        let scaled = self.mul_row(x, scale);
        let summed = self.add(x, scaled);
        self.add_row(summed, shift)
    }

    pub fn backward(&mut self, loss: VarId) -> Gradients<T> {
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones(self.nodes[loss.0].value.dim()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            // Leaves keep their gradient for the caller.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Array2<T>>], idx: usize, delta: Array2<T>) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut grads[idx] {
            Some(g) => *g = &*g + &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, g * &self.nodes[*b].value);
                self.acc(grads, *b, g * &self.nodes[*a].value);
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.nodes[*row].needs_grad {
                    let (_, d) = g.dim();
                    let mut dr = Array2::zeros((1, d));
                    {
                        let drs = dr.as_slice_mut().unwrap();
                        for chunk in g.as_slice().unwrap().chunks(d) {
                            for (acc, &v) in drs.iter_mut().zip(chunk) {
                                *acc = *acc + v;
                            }
                        }
                    }
                    self.acc(grads, *row, dr);
                }
            }
            Op::MulRow(a, row) => {
                let (_, d) = g.dim();
                if self.nodes[*a].needs_grad {
                    let mut da = g.clone();
                    let r = self.nodes[*row].value.as_slice().unwrap();
                    for chunk in da.as_slice_mut().unwrap().chunks_mut(d) {
                        for (v, &b) in chunk.iter_mut().zip(r) {
                            *v = *v * b;
                        }
                    }
                    self.acc(grads, *a, da);
                }
                if self.nodes[*row].needs_grad {
                    let mut dr = Array2::zeros((1, d));
                    {
                        let drs = dr.as_slice_mut().unwrap();
                        let avs = self.nodes[*a].value.as_slice().unwrap();
                        for (gchunk, achunk) in
                            g.as_slice().unwrap().chunks(d).zip(avs.chunks(d))
                        {
                            for ((acc, &gv), &av) in drs.iter_mut().zip(gchunk).zip(achunk) {
                                *acc = *acc + gv * av;
                            }
                        }
                    }
                    self.acc(grads, *row, dr);
                }
            }
            Op::MatMul(a, b) => {
                if self.nodes[*a].needs_grad {
                    self.acc(grads, *a, g.dot(&self.nodes[*b].value.t()));
                }
                if self.nodes[*b].needs_grad {
                    self.acc(grads, *b, self.nodes[*a].value.t().dot(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.nodes[*a].needs_grad {
                    self.acc(grads, *a, g.dot(&self.nodes[*b].value));
                }
                if self.nodes[*b].needs_grad {
                    self.acc(grads, *b, g.t().dot(&self.nodes[*a].value));
                }
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, g.mapv(|v| v * *c));
            }
            Op::Silu(a) => {
                let x = &self.nodes[*a].value;
                let mut dx = g.clone();
                dx.zip_mut_with(x, |gv, &xv| {
                    let s = sigmoid(xv);
                    *gv = *gv * (s * (T::one() + xv * (T::one() - s)));
                });
                self.acc(grads, *a, dx);
            }
            Op::RmsNorm { x, eps } => {
                let xv = &self.nodes[*x].value;
                let (n, d) = xv.dim();
                let dt = T::from(d).unwrap();
                let mut dx = Array2::zeros((n, d));
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    let xs = xv.as_slice().unwrap();
                    let gs = g.as_slice().unwrap();
                    for row in 0..n {
                        let lo = row * d;
                        let mut ms = T::zero();
                        let mut gx = T::zero();
                        for j in lo..lo + d {
                            ms = ms + xs[j] * xs[j];
                            gx = gx + gs[j] * xs[j];
                        }
                        let r = T::one() / (ms / dt + *eps).sqrt();
                        let scale = r * r * r * gx / dt;
                        for j in lo..lo + d {
                            dxs[j] = r * gs[j] - scale * xs[j];
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::LayerNorm { x, eps } => {
                let xv = &self.nodes[*x].value;
                let (n, d) = xv.dim();
                let dt = T::from(d).unwrap();
                let mut dx = Array2::zeros((n, d));
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    let xs = xv.as_slice().unwrap();
                    let gs = g.as_slice().unwrap();
                    for row in 0..n {
                        let lo = row * d;
                        let mut mean = T::zero();
                        for j in lo..lo + d {
                            mean = mean + xs[j];
                        }
                        mean = mean / dt;
                        let mut var = T::zero();
                        for j in lo..lo + d {
                            let c = xs[j] - mean;
                            var = var + c * c;
                        }
                        let r = T::one() / (var / dt + *eps).sqrt();
                        let mut gmean = T::zero();
                        let mut gxhat = T::zero();
                        for j in lo..lo + d {
                            let xhat = (xs[j] - mean) * r;
                            gmean = gmean + gs[j];
                            gxhat = gxhat + gs[j] * xhat;
                        }
                        gmean = gmean / dt;
                        gxhat = gxhat / dt;
                        for j in lo..lo + d {
                            let xhat = (xs[j] - mean) * r;
                            dxs[j] = r * (gs[j] - gmean - xhat * gxhat);
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Gather { x, idx: map } => {
                if self.nodes[*x].needs_grad {
                    let mut dx = Array2::zeros(self.nodes[*x].value.dim());
                    {
                        let flat = dx.as_slice_mut().unwrap();
                        let gflat = g.as_slice().unwrap();
                        for (pos, &i) in map.iter().enumerate() {
                            if i != GATHER_ZERO {
                                flat[i as usize] = flat[i as usize] + gflat[pos];
                            }
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Rope { x, cos, sin } => {
                let (n, d) = g.dim();
                let mut dx = Array2::zeros((n, d));
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    let gs = g.as_slice().unwrap();
                    let cs = cos.as_slice().unwrap();
                    let ss = sin.as_slice().unwrap();
                    for idx in (0..n * d).step_by(2) {
                        let (g0, g1) = (gs[idx], gs[idx + 1]);
                        dxs[idx] = g0 * cs[idx] + g1 * ss[idx + 1];
                        dxs[idx + 1] = g1 * cs[idx + 1] - g0 * ss[idx];
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Attention { q, k, v, heads, probs: cached } => {
                let qv = &self.nodes[*q].value;
                let kv = &self.nodes[*k].value;
                let vv = &self.nodes[*v].value;
                let (nq, d) = qv.dim();
                let nk = kv.nrows();
                let hd = d / heads;
                let scale = T::one() / T::from(hd).unwrap().sqrt();
                let mut dq = Array2::zeros((nq, d));
                let mut dk = Array2::zeros((nk, d));
                let mut dv = Array2::zeros((nk, d));
                for h in 0..*heads {
                    let cols = h * hd..(h + 1) * hd;
                    let qh = qv.slice(ndarray::s![.., cols.clone()]).to_owned();
                    let kh = kv.slice(ndarray::s![.., cols.clone()]).to_owned();
                    let vh = vv.slice(ndarray::s![.., cols.clone()]).to_owned();
                    let gh = g.slice(ndarray::s![.., cols.clone()]).to_owned();
                    let probs = &cached[h];
                    let dvh = probs.t().dot(&gh);
                    let dp = gh.dot(&vh.t());
                    // dS = P .* (dP - rowsum(dP .* P))
                    let mut ds = dp;
                    {
                        let dss = ds.as_slice_mut().unwrap();
                        let ps = probs.as_slice().unwrap();
                        for row in 0..nq {
                            let lo = row * nk;
                            let mut dot = T::zero();
                            for j in lo..lo + nk {
                                dot = dot + dss[j] * ps[j];
                            }
                            for j in lo..lo + nk {
                                dss[j] = ps[j] * (dss[j] - dot);
                            }
                        }
                    }
                    let dqh = ds.dot(&kh).mapv(|x| x * scale);
                    let dkh = ds.t().dot(&qh).mapv(|x| x * scale);
                    dq.slice_mut(ndarray::s![.., cols.clone()]).assign(&dqh);
                    dk.slice_mut(ndarray::s![.., cols.clone()]).assign(&dkh);
                    dv.slice_mut(ndarray::s![.., cols]).assign(&dvh);
                }
                self.acc(grads, *q, dq);
                self.acc(grads, *k, dk);
                self.acc(grads, *v, dv);
            }
            Op::Mean(a) => {
                let shape = self.nodes[*a].value.dim();
                let n = T::from(shape.0 * shape.1).unwrap();
                let dx = Array2::from_elem(shape, g[(0, 0)] / n);
                self.acc(grads, *a, dx);
            }
        }
    }
}

fn softmax_rows_inplace<T: NdFloat>(out: &mut Array2<T>) {
    let (_, m) = out.dim();
    for row in out.as_slice_mut().unwrap().chunks_mut(m) {
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(mean-ish scalar)/d(leaf) against central differences for a
    /// graph builder.
    fn gradcheck(
        rng: &mut ChaCha8Rng,
        shapes: &[(usize, usize)],
        build: impl Fn(&mut Tape<f64>, &[VarId]) -> VarId,
    ) {
        let values: Vec<Array2<f64>> = shapes.iter().map(|&(r, c)| randn(rng, r, c)).collect();
        let mut tape = Tape::new();
        let leaves: Vec<VarId> = values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let out = build(&mut tape, &leaves);
        assert_eq!(tape.value(out).dim(), (1, 1), "builder must end in a scalar");
        let grads = tape.backward(out);

        let eps = 1e-6;
        for (li, base) in values.iter().enumerate() {
            let g = grads.get(leaves[li]).expect("missing leaf gradient");
            for i in 0..base.nrows() {
                for j in 0..base.ncols() {
                    let eval = |delta: f64| {
                        let mut tape = Tape::new();
                        let ids: Vec<VarId> = values
                            .iter()
                            .enumerate()
                            .map(|(k, v)| {
                                let mut v = v.clone();
                                if k == li {
                                    v[(i, j)] += delta;
                                }
                                tape.leaf(v, false)
                            })
                            .collect();
                        let out = build(&mut tape, &ids);
                        tape.value(out)[(0, 0)]
                    };
                    let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                    let an = g[(i, j)];
                    let denom = an.abs().max(fd.abs()).max(1e-8);
                    // Tiny gradients hit the fd noise floor; accept on
                    // absolute agreement there.
                    assert!(
                        (an - fd).abs() / denom < 1e-5 || (an - fd).abs() < 1e-9,
                        "leaf {li} ({i},{j}): analytic {an} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn elementwise_and_row_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        gradcheck(&mut rng, &[(3, 4), (3, 4), (1, 4), (1, 4)], |t, ids| {
            let a = t.add(ids[0], ids[1]);
            let b = t.mul(a, ids[0]);
            let c = t.sub(b, ids[1]);
            let d = t.add_row(c, ids[2]);
            let e = t.mul_row(d, ids[3]);
            let f = t.silu(e);
            let g = t.scale(f, 0.7);
            t.mean(g)
        });
    }

    #[test]
    fn matmul_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        gradcheck(&mut rng, &[(3, 4), (4, 5), (6, 5)], |t, ids| {
            let ab = t.matmul(ids[0], ids[1]); // [3,5]
            let c = t.matmul_nt(ab, ids[2]); // [3,6]
            let sq = t.mul(c, c);
            t.mean(sq)
        });
    }

    #[test]
    fn norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        gradcheck(&mut rng, &[(4, 6)], |t, ids| {
            let r = t.rms_norm(ids[0], 1e-6);
            let l = t.layer_norm(r, 1e-6);
            let sq = t.mul(l, l);
            t.mean(sq)
        });
    }

    #[test]
    fn gather_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Repeats, zero-padding, and a plain permutation mixed together.
        let idx: Rc<Vec<u32>> = Rc::new(vec![0, 5, 5, GATHER_ZERO, 3, 1, 11, 2]);
        gradcheck(&mut rng, &[(3, 4)], move |t, ids| {
            let g = t.gather(ids[0], idx.clone(), 2, 4);
            let sq = t.mul(g, g);
            t.mean(sq)
        });
    }

    #[test]
    fn rope_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4;
        let d = 6;
        let mut cos = Array2::zeros((n, d));
        let mut sin = Array2::zeros((n, d));
        for i in 0..n {
            for p in 0..d / 2 {
                let ang = 0.3 * (i as f64 + 1.0) * (p as f64 + 1.0);
                cos[(i, 2 * p)] = ang.cos();
                cos[(i, 2 * p + 1)] = ang.cos();
                sin[(i, 2 * p)] = ang.sin();
                sin[(i, 2 * p + 1)] = ang.sin();
            }
        }
        let cos = Rc::new(cos);
        let sin = Rc::new(sin);
        // Norm preservation: rope is a rotation of each pair.
        {
            let mut tape: Tape<f64> = Tape::new();
            let x = tape.leaf(randn(&mut rng, n, d), false);
            let y = tape.rope(x, cos.clone(), sin.clone());
            for i in 0..n {
                let nx: f64 = (0..d).map(|j| tape.value(x)[(i, j)].powi(2)).sum();
                let ny: f64 = (0..d).map(|j| tape.value(y)[(i, j)].powi(2)).sum();
                assert!((nx - ny).abs() < 1e-10);
            }
        }
        gradcheck(&mut rng, &[(n, d)], move |t, ids| {
            let y = t.rope(ids[0], cos.clone(), sin.clone());
            let sq = t.mul(y, y);
            t.mean(sq)
        });
    }

    #[test]
    fn fused_attention_self_and_cross() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Self-attention shape (same token count) with 2 heads.
        gradcheck(&mut rng, &[(5, 8), (5, 8), (5, 8)], |t, ids| {
            let o = t.attention(ids[0], ids[1], ids[2], 2);
            let sq = t.mul(o, o);
            t.mean(sq)
        });
        // Cross-attention shape (3 queries over 7 keys).
        gradcheck(&mut rng, &[(3, 8), (7, 8), (7, 8)], |t, ids| {
            let o = t.attention(ids[0], ids[1], ids[2], 4);
            let sq = t.mul(o, o);
            t.mean(sq)
        });
    }

    #[test]
    fn modulate_matches_manual_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(randn(&mut rng, 3, 4), false);
        let shift = tape.leaf(randn(&mut rng, 1, 4), false);
        let scale = tape.leaf(randn(&mut rng, 1, 4), false);
        let y = tape.modulate(x, shift, scale);
        for i in 0..3 {
            for j in 0..4 {
                let expected = tape.value(x)[(i, j)] * (1.0 + tape.value(scale)[(0, j)])
                    + tape.value(shift)[(0, j)];
                assert!((tape.value(y)[(i, j)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_leaves_receive_no_gradient_and_prune_work() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(randn(&mut rng, 3, 4), false);
        let w_frozen = tape.leaf(randn(&mut rng, 4, 4), false);
        let w_live = tape.leaf(randn(&mut rng, 4, 4), true);
        let h1 = tape.matmul(x, w_frozen);
        assert!(!tape.needs_grad(h1));
        let h2 = tape.matmul(h1, w_live);
        assert!(tape.needs_grad(h2));
        let sq = tape.mul(h2, h2);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss);
        assert!(grads.get(w_frozen).is_none());
        assert!(grads.get(x).is_none());
        assert!(grads.get(w_live).is_some());
    }

    #[test]
    fn duplicated_parent_accumulates_twice() {
        // d(mean(x*x))/dx = 2x/len.
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Array2::from_shape_vec((1, 2), vec![3.0, -2.0]).unwrap(), true);
        let sq = tape.mul(x, x);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss);
        let g = grads.get(x).unwrap();
        assert!((g[(0, 0)] - 3.0).abs() < 1e-12);
        assert!((g[(0, 1)] + 2.0).abs() < 1e-12);
    }
}
