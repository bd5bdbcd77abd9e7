use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    SelectEntries { a: Var, idx: Vec<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddRow { a: Var, b: Var },
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    MaskedFill { a: Var, mask: Rc<Vec<bool>> },
    SparseAttention { q: Var, k: Var, v: Var, heads: usize, idx: Rc<Vec<Vec<usize>>>, probs: Vec<T> },
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, b: Var, spec: Conv2dSpec, cols: Vec<T> },
    ChannelsToTokens(Var),
    Sum(Var),
    Mean(Var),
    L2NormRows { a: Var, norms: Vec<T> },
    BceWithLogits { x: Var, targets: Vec<T> },
    SmoothL1 { x: Var, targets: Vec<T>, beta: T },
    CrossEntropyRows { x: Var, targets: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode tape. Build a scalar loss from [`Var`]s, then call
/// [`Graph::backward`]. Parameter leaves come from a [`ParamStore`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn conv_out(size: usize, k: usize, spec: Conv2dSpec) -> Option<usize> {
    (size + 2 * spec.pad).checked_sub(k).map(|s| s / spec.stride + 1)
}

struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn n(&self) -> usize {
        self.b * self.ho * self.wo
    }

    /// Calls `f(cols offset, input offset)` for every non-padding tap.
    fn for_each<F: FnMut(usize, usize)>(&self, spec: Conv2dSpec, mut f: F) {
        let n = self.n();
        let hw = self.ho * self.wo;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    for bi in 0..self.b {
                        let base = (bi * self.c + ci) * self.h * self.w;
                        for oy in 0..self.ho {
                            let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for ox in 0..self.wo {
                                let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                let col = bi * hw + oy * self.wo + ox;
                                f(row * n + col, base + iy as usize * self.w + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last `backward` call's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn d2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2(op)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Constant leaf that still collects a gradient (for tests and input sensitivity).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&mut self, x: T) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Binds parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, !store.is_frozen(id));
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.d2(a, "matmul")?;
        let (br, bc) = self.d2(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("{:?}{} x {:?}{}", [ar, ac], if ta { "^T" } else { "" }, [br, bc], if tb { "^T" } else { "" }),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(ta, tb, m, n, k, T::one(), self.data(a), self.data(b), T::zero(), &mut out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.d2(a, "transpose")?;
        let src = self.data(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor { shape: vec![c, r], data: out }, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let data = self.data(a).to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::Reshape(a), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let (_, c) = self.d2(*first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.d2(p, "concat_rows")?;
            if pc != c {
                return Err(shape_err("concat_rows", format!("column counts {c} and {pc}")));
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor { shape: vec![rows, c], data }, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        let (r, _) = self.d2(*first, "concat_cols")?;
        let mut widths = Vec::new();
        for &p in parts {
            let (pr, pc) = self.d2(p, "concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", format!("row counts {r} and {pr}")));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor { shape: vec![r, c], data }, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.d2(a, "slice_rows")?;
        if start + len > r {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.data(a)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor { shape: vec![len, c], data }, Op::SliceRows { a, start }, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.d2(a, "slice_cols")?;
        if start + len > c {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor { shape: vec![r, len], data }, Op::SliceCols { a, start }, ng))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.d2(a, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} of {r}")));
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(
            Tensor { shape: vec![idx.len(), c], data },
            Op::GatherRows { a, idx: idx.to_vec() },
            ng,
        ))
    }

    /// `out[i][j] = a[i][idx[i * m + j]]` for an `r x m` index table.
    pub fn select_entries(&mut self, a: Var, idx: &[usize], m: usize) -> Result<Var> {
        let (r, c) = self.d2(a, "select_entries")?;
        if idx.len() != r * m {
            return Err(shape_err("select_entries", format!("{} indices for {r} x {m}", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(shape_err("select_entries", format!("column {bad} of {c}")));
        }
        let src = self.data(a);
        let data = idx.iter().enumerate().map(|(o, &j)| src[(o / m.max(1)) * c + j]).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(
            Tensor { shape: vec![r, m], data },
            Op::SelectEntries { a, idx: idx.to_vec() },
            ng,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor { shape, data }, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "minimum", |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "maximum", |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    /// Adds the vector `b` (length = cols) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.d2(a, "add_row")?;
        if self.value(b).len() != c {
            return Err(shape_err("add_row", format!("{:?} + row {:?}", [r, c], self.shape(b))));
        }
        let bv = self.data(b);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x + bv[i % c]).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor { shape: vec![r, c], data }, Op::AddRow { a, b }, ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(Tensor { shape, data }, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Row-wise softmax over the last axis. `-inf` (or the f32 mask fill)
    /// entries receive exactly zero weight.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.d2(a, "softmax_rows")?;
        let src = self.data(a);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            softmax_into(&src[i * c..(i + 1) * c], None, &mut data[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor { shape: vec![r, c], data }, Op::SoftmaxRows(a), ng))
    }

    /// Multi-head attention where row `i` of `q` attends only to the rows
    /// `idx[i]` of `k` and `v`. Equivalent to dense attention with every other
    /// logit masked to `-inf`, without materializing the masked entries.
    pub fn sparse_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, idx: Rc<Vec<Vec<usize>>>) -> Result<Var> {
        let (r, d) = self.d2(q, "sparse_attention")?;
        let (n, dk) = self.d2(k, "sparse_attention")?;
        let (nv, dv) = self.d2(v, "sparse_attention")?;
        if dk != d || dv != d || nv != n || idx.len() != r || heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "sparse_attention",
                format!("q [{r}, {d}], k [{n}, {dk}], v [{nv}, {dv}], {} index rows, {heads} heads", idx.len()),
            ));
        }
        if let Some(i) = idx.iter().position(|row| row.is_empty() || row.iter().any(|&j| j >= n)) {
            return Err(shape_err("sparse_attention", format!("index row {i} is empty or out of range for {n} keys")));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![T::zero(); r * d];
        let mut probs = Vec::with_capacity(idx.iter().map(Vec::len).sum::<usize>() * heads);
        for (i, row) in idx.iter().enumerate() {
            for h in 0..heads {
                let o = h * dh;
                let qi = &qd[i * d + o..i * d + o + dh];
                let start = probs.len();
                let mut max = T::neg_infinity();
                for &j in row {
                    let s = qi.iter().zip(&kd[j * d + o..j * d + o + dh]).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    max = max.max(s);
                    probs.push(s);
                }
                let p = &mut probs[start..];
                let mut total = T::zero();
                for x in p.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                let out_row = &mut out[i * d + o..i * d + o + dh];
                for (x, &j) in p.iter_mut().zip(row) {
                    *x = *x / total;
                    for (oc, &vc) in out_row.iter_mut().zip(&vd[j * d + o..j * d + o + dh]) {
                        *oc += *x * vc;
                    }
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            Tensor { shape: vec![r, d], data: out },
            Op::SparseAttention { q, k, v, heads, idx, probs },
            ng,
        ))
    }

    /// Replaces entries where `mask` is true with [`Real::MASK_FILL`].
    pub fn masked_fill(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(shape_err("masked_fill", format!("mask of {} for {:?}", mask.len(), self.shape(a))));
        }
        let data = self
            .data(a)
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| if m { T::MASK_FILL } else { x })
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::MaskedFill { a, mask }, ng))
    }

    /// Per-row normalization to zero mean and unit variance, then `* g + b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let (r, c) = self.d2(x, "layer_norm")?;
        if self.value(g).len() != c || self.value(b).len() != c {
            return Err(shape_err("layer_norm", format!("gain/bias of {} for width {c}", self.value(g).len())));
        }
        let eps = T::from_f64(1e-5);
        let n = T::from_f64(c as f64);
        let src = self.data(x);
        let (gv, bv) = (self.data(g), self.data(b));
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                data[i * c + j] = h * gv[j] + bv[j];
            }
        }
        let ng = self.ng(&[x, g, b]);
        Ok(self.push(Tensor { shape: vec![r, c], data }, Op::LayerNorm { x, g, b, xhat, rstd }, ng))
    }

    /// 2D convolution of `x: [B, C, H, W]` with `w: [Co, C, kh, kw]` and bias `[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Result<Var> {
        let geom = self.conv_geom(x, w, spec)?;
        if self.value(b).len() != geom.co {
            return Err(shape_err("conv2d", format!("bias of {} for {} channels", self.value(b).len(), geom.co)));
        }
        let (k, n) = (geom.k(), geom.n());
        let mut cols = vec![T::zero(); k * n];
        let src = self.data(x);
        geom.for_each(spec, |ci, xi| cols[ci] = src[xi]);
        let mut mat = vec![T::zero(); geom.co * n];
        T::gemm(false, false, geom.co, n, k, T::one(), self.data(w), &cols, T::zero(), &mut mat);
        let hw = geom.ho * geom.wo;
        let bias = self.data(b);
        let mut out = vec![T::zero(); geom.b * geom.co * hw];
        for bi in 0..geom.b {
            for co in 0..geom.co {
                let dst = &mut out[(bi * geom.co + co) * hw..(bi * geom.co + co + 1) * hw];
                let srcm = &mat[co * n + bi * hw..co * n + (bi + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(srcm) {
                    *d = s + bias[co];
                }
            }
        }
        let ng = self.ng(&[x, w, b]);
        let shape = vec![geom.b, geom.co, geom.ho, geom.wo];
        Ok(self.push(Tensor { shape, data: out }, Op::Conv2d { x, w, b, spec, cols }, ng))
    }

    fn conv_geom(&self, x: Var, w: Var, spec: Conv2dSpec) -> Result<ConvGeom> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (&[b, c, h, wd], &[co, ci, kh, kw]) = (xs, ws) else {
            return Err(shape_err("conv2d", format!("input {xs:?}, weight {ws:?}")));
        };
        if ci != c || spec.stride == 0 {
            return Err(shape_err("conv2d", format!("input {xs:?}, weight {ws:?}, stride {}", spec.stride)));
        }
        let (Some(ho), Some(wo)) = (conv_out(h, kh, spec), conv_out(wd, kw, spec)) else {
            return Err(shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{wd}")));
        };
        Ok(ConvGeom { b, c, h, w: wd, co, kh, kw, ho, wo })
    }

    /// `[B, C, h, w]` feature maps to `[B * h * w, C]` token rows.
    pub fn channels_to_tokens(&mut self, a: Var) -> Result<Var> {
        let &[b, c, h, w] = self.shape(a) else {
            return Err(shape_err("channels_to_tokens", format!("{:?}", self.shape(a))));
        };
        let hw = h * w;
        let src = self.data(a);
        let mut data = vec![T::zero(); b * hw * c];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..hw {
                    data[(bi * hw + p) * c + ci] = src[(bi * c + ci) * hw + p];
                }
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor { shape: vec![b * hw, c], data }, Op::ChannelsToTokens(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.data(a).iter().copied().sum::<T>() / T::from_f64(n as f64);
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Divides each row by `sqrt(|row|^2 + 1e-12)`.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.d2(a, "l2_normalize_rows")?;
        let src = self.data(a);
        let eps = T::from_f64(1e-12);
        let mut norms = vec![T::zero(); r];
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            norms[i] = n;
            for j in 0..c {
                data[i * c + j] = row[j] / n;
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor { shape: vec![r, c], data }, Op::L2NormRows { a, norms }, ng))
    }

    /// Mean binary cross-entropy of logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[T]) -> Result<Var> {
        if targets.len() != self.value(x).len() {
            return Err(shape_err("bce_with_logits", format!("{} targets for {:?}", targets.len(), self.shape(x))));
        }
        let n = T::from_f64(targets.len().max(1) as f64);
        let loss = self
            .data(x)
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum::<T>()
            / n;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { x, targets: targets.to_vec() }, ng))
    }

    /// Mean smooth-L1 (Huber with transition `beta`) against constant targets.
    pub fn smooth_l1(&mut self, x: Var, targets: &[T], beta: T) -> Result<Var> {
        if targets.len() != self.value(x).len() {
            return Err(shape_err("smooth_l1", format!("{} targets for {:?}", targets.len(), self.shape(x))));
        }
        let half = T::from_f64(0.5);
        let n = T::from_f64(targets.len().max(1) as f64);
        let loss = self
            .data(x)
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let d = (p - t).abs();
                if d < beta {
                    half * d * d / beta
                } else {
                    d - half * beta
                }
            })
            .sum::<T>()
            / n;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(loss), Op::SmoothL1 { x, targets: targets.to_vec(), beta }, ng))
    }

    /// Mean over rows of `logsumexp(row) - row[target]`, ignoring entries
    /// where `mask` is true.
    pub fn cross_entropy_rows(&mut self, x: Var, targets: &[usize], mask: Option<Rc<Vec<bool>>>) -> Result<Var> {
        let (r, c) = self.d2(x, "cross_entropy_rows")?;
        if targets.len() != r || targets.iter().any(|&t| t >= c) {
            return Err(shape_err("cross_entropy_rows", format!("{} targets for {r} x {c}", targets.len())));
        }
        if let Some(m) = &mask {
            if m.len() != r * c {
                return Err(shape_err("cross_entropy_rows", format!("mask of {} for {r} x {c}", m.len())));
            }
            if targets.iter().enumerate().any(|(i, &t)| m[i * c + t]) {
                return Err(shape_err("cross_entropy_rows", "target entry is masked"));
            }
        }
        let src = self.data(x);
        let mut probs = vec![T::zero(); r * c];
        let mut loss = T::zero();
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let m = mask.as_ref().map(|m| &m[i * c..(i + 1) * c]);
            let lse = softmax_into(row, m, &mut probs[i * c..(i + 1) * c]);
            loss += lse - row[targets[i]];
        }
        loss = loss / T::from_f64(r.max(1) as f64);
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyRows { x, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    /// Reverse pass from the scalar `loss`. Gradients stay on the tape until
    /// the graph is dropped; see [`Graph::grad`] and [`Graph::accumulate_into`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        if !self.value(loss).all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].needs_grad {
                backprop(&self.nodes, &mut self.grads, i, &gout);
            }
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    /// Adds parameter gradients from the last backward pass into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                store.add_grad(id, g);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Softmax of `row` (skipping masked entries) into `out`; returns logsumexp.
fn softmax_into<T: Real>(row: &[T], mask: Option<&[bool]>, out: &mut [T]) -> T {
    let live = |j: usize| mask.is_none_or(|m| !m[j]) && row[j] > T::MASK_FILL;
    let mut max = T::neg_infinity();
    for j in 0..row.len() {
        if live(j) && row[j] > max {
            max = row[j];
        }
    }
    let mut total = T::zero();
    for j in 0..row.len() {
        out[j] = if live(j) { (row[j] - max).exp() } else { T::zero() };
        total += out[j];
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
    max + total.ln()
}

fn acc<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let n = nodes[v.0].value.len();
    let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
    f(g);
}

fn backprop<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, gout: &[T]) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf | Op::Param => {}
        &Op::MatMul { a, b, ta, tb } => {
            let (m, n) = (node.value.shape[0], node.value.shape[1]);
            let (ar, ac) = (val(a).shape[0], val(a).shape[1]);
            let k = if ta { ar } else { ac };
            let (av, bv) = (&val(a).data, &val(b).data);
            // C = op(A) op(B); dA = dC op(B)^T (transposed back if ta), dB likewise
            acc(nodes, grads, a, |g| {
                if ta {
                    T::gemm(tb, true, k, m, n, T::one(), bv, gout, T::one(), g);
                } else {
                    T::gemm(false, !tb, m, k, n, T::one(), gout, bv, T::one(), g);
                }
            });
            acc(nodes, grads, b, |g| {
                if tb {
                    T::gemm(true, ta, n, k, m, T::one(), gout, av, T::one(), g);
                } else {
                    T::gemm(!ta, false, k, n, m, T::one(), av, gout, T::one(), g);
                }
            });
        }
        &Op::Transpose(a) => {
            let (r, c) = (val(a).shape[0], val(a).shape[1]);
            acc(nodes, grads, a, |g| {
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += gout[j * r + i];
                    }
                }
            });
        }
        &Op::Reshape(a) => acc(nodes, grads, a, |g| add_into(g, gout)),
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).len();
                acc(nodes, grads, p, |g| add_into(g, &gout[off..off + n]));
                off += n;
            }
        }
        Op::ConcatCols(parts) => {
            let (r, c) = (node.value.shape[0], node.value.shape[1]);
            let mut off = 0;
            for &p in parts {
                let w = val(p).shape[1];
                acc(nodes, grads, p, |g| {
                    for i in 0..r {
                        add_into(&mut g[i * w..(i + 1) * w], &gout[i * c + off..i * c + off + w]);
                    }
                });
                off += w;
            }
        }
        &Op::SliceRows { a, start } => {
            let c = val(a).shape[1];
            acc(nodes, grads, a, |g| add_into(&mut g[start * c..start * c + gout.len()], gout));
        }
        &Op::SliceCols { a, start } => {
            let (r, c) = (val(a).shape[0], val(a).shape[1]);
            let w = node.value.shape[1];
            acc(nodes, grads, a, |g| {
                for i in 0..r {
                    add_into(&mut g[i * c + start..i * c + start + w], &gout[i * w..(i + 1) * w]);
                }
            });
        }
        Op::GatherRows { a, idx } => {
            let c = val(*a).shape[1];
            acc(nodes, grads, *a, |g| {
                for (o, &s) in idx.iter().enumerate() {
                    add_into(&mut g[s * c..(s + 1) * c], &gout[o * c..(o + 1) * c]);
                }
            });
        }
        Op::SelectEntries { a, idx } => {
            let c = val(*a).shape[1];
            let m = node.value.shape[1].max(1);
            acc(nodes, grads, *a, |g| {
                for (o, &j) in idx.iter().enumerate() {
                    g[(o / m) * c + j] += gout[o];
                }
            });
        }
        &Op::Add(a, b) => {
            acc(nodes, grads, a, |g| add_into(g, gout));
            acc(nodes, grads, b, |g| add_into(g, gout));
        }
        &Op::Sub(a, b) => {
            acc(nodes, grads, a, |g| add_into(g, gout));
            acc(nodes, grads, b, |g| g.iter_mut().zip(gout).for_each(|(x, &d)| *x -= d));
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (&val(a).data, &val(b).data);
            acc(nodes, grads, a, |g| {
                for j in 0..g.len() {
                    g[j] += gout[j] * bv[j];
                }
            });
            acc(nodes, grads, b, |g| {
                for j in 0..g.len() {
                    g[j] += gout[j] * av[j];
                }
            });
        }
        &Op::Div(a, b) => {
            let (av, bv) = (&val(a).data, &val(b).data);
            acc(nodes, grads, a, |g| {
                for j in 0..g.len() {
                    g[j] += gout[j] / bv[j];
                }
            });
            acc(nodes, grads, b, |g| {
                for j in 0..g.len() {
                    g[j] -= gout[j] * av[j] / (bv[j] * bv[j]);
                }
            });
        }
        &Op::Minimum(a, b) | &Op::Maximum(a, b) => {
            let is_min = matches!(node.op, Op::Minimum(..));
            let (av, bv) = (&val(a).data, &val(b).data);
            let picks_a = |j: usize| if is_min { av[j] <= bv[j] } else { av[j] >= bv[j] };
            acc(nodes, grads, a, |g| {
                for j in 0..g.len() {
                    if picks_a(j) {
                        g[j] += gout[j];
                    }
                }
            });
            acc(nodes, grads, b, |g| {
                for j in 0..g.len() {
                    if !picks_a(j) {
                        g[j] += gout[j];
                    }
                }
            });
        }
        &Op::AddRow { a, b } => {
            let c = node.value.shape[1];
            acc(nodes, grads, a, |g| add_into(g, gout));
            acc(nodes, grads, b, |g| {
                for (j, &d) in gout.iter().enumerate() {
                    g[j % c] += d;
                }
            });
        }
        &Op::Scale(a, s) => acc(nodes, grads, a, |g| g.iter_mut().zip(gout).for_each(|(x, &d)| *x += d * s)),
        &Op::AddScalar(a) => acc(nodes, grads, a, |g| add_into(g, gout)),
        &Op::Exp(a) => {
            let y = &node.value.data;
            acc(nodes, grads, a, |g| {
                for j in 0..g.len() {
                    g[j] += gout[j] * y[j];
                }
            });
        }
        &Op::Log(a) => {
            let x = &val(a).data;
            acc(nodes, grads, a, |g| {
                for j in 0..g.len() {
                    g[j] += gout[j] / x[j];
                }
            });
        }
        &Op::Relu(a) => {
            let x = &val(a).data;
            acc(nodes, grads, a, |g| {
                for j in 0..g.len() {
                    if x[j] > T::zero() {
                        g[j] += gout[j];
                    }
                }
            });
        }
        &Op::Sigmoid(a) => {
            let y = &node.value.data;
            acc(nodes, grads, a, |g| {
                for j in 0..g.len() {
                    g[j] += gout[j] * y[j] * (T::one() - y[j]);
                }
            });
        }
        &Op::SoftmaxRows(a) => {
            let (r, c) = (node.value.shape[0], node.value.shape[1]);
            let y = &node.value.data;
            acc(nodes, grads, a, |g| {
                for i in 0..r {
                    let (yr, dr) = (&y[i * c..(i + 1) * c], &gout[i * c..(i + 1) * c]);
                    let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                    for j in 0..c {
                        g[i * c + j] += yr[j] * (dr[j] - dot);
                    }
                }
            });
        }
        Op::SparseAttention { q, k, v, heads, idx, probs } => {
            let (q, k, v, heads) = (*q, *k, *v, *heads);
            let d = node.value.shape[1];
            let dh = d / heads;
            let scale = T::from_f64(1.0 / (dh as f64).sqrt());
            let (qd, kd, vd) = (&val(q).data, &val(k).data, &val(v).data);
            // ds = p * (dp - sum p dp) * scale, laid out like `probs`
            let mut ds = vec![T::zero(); probs.len()];
            let mut pos = 0;
            for (i, row) in idx.iter().enumerate() {
                for h in 0..heads {
                    let o = h * dh;
                    let go = &gout[i * d + o..i * d + o + dh];
                    let p = &probs[pos..pos + row.len()];
                    let dp: Vec<T> = row
                        .iter()
                        .map(|&j| go.iter().zip(&vd[j * d + o..j * d + o + dh]).map(|(&a, &b)| a * b).sum())
                        .collect();
                    let dot: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    for t in 0..row.len() {
                        ds[pos + t] = p[t] * (dp[t] - dot) * scale;
                    }
                    pos += row.len();
                }
            }
            let walk = |f: &mut dyn FnMut(usize, usize, usize, usize)| {
                let mut pos = 0;
                for (i, row) in idx.iter().enumerate() {
                    for h in 0..heads {
                        for (t, &j) in row.iter().enumerate() {
                            f(i, h * dh, j, pos + t);
                        }
                        pos += row.len();
                    }
                }
            };
            acc(nodes, grads, q, |g| {
                walk(&mut |i, o, j, t| {
                    for c in 0..dh {
                        g[i * d + o + c] += ds[t] * kd[j * d + o + c];
                    }
                })
            });
            acc(nodes, grads, k, |g| {
                walk(&mut |i, o, j, t| {
                    for c in 0..dh {
                        g[j * d + o + c] += ds[t] * qd[i * d + o + c];
                    }
                })
            });
            acc(nodes, grads, v, |g| {
                walk(&mut |i, o, j, t| {
                    for c in 0..dh {
                        g[j * d + o + c] += probs[t] * gout[i * d + o + c];
                    }
                })
            });
        }
        Op::MaskedFill { a, mask } => acc(nodes, grads, *a, |g| {
            for j in 0..g.len() {
                if !mask[j] {
                    g[j] += gout[j];
                }
            }
        }),
        Op::LayerNorm { x, g: gn, b, xhat, rstd } => {
            let (r, c) = (node.value.shape[0], node.value.shape[1]);
            let gv = &val(*gn).data;
            let n = T::from_f64(c as f64);
            acc(nodes, grads, *x, |gx| {
                for i in 0..r {
                    let (h, d) = (&xhat[i * c..(i + 1) * c], &gout[i * c..(i + 1) * c]);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        let dh = d[j] * gv[j];
                        m1 += dh;
                        m2 += dh * h[j];
                    }
                    m1 = m1 / n;
                    m2 = m2 / n;
                    for j in 0..c {
                        gx[i * c + j] += rstd[i] * (d[j] * gv[j] - m1 - h[j] * m2);
                    }
                }
            });
            acc(nodes, grads, *gn, |gg| {
                for (o, &d) in gout.iter().enumerate() {
                    gg[o % c] += d * xhat[o];
                }
            });
            acc(nodes, grads, *b, |gb| {
                for (o, &d) in gout.iter().enumerate() {
                    gb[o % c] += d;
                }
            });
        }
        Op::Conv2d { x, w, b, spec, cols } => {
            let (xs, ws) = (&val(*x).shape, &val(*w).shape);
            let geom = ConvGeom {
                b: xs[0],
                c: xs[1],
                h: xs[2],
                w: xs[3],
                co: ws[0],
                kh: ws[2],
                kw: ws[3],
                ho: node.value.shape[2],
                wo: node.value.shape[3],
            };
            let (k, n, hw) = (geom.k(), geom.n(), geom.ho * geom.wo);
            let mut dmat = vec![T::zero(); geom.co * n];
            for bi in 0..geom.b {
                for co in 0..geom.co {
                    dmat[co * n + bi * hw..co * n + (bi + 1) * hw]
                        .copy_from_slice(&gout[(bi * geom.co + co) * hw..(bi * geom.co + co + 1) * hw]);
                }
            }
            acc(nodes, grads, *b, |gb| {
                for co in 0..geom.co {
                    gb[co] += dmat[co * n..(co + 1) * n].iter().copied().sum::<T>();
                }
            });
            acc(nodes, grads, *w, |gw| T::gemm(false, true, geom.co, k, n, T::one(), &dmat, cols, T::one(), gw));
            if nodes[x.0].needs_grad {
                let mut dcols = vec![T::zero(); k * n];
                T::gemm(true, false, k, n, geom.co, T::one(), &val(*w).data, &dmat, T::zero(), &mut dcols);
                acc(nodes, grads, *x, |gx| geom.for_each(*spec, |ci, xi| gx[xi] += dcols[ci]));
            }
        }
        &Op::ChannelsToTokens(a) => {
            let s = &val(a).shape;
            let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
            acc(nodes, grads, a, |g| {
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..hw {
                            g[(bi * c + ci) * hw + p] += gout[(bi * hw + p) * c + ci];
                        }
                    }
                }
            });
        }
        &Op::Sum(a) => acc(nodes, grads, a, |g| g.iter_mut().for_each(|x| *x += gout[0])),
        &Op::Mean(a) => {
            let s = gout[0] / T::from_f64(val(a).len().max(1) as f64);
            acc(nodes, grads, a, |g| g.iter_mut().for_each(|x| *x += s));
        }
        Op::L2NormRows { a, norms } => {
            let (r, c) = (node.value.shape[0], node.value.shape[1]);
            let y = &node.value.data;
            acc(nodes, grads, *a, |g| {
                for i in 0..r {
                    let (yr, dr) = (&y[i * c..(i + 1) * c], &gout[i * c..(i + 1) * c]);
                    let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                    for j in 0..c {
                        g[i * c + j] += (dr[j] - yr[j] * dot) / norms[i];
                    }
                }
            });
        }
        Op::BceWithLogits { x, targets } => {
            let xv = &val(*x).data;
            let s = gout[0] / T::from_f64(targets.len().max(1) as f64);
            acc(nodes, grads, *x, |g| {
                for j in 0..g.len() {
                    g[j] += s * (sigmoid(xv[j]) - targets[j]);
                }
            });
        }
        Op::SmoothL1 { x, targets, beta } => {
            let xv = &val(*x).data;
            let s = gout[0] / T::from_f64(targets.len().max(1) as f64);
            acc(nodes, grads, *x, |g| {
                for j in 0..g.len() {
                    let d = xv[j] - targets[j];
                    let slope = if d.abs() < *beta { d / *beta } else { d.signum() };
                    g[j] += s * slope;
                }
            });
        }
        Op::CrossEntropyRows { x, targets, probs } => {
            let c = val(*x).shape[1];
            let s = gout[0] / T::from_f64(targets.len().max(1) as f64);
            acc(nodes, grads, *x, |g| {
                for j in 0..g.len() {
                    g[j] += s * probs[j];
                }
                for (i, &t) in targets.iter().enumerate() {
                    g[i * c + t] -= s;
                }
            });
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
