//! Correspondence matching transformer and the query-only baseline.
//!
//! Feature matrices are token-major: a row per patch, `d` columns.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{Conv2dSpec, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::render::{patch_center_pixel, pixel_center, unproject, CameraPose};

pub const DOWNSCALE: usize = 8;
pub const FOURIER_FREQS: usize = 10;
pub const FOURIER_DIM: usize = 6 * FOURIER_FREQS + 3;

/// Number of view columns each query row may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TopK {
    K(usize),
    /// Every valid column (k = n^v).
    Dense,
}

impl TopK {
    pub fn resolve(self, nv: usize) -> Result<usize> {
        match self {
            TopK::Dense => Ok(nv),
            TopK::K(0) => Err(Error::Config("top-k must be at least 1".into())),
            TopK::K(k) if k > nv => Err(Error::Config(format!("top-k {k} exceeds {nv} view columns"))),
            TopK::K(k) => Ok(k),
        }
    }
}

impl std::fmt::Display for TopK {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TopK::K(k) => write!(f, "{k}"),
            TopK::Dense => f.write_str("dense"),
        }
    }
}

impl std::str::FromStr for TopK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "dense" {
            return Ok(TopK::Dense);
        }
        s.parse()
            .map(TopK::K)
            .map_err(|_| Error::Config(format!("top-k must be a count or `dense`, got `{s}`")))
    }
}

impl Serialize for TopK {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TopK::K(k) => s.serialize_u64(*k as u64),
            TopK::Dense => s.serialize_str("dense"),
        }
    }
}

impl<'de> Deserialize<'de> for TopK {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(k) => Ok(TopK::K(k)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side in pixels; must be divisible by 8.
    pub resolution: usize,
    pub d: usize,
    /// Encoder widths of the three stride-2 stages.
    pub channels: [usize; 3],
    pub blocks: usize,
    pub heads: usize,
    pub k: TopK,
    /// FFN hidden width as a multiple of `d`.
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            resolution: 64,
            d: 64,
            channels: [16, 32, 64],
            blocks: 3,
            heads: 8,
            k: TopK::K(16),
            ffn_mult: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % DOWNSCALE != 0 {
            return Err(Error::Config(format!("resolution {} is not a positive multiple of 8", self.resolution)));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("d = {} is not divisible by {} heads", self.d, self.heads)));
        }
        if self.blocks == 0 {
            return Err(Error::Config("need at least one transformer block".into()));
        }
        if self.channels.contains(&0) || self.ffn_mult == 0 {
            return Err(Error::Config("encoder widths and ffn_mult must be positive".into()));
        }
        if self.k == TopK::K(0) {
            return Err(Error::Config("top-k must be at least 1".into()));
        }
        Ok(())
    }

    /// Side of the patch grid.
    pub fn grid(&self) -> usize {
        self.resolution / DOWNSCALE
    }

    /// Patches per image (n^q).
    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Uniform init with bound `gain / sqrt(fan_in)`; biases start at zero.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_uniform(&format!("{name}.w"), vec![fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng)?;
        let b = if bias {
            Some(store.add_constant(&format!("{name}.b"), vec![fan_out], 0.0)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Norm {
            g: store.add_constant(&format!("{name}.g"), vec![d], 1.0)?,
            b: store.add_constant(&format!("{name}.b"), vec![d], 0.0)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (gv, bv) = (g.param(store, self.g), g.param(store, self.b));
        g.layer_norm(x, gv, bv)
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dims: &[usize], rng: &mut R) -> Result<Self> {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 < n { 6f64.sqrt() } else { 3f64.sqrt() };
                Linear::new(store, &format!("{name}.l{}", i + 1), dims[i], dims[i + 1], true, gain, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var> {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, store, x)?;
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}

/// Three 3x3 stride-2 conv stages, a 1x1 projection to `d`, and a token norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub convs: Vec<(ParamId, ParamId)>,
    pub proj: (ParamId, ParamId),
    pub norm: Norm,
}

impl Encoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &co) in cfg.channels.iter().enumerate() {
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            let w = store.add_uniform(&format!("enc.conv{}.w", i + 1), vec![co, cin, 3, 3], bound, rng)?;
            let b = store.add_constant(&format!("enc.conv{}.b", i + 1), vec![co], 0.0)?;
            convs.push((w, b));
            cin = co;
        }
        let pw = store.add_uniform("enc.proj.w", vec![cfg.d, cin, 1, 1], (3.0 / cin as f64).sqrt(), rng)?;
        let pb = store.add_constant("enc.proj.b", vec![cfg.d], 0.0)?;
        Ok(Encoder {
            convs,
            proj: (pw, pb),
            norm: Norm::new(store, "enc.norm", cfg.d)?,
        })
    }

    /// `images` is `[B, 3, H, W]` in [0, 1]; returns `[B * h * w, d]` tokens,
    /// image-major then row-major over the patch grid.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: Tensor<T>) -> Result<Var> {
        match images.shape.as_slice() {
            [_, 3, h, w] if h % DOWNSCALE == 0 && w % DOWNSCALE == 0 && *h > 0 && *w > 0 => {}
            s => return Err(Error::Config(format!("encoder input must be [B, 3, H, W] with H, W divisible by 8, got {s:?}"))),
        }
        let x = g.constant(images);
        let mut x = g.add_scalar(x, T::from_f64(-0.5));
        let spec = Conv2dSpec { stride: 2, pad: 1 };
        for &(w, b) in &self.convs {
            let (wv, bv) = (g.param(store, w), g.param(store, b));
            x = g.conv2d(x, wv, bv, spec)?;
            x = g.relu(x);
        }
        let (wv, bv) = (g.param(store, self.proj.0), g.param(store, self.proj.1));
        x = g.conv2d(x, wv, bv, Conv2dSpec { stride: 1, pad: 0 })?;
        let t = g.channels_to_tokens(x)?;
        self.norm.forward(g, store, t)
    }
}

/// Stacks images into a `[B, 3, H, W]` tensor. Each image is either CHW with
/// three channels or a single gray channel, which is replicated.
pub fn image_batch<T: Real>(images: &[&[f32]], res: usize) -> Result<Tensor<T>> {
    let plane = res * res;
    let mut data = Vec::with_capacity(images.len() * 3 * plane);
    for img in images {
        if img.len() == plane {
            for _ in 0..3 {
                data.extend(img.iter().map(|&x| T::from_f64(x as f64)));
            }
        } else if img.len() == 3 * plane {
            data.extend(img.iter().map(|&x| T::from_f64(x as f64)));
        } else {
            return Err(Error::Config(format!("image has {} values, expected {res} x {res} gray or 3 channels", img.len())));
        }
    }
    Tensor::new(vec![images.len(), 3, res, res], data)
}

/// Raw coordinates, then for each coordinate `sin, cos` at `2^i * pi * x`
/// for i = 0..10.
pub fn fourier_encode(x: [f64; 3]) -> [f64; FOURIER_DIM] {
    let mut out = [0.0; FOURIER_DIM];
    out[..3].copy_from_slice(&x);
    for (c, &v) in x.iter().enumerate() {
        for i in 0..FOURIER_FREQS {
            let a = (1u32 << i) as f64 * PI * v;
            let base = 3 + c * 2 * FOURIER_FREQS + 2 * i;
            out[base] = a.sin();
            out[base + 1] = a.cos();
        }
    }
    out
}

/// World points at the patch centres of one view, with a validity flag.
/// Background patches get the origin and `false`.
pub fn patch_points(depth: &[f32], pose: &CameraPose, res: usize) -> (Vec<[f64; 3]>, Vec<bool>) {
    let grid = res / DOWNSCALE;
    let mut pts = Vec::with_capacity(grid * grid);
    let mut valid = Vec::with_capacity(grid * grid);
    for p in 0..grid * grid {
        let (col, row) = patch_center_pixel(p, grid, DOWNSCALE);
        let d = depth[row * res + col] as f64;
        let (u, v) = pixel_center(col, row);
        match unproject(u, v, d, pose) {
            Ok(x) => {
                pts.push([x.x, x.y, x.z]);
                valid.push(true);
            }
            Err(_) => {
                pts.push([0.0; 3]);
                valid.push(false);
            }
        }
    }
    (pts, valid)
}

/// Foreground patches of a query image (centre pixel lit).
pub fn query_foreground(gray: &[f32], res: usize) -> Vec<bool> {
    let grid = res / DOWNSCALE;
    (0..grid * grid)
        .map(|p| {
            let (col, row) = patch_center_pixel(p, grid, DOWNSCALE);
            gray[row * res + col] > 0.0
        })
        .collect()
}

/// Row `i` of the result is the similarity of `zq` row `i` to every `zv` row.
pub fn similarity_matrix<T: Real>(zq: &[T], zv: &[T], d: usize) -> Result<Vec<f64>> {
    if d == 0 || zq.len() % d != 0 || zv.len() % d != 0 {
        return Err(Error::Shape {
            op: "similarity_matrix",
            detail: format!("{} and {} values with d = {d}", zq.len(), zv.len()),
        });
    }
    let a: Vec<f64> = zq.iter().map(|x| x.as_f64()).collect();
    let b: Vec<f64> = zv.iter().map(|x| x.as_f64()).collect();
    let (nq, nv) = (a.len() / d, b.len() / d);
    let mut m = vec![0.0; nq * nv];
    f64::gemm(false, true, nq, nv, d, 1.0, &a, &b, 0.0, &mut m);
    Ok(m)
}

/// Indices of the `k` largest valid entries of `row`, ties to the lowest index.
pub fn top_k(row: &[f64], valid: Option<&[bool]>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| valid.is_none_or(|v| v[j])).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Columns kept for each row of `m`: the top `k` valid entries, ascending.
/// Rows listed in `free_rows` keep every valid column.
pub fn top_k_rows(m: &[f64], rows: usize, cols: usize, k: usize, valid: Option<&[bool]>, free_rows: &[usize]) -> Vec<Vec<usize>> {
    (0..rows)
        .map(|i| {
            let mut keep: Vec<usize> = if free_rows.contains(&i) {
                (0..cols).filter(|&j| valid.is_none_or(|v| v[j])).collect()
            } else {
                top_k(&m[i * cols..(i + 1) * cols], valid, k)
            };
            keep.sort_unstable();
            keep
        })
        .collect()
}

/// Single-head top-k sparse cross-attention: row `i` of `q` attends to the
/// `k` rows of `kmat`/`v` with the largest `m[i]` entries; logits are scaled
/// by `1/sqrt(d)`.
pub fn tkca<T: Real>(g: &mut Graph<T>, q: Var, kmat: Var, v: Var, m: &[f64], k: usize) -> Result<Var> {
    let (nq, nv) = (g.shape(q)[0], g.shape(kmat)[0]);
    if m.len() != nq * nv {
        return Err(Error::Shape {
            op: "tkca",
            detail: format!("M has {} entries for {nq} x {nv}", m.len()),
        });
    }
    let k = TopK::K(k).resolve(nv)?;
    let idx = top_k_rows(m, nq, nv, k, None, &[]);
    g.sparse_attention(q, kmat, v, 1, Rc::new(idx))
}

/// Self-attention with query/key/value/output projections.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl SelfAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        let g = 3f64.sqrt();
        Ok(SelfAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, g, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, true, g, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true, g, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, true, g, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, heads: usize, span: Rc<Vec<Vec<usize>>>) -> Result<Var> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let a = g.sparse_attention(q, k, v, heads, span)?;
        self.o.forward(g, store, a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgaBlock {
    pub alpha: Linear,
    pub sa: SelfAttention,
    pub sa_norm: Norm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub norm1: Norm,
    pub ffn: Mlp,
    pub norm2: Norm,
}

/// Encoder blocks of the baseline: self-attention and FFN, post-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct SaBlock {
    pub sa: SelfAttention,
    pub norm1: Norm,
    pub ffn: Mlp,
    pub norm2: Norm,
}

/// Self-attention span for `groups` independent runs of `len` tokens.
pub fn block_rows(groups: usize, len: usize) -> Vec<Vec<usize>> {
    (0..groups * len)
        .map(|r| {
            let start = r / len * len;
            (start..start + len).collect()
        })
        .collect()
}

/// Appends the token row after each query's patch rows.
fn interleave_token<T: Real>(g: &mut Graph<T>, fq: Var, tok: Var, queries: usize, nq: usize) -> Result<Var> {
    let mut parts = Vec::with_capacity(2 * queries);
    for q in 0..queries {
        parts.push(g.slice_rows(fq, q * nq, nq)?);
        parts.push(tok);
    }
    g.concat_rows(&parts)
}

fn token_rows(queries: usize, nq: usize) -> Vec<usize> {
    (0..queries).map(|q| q * (nq + 1) + nq).collect()
}

/// Prediction heads on the final token state.
#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub cls: Linear,
    pub bbox: Mlp,
}

impl Heads {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Heads {
            cls: Linear::new(store, "head.cls", d, 1, true, 1.0, rng)?,
            bbox: Mlp::new(store, "head.bbox", &[d, d, d, d, 4], rng)?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, tok: Var) -> Result<(Var, Var)> {
        let logits = self.cls.forward(g, store, tok)?;
        let b = self.bbox.forward(g, store, tok)?;
        Ok((logits, g.sigmoid(b)))
    }
}

/// Outputs for a group of queries: `logits` is `[Q, 1]`, `bbox` is `[Q, 4]`
/// normalized `(cx, cy, w, h)`.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    pub logits: Var,
    pub bbox: Var,
}

/// Parameter handles of the full model. Values live in a separate
/// [`ParamStore`] so one layout serves both precisions.
#[derive(Clone, Debug, PartialEq)]
pub struct CmtParams {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub pe: Mlp,
    pub beta: Mlp,
    pub tok: ParamId,
    pub blocks: Vec<CgaBlock>,
    pub heads: Heads,
}

/// Inputs for one reference shape and the queries compared against it.
#[derive(Clone, Debug)]
pub struct GroupInput<'a> {
    /// Query images, gray or 3 x H x W.
    pub queries: Vec<&'a [f32]>,
    /// Reference view images, gray or 3 x H x W.
    pub views: Vec<&'a [f32]>,
    /// World points of every view patch, view-major.
    pub points: Vec<[f64; 3]>,
    /// False for background view patches.
    pub valid: Vec<bool>,
}

/// Forward state needed by the alignment losses and diagnostics.
pub struct GroupForward {
    pub pred: Prediction,
    /// Encoder tokens, queries first then views.
    pub features: Var,
    /// Unit-norm projected tokens, same layout as `features`.
    pub z: Var,
    /// Similarity of each query's patches to all view patches.
    pub m: Vec<Vec<f64>>,
}

impl CmtParams {
    pub fn new<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let encoder = Encoder::new(store, cfg, rng)?;
        let pe = Mlp::new(store, "pe", &[FOURIER_DIM, d, d], rng)?;
        let beta = Mlp::new(store, "beta", &[d, d, d, d, d], rng)?;
        let tok = store.add_uniform("tok", vec![1, d], 0.5, rng)?;
        let g = 3f64.sqrt();
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let n = |s: &str| format!("cga{b}.{s}");
            blocks.push(CgaBlock {
                alpha: Linear::new(store, &n("alpha"), 2 * d, d, true, g, rng)?,
                sa: SelfAttention::new(store, &n("sa"), d, rng)?,
                sa_norm: Norm::new(store, &n("sa_norm"), d)?,
                wq: Linear::new(store, &n("wq"), d, d, false, g, rng)?,
                wk: Linear::new(store, &n("wk"), d, d, false, g, rng)?,
                wv: Linear::new(store, &n("wv"), d, d, false, g, rng)?,
                wo: Linear::new(store, &n("wo"), d, d, true, g, rng)?,
                norm1: Norm::new(store, &n("norm1"), d)?,
                ffn: Mlp::new(store, &n("ffn"), &[d, cfg.ffn_mult * d, d], rng)?,
                norm2: Norm::new(store, &n("norm2"), d)?,
            });
        }
        let heads = Heads::new(store, d, rng)?;
        Ok(CmtParams {
            cfg: cfg.clone(),
            encoder,
            pe,
            beta,
            tok,
            blocks,
            heads,
        })
    }

    /// Ids of the projector parameters.
    pub fn beta_ids(&self) -> Vec<ParamId> {
        self.beta.layers.iter().flat_map(|l| std::iter::once(l.w).chain(l.b)).collect()
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: &[&[f32]]) -> Result<Var> {
        let batch = image_batch(images, self.cfg.resolution)?;
        self.encoder.forward(g, store, batch)
    }

    /// Positional encodings `[n, d]` of world points.
    pub fn pe3d<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, points: &[[f64; 3]]) -> Result<Var> {
        let data: Vec<f64> = points.iter().flat_map(|&p| fourier_encode(p)).collect();
        let x = g.constant(Tensor::from_f64(vec![points.len(), FOURIER_DIM], &data)?);
        self.pe.forward(g, store, x)
    }

    /// Unit-norm view-agnostic features, one row per input row.
    pub fn project_beta<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let z = self.beta.forward(g, store, f)?;
        g.l2_normalize_rows(z)
    }

    /// Correspondence-guided attention over `queries` stacked query feature
    /// maps `fq` (`[queries * nq, d]`) against view features `fv` and their
    /// positional encodings `pv` (`[nv, d]`). `span[r]` lists the view rows
    /// that row `r` of the `queries * (nq + 1)` query tokens attends to.
    pub fn cga<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        fq: Var,
        fv: Var,
        pv: Var,
        span: Rc<Vec<Vec<usize>>>,
        queries: usize,
    ) -> Result<Prediction> {
        let nq = self.cfg.patches();
        let heads = self.cfg.heads;
        let tok = g.param(store, self.tok);
        let mut x = interleave_token(g, fq, tok, queries, nq)?;
        let sa_span = Rc::new(block_rows(queries, nq + 1));
        let fp = g.concat_cols(&[fv, pv])?;
        for blk in &self.blocks {
            let fvb = blk.alpha.forward(g, store, fp)?;
            let sa = blk.sa.forward(g, store, x, heads, sa_span.clone())?;
            let xs = g.add(x, sa)?;
            let xs = blk.sa_norm.forward(g, store, xs)?;
            let q = blk.wq.forward(g, store, xs)?;
            let k = blk.wk.forward(g, store, fvb)?;
            let v = blk.wv.forward(g, store, fvb)?;
            let a = g.sparse_attention(q, k, v, heads, span.clone())?;
            let o = blk.wo.forward(g, store, a)?;
            let o = g.add(o, q)?;
            let o = blk.norm1.forward(g, store, o)?;
            let f = blk.ffn.forward(g, store, o)?;
            let o2 = g.add(f, o)?;
            x = blk.norm2.forward(g, store, o2)?;
        }
        let t = g.gather_rows(x, &token_rows(queries, nq))?;
        let (logits, bbox) = self.heads.forward(g, store, t)?;
        Ok(Prediction { logits, bbox })
    }

    /// Full forward for one reference shape and its queries.
    pub fn forward_group<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: &GroupInput<'_>) -> Result<GroupForward> {
        let nq = self.cfg.patches();
        let (qn, vn) = (input.queries.len(), input.views.len());
        let nv = vn * nq;
        if qn == 0 || vn == 0 || input.points.len() != nv || input.valid.len() != nv {
            return Err(Error::Shape {
                op: "forward_group",
                detail: format!("{qn} queries, {vn} views, {} points, {} flags", input.points.len(), input.valid.len()),
            });
        }
        let k = self.cfg.k.resolve(nv)?;
        let images: Vec<&[f32]> = input.queries.iter().chain(&input.views).copied().collect();
        let features = self.encode(g, store, &images)?;
        let z = self.project_beta(g, store, features)?;
        let fq = g.slice_rows(features, 0, qn * nq)?;
        let fv = g.slice_rows(features, qn * nq, nv)?;
        let pv = self.pe3d(g, store, &input.points)?;

        let d = self.cfg.d;
        let zd = g.data(z);
        let zv = &zd[qn * nq * d..];
        // no valid column at all: fall back to every column
        let valid = input.valid.iter().any(|&v| v).then_some(input.valid.as_slice());
        let rows = nq + 1;
        let mut span = Vec::with_capacity(qn * rows);
        let mut m_all = Vec::with_capacity(qn);
        for q in 0..qn {
            let zq = &zd[q * nq * d..(q + 1) * nq * d];
            let mut m = similarity_matrix(zq, zv, d)?;
            // the token row has no similarity row of its own
            m.extend(std::iter::repeat_n(0.0, nv));
            span.extend(top_k_rows(&m, rows, nv, k, valid, &[nq]));
            m.truncate(nq * nv);
            m_all.push(m);
        }
        let pred = self.cga(g, store, fq, fv, pv, Rc::new(span), qn)?;
        Ok(GroupForward {
            pred,
            features,
            z,
            m: m_all,
        })
    }
}

/// Query-only baseline: shared-style encoder, self-attention blocks, token classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineParams {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub tok: ParamId,
    pub blocks: Vec<SaBlock>,
    pub heads: Heads,
}

impl BaselineParams {
    pub fn new<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let encoder = Encoder::new(store, cfg, rng)?;
        let tok = store.add_uniform("tok", vec![1, d], 0.5, rng)?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let n = |s: &str| format!("sa{b}.{s}");
            blocks.push(SaBlock {
                sa: SelfAttention::new(store, &n("sa"), d, rng)?,
                norm1: Norm::new(store, &n("norm1"), d)?,
                ffn: Mlp::new(store, &n("ffn"), &[d, cfg.ffn_mult * d, d], rng)?,
                norm2: Norm::new(store, &n("norm2"), d)?,
            });
        }
        let heads = Heads::new(store, d, rng)?;
        Ok(BaselineParams {
            cfg: cfg.clone(),
            encoder,
            tok,
            blocks,
            heads,
        })
    }

    /// Predictions for query images alone; no reference input exists.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, queries: &[&[f32]]) -> Result<Prediction> {
        let nq = self.cfg.patches();
        let qn = queries.len();
        let fq = self.encoder.forward(g, store, image_batch(queries, self.cfg.resolution)?)?;
        let tok = g.param(store, self.tok);
        let mut x = interleave_token(g, fq, tok, qn, nq)?;
        let span = Rc::new(block_rows(qn, nq + 1));
        for blk in &self.blocks {
            let sa = blk.sa.forward(g, store, x, self.cfg.heads, span.clone())?;
            let s = g.add(x, sa)?;
            let o = blk.norm1.forward(g, store, s)?;
            let f = blk.ffn.forward(g, store, o)?;
            let s = g.add(f, o)?;
            x = blk.norm2.forward(g, store, s)?;
        }
        let t = g.gather_rows(x, &token_rows(qn, nq))?;
        let (logits, bbox) = self.heads.forward(g, store, t)?;
        Ok(Prediction { logits, bbox })
    }
}
