//! Network building blocks: same-padding convolution, fully connected
//! layers, pooling, the gradient reversal layer, and parameter storage.

use std::collections::BTreeMap;
use std::fmt;

use m2dan_tensor::kernels::{gemm, Layout};
use m2dan_tensor::{BackwardCtx, CustomOp, ReduceKind, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four parameter groups of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Discriminator.
    Gd,
    /// Feature extractor.
    Gf,
    /// Multi-scale module.
    Gm,
    /// Classifier.
    Gy,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::Gd, ParamGroup::Gf, ParamGroup::Gm, ParamGroup::Gy];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Gd => "gd",
            ParamGroup::Gf => "gf",
            ParamGroup::Gm => "gm",
            ParamGroup::Gy => "gy",
        }
    }

    pub fn of_path(path: &str) -> Option<Self> {
        let head = path.split('.').next()?;
        Self::ALL.into_iter().find(|g| g.prefix() == head)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// Named trainable tensors, iterated in lexicographic path order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

/// Tape handles for every parameter of a [`ParamSet`] in one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::InvalidSpec(format!("unknown parameter {path}")))
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; the path must be new and start with a group prefix.
    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor) -> Result<()> {
        let path = path.into();
        if ParamGroup::of_path(&path).is_none() {
            return Err(Error::InvalidSpec(format!(
                "parameter path {path} is outside the gf/gm/gy/gd groups"
            )));
        }
        if self.params.contains_key(&path) {
            return Err(Error::InvalidSpec(format!("duplicate parameter path {path}")));
        }
        self.params.insert(path, tensor);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.params.get_mut(path)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn group(&self, group: ParamGroup) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter()
            .filter(move |(p, _)| ParamGroup::of_path(p) == Some(group))
    }

    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn count_group(&self, group: ParamGroup) -> usize {
        self.group(group).map(|(_, t)| t.numel()).sum()
    }

    /// Registers every parameter as a leaf on `tape`.
    ///
    /// With `trainable == false` the leaves are constants, which is what
    /// evaluation wants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(t.shape(), t.data().to_vec())
                        .expect("parameters have valid shapes")
                };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Copies gradients from the tape into the parameters. A bound parameter
    /// that the loss never reached gets an explicit zero gradient.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &BoundParams) -> Result<()> {
        for (path, t) in self.params.iter_mut() {
            let Some(&v) = bound.vars.get(path) else {
                continue;
            };
            match tape.grad(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }
}

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean normal with standard deviation `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Zeros,
}

/// One entry of an architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Mixes a base seed with a stream tag into an independent 64-bit seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ fnv1a(tag.as_bytes());
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draws every parameter from its own seeded stream, so a tensor's values
/// depend only on `(seed, path, shape)` and not on the other entries.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> Result<ParamSet> {
    let mut set = ParamSet::new();
    for spec in specs {
        let numel: usize = spec.shape.iter().product();
        if spec.shape.is_empty() || numel == 0 {
            return Err(Error::InvalidSpec(format!(
                "parameter {} has empty shape {:?}",
                spec.path, spec.shape
            )));
        }
        let data = match spec.init {
            Init::Zeros => vec![0.0; numel],
            Init::He { fan_in } => {
                if fan_in == 0 {
                    return Err(Error::InvalidSpec(format!("{} has zero fan-in", spec.path)));
                }
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .map_err(|e| Error::InvalidSpec(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &spec.path));
                (0..numel).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        set.insert(spec.path.clone(), Tensor::new(&spec.shape, data, true)?)?;
    }
    Ok(set)
}

fn shape4(tape: &Tape, v: Var, what: &str) -> Result<[usize; 4]> {
    match *tape.shape(v) {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(TensorError::ShapeMismatch(format!("{what} must be rank 4, got {s:?}")).into()),
    }
}

#[derive(Debug)]
struct Conv2dOp {
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    /// Per-sample im2col matrices `[n][c_in*k*k][h*w]`; empty when the
    /// weight needs no gradient.
    cols: Vec<f64>,
}

/// Unfolds one `[c, h, w]` image into `cols [c*k*k, h*w]` (zero padded).
fn im2col(src: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..c {
        let img = &src[ci * plane..(ci + 1) * plane];
        for di in 0..k {
            for dj in 0..k {
                let row = (ci * k + di) * k + dj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dx = dj as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let line = &mut dst[y * w..(y + 1) * w];
                    let yy = y as isize + di as isize - pad;
                    if yy < 0 || yy >= h as isize || x_lo >= x_hi {
                        line.fill(0.0);
                        continue;
                    }
                    line[..x_lo].fill(0.0);
                    line[x_hi..].fill(0.0);
                    let s0 = (yy as usize * w) as isize + dx;
                    line[x_lo..x_hi].copy_from_slice(
                        &img[(s0 + x_lo as isize) as usize..(s0 + x_hi as isize) as usize],
                    );
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto a `[c, h, w]` image.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    out.fill(0.0);
    for ci in 0..c {
        let img = &mut out[ci * plane..(ci + 1) * plane];
        for di in 0..k {
            for dj in 0..k {
                let row = (ci * k + di) * k + dj;
                let src = &cols[row * plane..(row + 1) * plane];
                let dx = dj as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let yy = y as isize + di as isize - pad;
                    if yy < 0 || yy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let d0 = (yy as usize * w) as isize + dx;
                    let dst = &mut img[(d0 + x_lo as isize) as usize..(d0 + x_hi as isize) as usize];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

impl CustomOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let Conv2dOp {
            n,
            c_in,
            c_out,
            h,
            w,
            k,
            ..
        } = *self;
        let plane = h * w;
        let kk = c_in * k * k;
        let weight = ctx.inputs[1];
        let d_input = ctx.needs_grad[0].then(|| {
            let mut dx = vec![0.0; n * c_in * plane];
            let mut dcols = vec![0.0; kk * plane];
            for ni in 0..n {
                let g = &grad_out[ni * c_out * plane..(ni + 1) * c_out * plane];
                gemm(kk, c_out, plane, weight, Layout::Transposed, g, Layout::Normal, 0.0, &mut dcols);
                col2im(&dcols, c_in, h, w, k, &mut dx[ni * c_in * plane..(ni + 1) * c_in * plane]);
            }
            dx
        });
        let d_weight = ctx.needs_grad[1].then(|| {
            let mut dw = vec![0.0; c_out * kk];
            for ni in 0..n {
                let g = &grad_out[ni * c_out * plane..(ni + 1) * c_out * plane];
                let cols = &self.cols[ni * kk * plane..(ni + 1) * kk * plane];
                gemm(c_out, plane, kk, g, Layout::Normal, cols, Layout::Transposed, 1.0, &mut dw);
            }
            dw
        });
        let d_bias = ctx.needs_grad[2].then(|| {
            let mut db = vec![0.0; c_out];
            for (i, row) in grad_out.chunks(plane).enumerate() {
                db[i % c_out] += row.iter().sum::<f64>();
            }
            db
        });
        vec![d_input, d_weight, d_bias]
    }
}

/// Same-padding 2D cross-correlation with stride 1.
///
/// `input` is `[N, C_in, H, W]`, `weight` is `[C_out, C_in, k, k]` with odd
/// `k`, and `bias` is `[C_out]`. Zero padding of `(k - 1) / 2` keeps the
/// spatial size.
pub fn conv2d(tape: &mut Tape, input: Var, weight: Var, bias: Var) -> Result<Var> {
    let [n, c_in, h, w] = shape4(tape, input, "conv2d input")?;
    let [c_out, wc_in, kh, kw] = shape4(tape, weight, "conv2d weight")?;
    if kh != kw || kh % 2 == 0 {
        return Err(Error::UnsupportedKernel(if kh % 2 == 0 { kh } else { kw }));
    }
    if wc_in != c_in {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d input has {c_in} channels but weight expects {wc_in}"
        ))
        .into());
    }
    if tape.shape(bias) != [c_out] {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d bias {:?} for {c_out} output channels",
            tape.shape(bias)
        ))
        .into());
    }
    let k = kh;
    let plane = h * w;
    let kk = c_in * k * k;
    let keep_cols = tape.requires_grad(weight);
    let x = tape.value(input);
    let wv = tape.value(weight);
    let b = tape.value(bias);
    let mut out = Vec::with_capacity(n * c_out * plane);
    for _ in 0..n {
        for &bo in b {
            out.extend(std::iter::repeat_n(bo, plane));
        }
    }
    let mut cols = vec![0.0; if keep_cols { n * kk * plane } else { kk * plane }];
    for ni in 0..n {
        let sample_cols = if keep_cols {
            &mut cols[ni * kk * plane..(ni + 1) * kk * plane]
        } else {
            &mut cols[..]
        };
        im2col(&x[ni * c_in * plane..(ni + 1) * c_in * plane], c_in, h, w, k, sample_cols);
        gemm(
            c_out,
            kk,
            plane,
            wv,
            Layout::Normal,
            sample_cols,
            Layout::Normal,
            1.0,
            &mut out[ni * c_out * plane..(ni + 1) * c_out * plane],
        );
    }
    if !keep_cols {
        cols = Vec::new();
    }
    let op = Conv2dOp {
        n,
        c_in,
        c_out,
        h,
        w,
        k,
        cols,
    };
    Ok(tape.custom(&[input, weight, bias], &[n, c_out, h, w], out, Box::new(op))?)
}

/// `input · weight + bias` for `input [N, D_in]`, `weight [D_in, D_out]`.
pub fn linear(tape: &mut Tape, input: Var, weight: Var, bias: Var) -> Result<Var> {
    let xs = tape.shape(input).to_vec();
    let ws = tape.shape(weight).to_vec();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || tape.shape(bias) != [ws[1]] {
        return Err(TensorError::ShapeMismatch(format!(
            "linear with input {xs:?}, weight {ws:?}, bias {:?}",
            tape.shape(bias)
        ))
        .into());
    }
    let xw = tape.matmul(input, weight)?;
    let ones = tape.constant(&[xs[0], 1], vec![1.0; xs[0]])?;
    let b_row = tape.reshape(bias, &[1, ws[1]])?;
    let b = tape.matmul(ones, b_row)?;
    Ok(tape.add(xw, b)?)
}

/// Per-channel spatial mean: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool(tape: &mut Tape, input: Var) -> Result<Var> {
    shape4(tape, input, "global_avg_pool input")?;
    Ok(tape.reduce(ReduceKind::Mean, input, Some(&[2, 3]))?)
}

#[derive(Debug)]
struct AvgPool2Op {
    nc: usize,
    h: usize,
    w: usize,
}

impl CustomOp for AvgPool2Op {
    fn name(&self) -> &'static str {
        "avg_pool2"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        if !ctx.needs_grad[0] {
            return vec![None];
        }
        let (oh, ow) = (self.h / 2, self.w / 2);
        let mut g = vec![0.0; self.nc * self.h * self.w];
        for p in 0..self.nc {
            for y in 0..oh {
                for x in 0..ow {
                    let v = 0.25 * grad_out[(p * oh + y) * ow + x];
                    let base = p * self.h * self.w;
                    g[base + 2 * y * self.w + 2 * x] = v;
                    g[base + 2 * y * self.w + 2 * x + 1] = v;
                    g[base + (2 * y + 1) * self.w + 2 * x] = v;
                    g[base + (2 * y + 1) * self.w + 2 * x + 1] = v;
                }
            }
        }
        vec![Some(g)]
    }
}

/// 2×2 average downsampling with stride 2; an odd trailing row or column is
/// dropped.
pub fn avg_pool2(tape: &mut Tape, input: Var) -> Result<Var> {
    let [n, c, h, w] = shape4(tape, input, "avg_pool2 input")?;
    if h < 2 || w < 2 {
        return Err(TensorError::ShapeMismatch(format!(
            "avg_pool2 needs spatial size at least 2x2, got {h}x{w}"
        ))
        .into());
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = tape.value(input);
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let i = base + 2 * y * w + 2 * xo;
                out[(p * oh + y) * ow + xo] = 0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]);
            }
        }
    }
    let op = AvgPool2Op { nc: n * c, h, w };
    Ok(tape.custom(&[input], &[n, c, oh, ow], out, Box::new(op))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GrlMode {
    #[default]
    Constant,
    /// Linear ramp from 0 to alpha over `ramp_length` steps.
    Ramp,
}

/// Gradient reversal coefficient schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrlCoeff {
    pub mode: GrlMode,
    pub alpha: f64,
    pub ramp_length: Option<u64>,
}

impl GrlCoeff {
    pub fn constant(alpha: f64) -> Self {
        Self {
            mode: GrlMode::Constant,
            alpha,
            ramp_length: None,
        }
    }

    pub fn ramp(alpha: f64, ramp_length: u64) -> Self {
        Self {
            mode: GrlMode::Ramp,
            alpha,
            ramp_length: Some(ramp_length),
        }
    }

    /// Coefficient in effect at `step`, always within `[0, alpha]`.
    pub fn at(&self, step: u64) -> f64 {
        let alpha = self.alpha.max(0.0);
        match (self.mode, self.ramp_length) {
            (GrlMode::Ramp, Some(len)) if len > 0 => alpha * (step as f64 / len as f64).min(1.0),
            _ => alpha,
        }
    }
}

#[derive(Debug)]
struct GrlOp {
    coeff: f64,
}

impl CustomOp for GrlOp {
    fn name(&self) -> &'static str {
        "grl"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let c = self.coeff;
        vec![ctx.needs_grad[0].then(|| grad_out.iter().map(|g| -c * g).collect())]
    }
}

/// Gradient reversal: identity forward, upstream gradient times `-coeff`
/// backward.
pub fn grl_with(tape: &mut Tape, input: Var, coeff: f64) -> Result<Var> {
    let shape = tape.shape(input).to_vec();
    let value = tape.value(input).to_vec();
    Ok(tape.custom(&[input], &shape, value, Box::new(GrlOp { coeff }))?)
}

/// [`grl_with`] using the schedule's coefficient at `step`.
pub fn grl(tape: &mut Tape, input: Var, coeff: &GrlCoeff, step: u64) -> Result<Var> {
    grl_with(tape, input, coeff.at(step))
}
