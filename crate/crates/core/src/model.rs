//! Desk-scale embedding model and its three heads.
//!
//! The spectrogram is cut into a `grid_t × grid_f` grid of patches. Each
//! patch goes through the same two-layer perceptron, giving the spatial
//! embedding; its average over the grid is the mean embedding. Heads:
//!
//! * linear: `W·mean + b` over the class vocabulary,
//! * prototype: per class, max over its prototypes and all grid cells of the
//!   prototype/cell similarity. Gradients stop at the spatial embedding.
//! * source: rank-`r` factorized projection of the mean embedding onto the
//!   training recordings.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::LogMelSpectrogram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Dot,
    Cosine,
}

impl std::str::FromStr for Similarity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Self::Dot),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown similarity {other:?} (dot|cosine)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub frames: usize,
    pub mel_bins: usize,
    pub grid_t: usize,
    pub grid_f: usize,
    pub hidden: usize,
    pub d: usize,
    pub num_classes: usize,
    pub prototypes_per_class: usize,
    pub source_rank: usize,
    pub num_sources: usize,
    pub similarity: Similarity,
}

impl ModelDims {
    pub fn new(num_classes: usize, num_sources: usize) -> Self {
        Self {
            frames: 500,
            mel_bins: 128,
            grid_t: 5,
            grid_f: 3,
            hidden: 64,
            d: 64,
            num_classes,
            prototypes_per_class: 4,
            source_rank: 16,
            num_sources,
            similarity: Similarity::Dot,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_t == 0 || self.grid_f == 0 || self.frames % self.grid_t != 0 {
            return Err(Error::Config(format!(
                "grid_t {} must divide {} frames",
                self.grid_t, self.frames
            )));
        }
        if self.mel_bins < self.grid_f {
            return Err(Error::Config("more frequency cells than mel bins".into()));
        }
        for (name, v) in [
            ("hidden", self.hidden),
            ("d", self.d),
            ("num_classes", self.num_classes),
            ("prototypes_per_class", self.prototypes_per_class),
            ("source_rank", self.source_rank),
            ("num_sources", self.num_sources),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        if self.param_count().is_none() || self.grid_t.checked_mul(self.grid_f).and_then(|c| c.checked_mul(self.d)).is_none() {
            return Err(Error::Config("model dims overflow".into()));
        }
        Ok(())
    }

    /// Total number of parameters, or `None` if it does not fit in `usize`.
    pub fn param_count(&self) -> Option<usize> {
        let base = self.mel_bins / self.grid_f;
        let max_bins = self.mel_bins - base * (self.grid_f - 1);
        let p = (self.frames / self.grid_t).checked_mul(max_bins)?;
        let terms = [
            self.hidden.checked_mul(p)?,
            self.hidden,
            self.d.checked_mul(self.hidden)?,
            self.d,
            self.num_classes.checked_mul(self.d)?,
            self.num_classes,
            self.num_classes.checked_mul(self.prototypes_per_class)?.checked_mul(self.d)?,
            self.d.checked_mul(self.source_rank)?,
            self.source_rank.checked_mul(self.num_sources)?,
        ];
        terms.iter().try_fold(0usize, |acc, &t| acc.checked_add(t))
    }

    pub fn cells(&self) -> usize {
        self.grid_t * self.grid_f
    }

    pub fn patch_frames(&self) -> usize {
        self.frames / self.grid_t
    }

    /// Mel-bin range of frequency column `col`; the last column takes the remainder.
    pub fn patch_bins(&self, col: usize) -> std::ops::Range<usize> {
        let base = self.mel_bins / self.grid_f;
        let start = col * base;
        let end = if col + 1 == self.grid_f { self.mel_bins } else { start + base };
        start..end
    }

    pub fn max_patch_bins(&self) -> usize {
        self.patch_bins(self.grid_f - 1).len()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_frames() * self.max_patch_bins()
    }

    fn block_lens(&self) -> [usize; 9] {
        let p = self.patch_len();
        [
            self.hidden * p,
            self.hidden,
            self.d * self.hidden,
            self.d,
            self.num_classes * self.d,
            self.num_classes,
            self.num_classes * self.prototypes_per_class * self.d,
            self.d * self.source_rank,
            self.source_rank * self.num_sources,
        ]
    }
}

pub const BLOCK_NAMES: [&str; 9] = [
    "embed.w1", "embed.b1", "embed.w2", "embed.b2", "linear.w", "linear.b", "prototype.p", "source.w1",
    "source.w2",
];

/// All trainable tensors, row-major:
/// `w1: hidden × patch_len`, `w2: d × hidden`, `lin_w: C × d`,
/// `protos: C × P × d`, `src_w1: d × r`, `src_w2: r × S`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlocks {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub lin_w: Vec<f64>,
    pub lin_b: Vec<f64>,
    pub protos: Vec<f64>,
    pub src_w1: Vec<f64>,
    pub src_w2: Vec<f64>,
}

impl ParamBlocks {
    pub fn zeros(dims: &ModelDims) -> Self {
        let l = dims.block_lens();
        Self {
            w1: vec![0.0; l[0]],
            b1: vec![0.0; l[1]],
            w2: vec![0.0; l[2]],
            b2: vec![0.0; l[3]],
            lin_w: vec![0.0; l[4]],
            lin_b: vec![0.0; l[5]],
            protos: vec![0.0; l[6]],
            src_w1: vec![0.0; l[7]],
            src_w2: vec![0.0; l[8]],
        }
    }

    pub fn as_slices(&self) -> [&[f64]; 9] {
        [
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.lin_w,
            &self.lin_b,
            &self.protos,
            &self.src_w1,
            &self.src_w2,
        ]
    }

    pub fn as_mut_slices(&mut self) -> [&mut [f64]; 9] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.lin_w,
            &mut self.lin_b,
            &mut self.protos,
            &mut self.src_w1,
            &mut self.src_w2,
        ]
    }

    /// Indices of the blocks that belong to the embedder.
    pub const EMBEDDER: std::ops::Range<usize> = 0..4;

    pub fn add_assign(&mut self, other: &ParamBlocks) {
        for (a, b) in self.as_mut_slices().into_iter().zip(other.as_slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for block in self.as_mut_slices() {
            block.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.as_slices().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

/// Parameters plus their shape description. `version` changes on every update
/// so that traces from an older forward pass can be detected.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub blocks: ParamBlocks,
    version: u64,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.blocks == other.blocks
    }
}

impl ModelParams {
    pub fn from_blocks(dims: ModelDims, blocks: ParamBlocks) -> Result<Self> {
        dims.validate()?;
        let want = dims.block_lens();
        for ((name, have), want) in BLOCK_NAMES.iter().zip(blocks.as_slices()).zip(want) {
            if have.len() != want {
                return Err(Error::Shape(format!("{name}: {} values, expected {want}", have.len())));
            }
        }
        Ok(Self { dims, blocks, version: 0 })
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mark parameters as changed; outstanding traces become stale.
    pub fn touch(&mut self) {
        self.version += 1;
    }

    fn proto(&self, class: usize, j: usize) -> &[f64] {
        let d = self.dims.d;
        let off = (class * self.dims.prototypes_per_class + j) * d;
        &self.blocks.protos[off..off + d]
    }
}

/// He-style uniform init (bound `sqrt(6 / fan_in)`), zero biases and unit-norm prototypes.
pub fn init_params<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<ModelParams> {
    dims.validate()?;
    let mut blocks = ParamBlocks::zeros(&dims);
    let mut fill = |v: &mut [f64], fan_in: usize| {
        let bound = (6.0 / fan_in as f64).sqrt();
        v.iter_mut().for_each(|x| *x = rng.random_range(-bound..bound));
    };
    fill(&mut blocks.w1, dims.patch_len());
    fill(&mut blocks.w2, dims.hidden);
    fill(&mut blocks.lin_w, dims.d);
    fill(&mut blocks.protos, dims.d);
    fill(&mut blocks.src_w1, dims.d);
    fill(&mut blocks.src_w2, dims.source_rank);
    for row in blocks.protos.chunks_mut(dims.d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    ModelParams::from_blocks(dims, blocks)
}

/// Spatial embedding (`cells × d`, cell index `t * grid_f + f`) and its mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    pub grid_t: usize,
    pub grid_f: usize,
    pub d: usize,
    pub spatial: Vec<f64>,
    pub mean: Vec<f64>,
}

impl EmbeddingPair {
    pub fn cell(&self, t: usize, f: usize) -> &[f64] {
        let i = (t * self.grid_f + f) * self.d;
        &self.spatial[i..i + self.d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub linear: Vec<f64>,
    pub prototype: Vec<f64>,
    pub source: Vec<f64>,
}

/// Intermediates from [`forward`] needed for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    version: u64,
    patches: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    /// Dropout scale factors (0 or 1/(1-p)); `None` in inference mode.
    mean_mask: Option<Vec<f64>>,
    head_mean: Vec<f64>,
    head_spatial: Vec<f64>,
    src_hidden: Option<Vec<f64>>,
    proto_argmax: Option<Vec<(usize, usize)>>,
}

/// Dot product with four interleaved partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn dropout_mask(len: usize, rate: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

fn extract_patches(spec: &LogMelSpectrogram, dims: &ModelDims) -> Vec<f64> {
    let pf = dims.patch_frames();
    let width = dims.max_patch_bins();
    let mut out = vec![0.0; dims.cells() * dims.patch_len()];
    for t in 0..dims.grid_t {
        for f in 0..dims.grid_f {
            let cell = t * dims.grid_f + f;
            let bins = dims.patch_bins(f);
            let base = cell * dims.patch_len();
            for i in 0..pf {
                let row = spec.row(t * pf + i);
                let dst = base + i * width;
                out[dst..dst + bins.len()].copy_from_slice(&row[bins.clone()]);
            }
            let count = (pf * bins.len()) as f64;
            let mean = (0..pf)
                .map(|i| out[base + i * width..base + i * width + bins.len()].iter().sum::<f64>())
                .sum::<f64>()
                / count;
            for i in 0..pf {
                out[base + i * width..base + i * width + bins.len()]
                    .iter_mut()
                    .for_each(|v| *v -= mean);
            }
        }
    }
    out
}

/// Embed one spectrogram. Passing `rng` switches on training-mode dropout.
pub fn embed(
    spec: &LogMelSpectrogram,
    params: &ModelParams,
    dropout_rate: f64,
    rng: Option<&mut dyn RngCore>,
) -> Result<(EmbeddingPair, ForwardTrace)> {
    let dims = &params.dims;
    if spec.frames != dims.frames || spec.bins != dims.mel_bins {
        return Err(Error::Shape(format!(
            "spectrogram {}x{}, model expects {}x{}",
            spec.frames, spec.bins, dims.frames, dims.mel_bins
        )));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::Config(format!("dropout rate {dropout_rate} outside [0, 1)")));
    }
    let (cells, plen, h, d) = (dims.cells(), dims.patch_len(), dims.hidden, dims.d);
    let b = &params.blocks;
    let patches = extract_patches(spec, dims);
    let mut hidden_pre = vec![0.0; cells * h];
    let mut hidden = vec![0.0; cells * h];
    let mut spatial = vec![0.0; cells * d];
    for c in 0..cells {
        let x = &patches[c * plen..(c + 1) * plen];
        for j in 0..h {
            let z = dot(&b.w1[j * plen..(j + 1) * plen], x) + b.b1[j];
            hidden_pre[c * h + j] = z;
            hidden[c * h + j] = z.max(0.0);
        }
        let hc = &hidden[c * h..(c + 1) * h];
        for k in 0..d {
            spatial[c * d + k] = dot(&b.w2[k * h..(k + 1) * h], hc) + b.b2[k];
        }
    }
    let mut mean = vec![0.0; d];
    for c in 0..cells {
        for k in 0..d {
            mean[k] += spatial[c * d + k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= cells as f64);

    let (mean_mask, spatial_mask) = match rng {
        Some(rng) if dropout_rate > 0.0 => (
            Some(dropout_mask(d, dropout_rate, rng)),
            Some(dropout_mask(cells * d, dropout_rate, rng)),
        ),
        _ => (None, None),
    };
    let apply = |v: &[f64], m: &Option<Vec<f64>>| match m {
        Some(m) => v.iter().zip(m).map(|(a, s)| a * s).collect(),
        None => v.to_vec(),
    };
    let head_mean = apply(&mean, &mean_mask);
    let head_spatial = apply(&spatial, &spatial_mask);

    let pair = EmbeddingPair {
        grid_t: dims.grid_t,
        grid_f: dims.grid_f,
        d,
        spatial,
        mean,
    };
    let trace = ForwardTrace {
        version: params.version,
        patches,
        hidden_pre,
        hidden,
        mean_mask,
        head_mean,
        head_spatial,
        src_hidden: None,
        proto_argmax: None,
    };
    Ok((pair, trace))
}

pub fn linear_logits(mean: &[f64], params: &ModelParams) -> Vec<f64> {
    let d = params.dims.d;
    let b = &params.blocks;
    (0..params.dims.num_classes)
        .map(|c| dot(&b.lin_w[c * d..(c + 1) * d], mean) + b.lin_b[c])
        .collect()
}

fn similarity(kind: Similarity, proto: &[f64], cell: &[f64]) -> f64 {
    match kind {
        Similarity::Dot => dot(proto, cell),
        Similarity::Cosine => {
            let n = norm(proto) * norm(cell);
            if n > 0.0 {
                dot(proto, cell) / n
            } else {
                0.0
            }
        }
    }
}

/// Prototype logits and, per class, the winning `(prototype, cell)` pair
/// (first in prototype-major order on exact ties).
pub fn prototype_logits_with_argmax(spatial: &[f64], params: &ModelParams) -> (Vec<f64>, Vec<(usize, usize)>) {
    let dims = &params.dims;
    let d = dims.d;
    let cells = spatial.len() / d;
    let mut logits = Vec::with_capacity(dims.num_classes);
    let mut arg = Vec::with_capacity(dims.num_classes);
    for c in 0..dims.num_classes {
        let mut best = f64::NEG_INFINITY;
        let mut best_at = (0, 0);
        for j in 0..dims.prototypes_per_class {
            let p = params.proto(c, j);
            for cell in 0..cells {
                let a = similarity(dims.similarity, p, &spatial[cell * d..(cell + 1) * d]);
                if a > best {
                    best = a;
                    best_at = (j, cell);
                }
            }
        }
        logits.push(best);
        arg.push(best_at);
    }
    (logits, arg)
}

pub fn prototype_logits(spatial: &[f64], params: &ModelParams) -> Vec<f64> {
    prototype_logits_with_argmax(spatial, params).0
}

fn source_hidden(mean: &[f64], params: &ModelParams) -> Vec<f64> {
    let (d, r) = (params.dims.d, params.dims.source_rank);
    let w1 = &params.blocks.src_w1;
    let mut u = vec![0.0; r];
    for i in 0..d {
        let m = mean[i];
        for k in 0..r {
            u[k] += m * w1[i * r + k];
        }
    }
    u
}

fn source_from_hidden(u: &[f64], params: &ModelParams) -> Vec<f64> {
    let (r, s) = (params.dims.source_rank, params.dims.num_sources);
    let w2 = &params.blocks.src_w2;
    let mut z = vec![0.0; s];
    for k in 0..r {
        let uk = u[k];
        for (zi, w) in z.iter_mut().zip(&w2[k * s..(k + 1) * s]) {
            *zi += uk * w;
        }
    }
    z
}

/// `(mean · W1) · W2`.
pub fn source_logits(mean: &[f64], params: &ModelParams) -> Vec<f64> {
    source_from_hidden(&source_hidden(mean, params), params)
}

/// Embedding plus all three heads, in training mode when `rng` is given.
pub fn forward(
    spec: &LogMelSpectrogram,
    params: &ModelParams,
    dropout_rate: f64,
    rng: Option<&mut dyn RngCore>,
) -> Result<(EmbeddingPair, HeadOutputs, ForwardTrace)> {
    let (pair, mut trace) = embed(spec, params, dropout_rate, rng)?;
    let linear = linear_logits(&trace.head_mean, params);
    let (prototype, arg) = prototype_logits_with_argmax(&trace.head_spatial, params);
    let u = source_hidden(&trace.head_mean, params);
    let source = source_from_hidden(&u, params);
    trace.src_hidden = Some(u);
    trace.proto_argmax = Some(arg);
    Ok((pair, HeadOutputs { linear, prototype, source }, trace))
}

/// Loss gradients with respect to each head's logits.
#[derive(Debug, Clone, Default)]
pub struct Upstream<'a> {
    pub linear: Option<&'a [f64]>,
    pub prototype: Option<&'a [f64]>,
    pub source: Option<&'a [f64]>,
}

/// Accumulate parameter gradients into `grads`. The prototype head's
/// gradient reaches the prototypes only, never the embedder.
pub fn backward(
    trace: &ForwardTrace,
    params: &ModelParams,
    upstream: &Upstream<'_>,
    grads: &mut ParamBlocks,
) -> Result<()> {
    if trace.version != params.version {
        return Err(Error::Validation(format!(
            "stale trace: forward at version {}, params at {}",
            trace.version, params.version
        )));
    }
    let dims = &params.dims;
    let (cells, plen, h, d) = (dims.cells(), dims.patch_len(), dims.hidden, dims.d);
    let (r, s) = (dims.source_rank, dims.num_sources);
    let b = &params.blocks;
    let mut d_head_mean = vec![0.0; d];

    if let Some(g) = upstream.linear {
        if g.len() != dims.num_classes {
            return Err(Error::Shape("linear upstream length".into()));
        }
        for (c, &gc) in g.iter().enumerate() {
            if gc == 0.0 {
                continue;
            }
            grads.lin_b[c] += gc;
            let row = &b.lin_w[c * d..(c + 1) * d];
            let grow = &mut grads.lin_w[c * d..(c + 1) * d];
            for k in 0..d {
                grow[k] += gc * trace.head_mean[k];
                d_head_mean[k] += gc * row[k];
            }
        }
    }

    if let Some(g) = upstream.source {
        if g.len() != s {
            return Err(Error::Shape("source upstream length".into()));
        }
        let u = trace
            .src_hidden
            .as_ref()
            .ok_or_else(|| Error::Validation("trace has no source-head state".into()))?;
        let mut du = vec![0.0; r];
        for k in 0..r {
            let row = &b.src_w2[k * s..(k + 1) * s];
            let grow = &mut grads.src_w2[k * s..(k + 1) * s];
            let mut acc = 0.0;
            for i in 0..s {
                grow[i] += u[k] * g[i];
                acc += row[i] * g[i];
            }
            du[k] = acc;
        }
        for i in 0..d {
            let m = trace.head_mean[i];
            let mut acc = 0.0;
            for k in 0..r {
                grads.src_w1[i * r + k] += m * du[k];
                acc += b.src_w1[i * r + k] * du[k];
            }
            d_head_mean[i] += acc;
        }
    }

    if let Some(g) = upstream.prototype {
        if g.len() != dims.num_classes {
            return Err(Error::Shape("prototype upstream length".into()));
        }
        let arg = trace
            .proto_argmax
            .as_ref()
            .ok_or_else(|| Error::Validation("trace has no prototype-head state".into()))?;
        for (c, (&gc, &(j, cell))) in g.iter().zip(arg).enumerate() {
            if gc == 0.0 {
                continue;
            }
            let p = params.proto(c, j);
            let e = &trace.head_spatial[cell * d..(cell + 1) * d];
            let off = (c * dims.prototypes_per_class + j) * d;
            let gp = &mut grads.protos[off..off + d];
            match dims.similarity {
                Similarity::Dot => {
                    for k in 0..d {
                        gp[k] += gc * e[k];
                    }
                }
                Similarity::Cosine => {
                    let (np, ne) = (norm(p), norm(e));
                    if np > 0.0 && ne > 0.0 {
                        let act = dot(p, e) / (np * ne);
                        for k in 0..d {
                            gp[k] += gc * (e[k] / (np * ne) - act * p[k] / (np * np));
                        }
                    }
                }
            }
            // stop-gradient: nothing flows into head_spatial
        }
    }

    if d_head_mean.iter().all(|&x| x == 0.0) {
        return Ok(());
    }
    let d_mean: Vec<f64> = match &trace.mean_mask {
        Some(m) => d_head_mean.iter().zip(m).map(|(g, s)| g * s).collect(),
        None => d_head_mean,
    };
    // every cell receives d_mean / cells
    let d_cell: Vec<f64> = d_mean.iter().map(|g| g / cells as f64).collect();
    for k in 0..d {
        grads.b2[k] += d_cell[k] * cells as f64;
    }
    let mut hidden_sum = vec![0.0; h];
    for c in 0..cells {
        for j in 0..h {
            hidden_sum[j] += trace.hidden[c * h + j];
        }
    }
    for k in 0..d {
        let grow = &mut grads.w2[k * h..(k + 1) * h];
        for j in 0..h {
            grow[j] += d_cell[k] * hidden_sum[j];
        }
    }
    let mut d_hidden = vec![0.0; h];
    for k in 0..d {
        let row = &b.w2[k * h..(k + 1) * h];
        for j in 0..h {
            d_hidden[j] += d_cell[k] * row[j];
        }
    }
    for c in 0..cells {
        let x = &trace.patches[c * plen..(c + 1) * plen];
        for j in 0..h {
            if trace.hidden_pre[c * h + j] <= 0.0 {
                continue;
            }
            let g = d_hidden[j];
            grads.b1[j] += g;
            let grow = &mut grads.w1[j * plen..(j + 1) * plen];
            for (gw, xv) in grow.iter_mut().zip(x) {
                *gw += g * xv;
            }
        }
    }
    Ok(())
}
