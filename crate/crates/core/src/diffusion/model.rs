//! Toy video DiT with the camera-conditioning branch: parameter registry,
//! 3D RoPE tables, the causal temporal camera encoder, and the forward
//! graph builder (one sample per tape).
//!
//! Main path per block: text cross-attention, self-attention with 3D RoPE,
//! MLP with 4x expansion, all with query/key RMS normalization, LayerNorm,
//! and timestep modulation (zero-initialized so blocks start as identity).
//! Camera path per conditioned block: feedback cross-attention reading the
//! current video tokens, self-attention, MLP; no text. Camera tokens are
//! projected through a zero-initialized linear layer and summed into the
//! video tokens immediately before each conditioned block.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{Array2, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{FeedbackMode, ModelConfig};
use super::tape::{Tape, VarId, GATHER_ZERO};
use super::DiffusionError;
use crate::camera::PluckerVolume;
use crate::tensorio::Tensor;

const NORM_EPS: f64 = 1e-6;
/// Channel width of the causal temporal camera encoder's output.
pub const CAM_ENCODER_CHANNELS: usize = 32;
const CONV_KERNEL: usize = 3;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Array2<f32>,
}

/// All learned parameters in a fixed creation order.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

enum Init {
    FanIn,
    Zero,
    One,
}

impl ModelState {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, DiffusionError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = Self { config: config.clone(), params: Vec::new(), index: BTreeMap::new() };
        let d = config.d_main;
        let dc = config.d_cam;
        let pd = 3 * config.patch * config.patch;

        let mut add = |state: &mut Self, name: String, rows: usize, cols: usize, init: Init| {
            let value = match init {
                Init::Zero => Array2::zeros((rows, cols)),
                Init::One => Array2::ones((rows, cols)),
                Init::FanIn => {
                    let std = 1.0 / (rows as f64).sqrt();
                    Array2::from_shape_fn((rows, cols), |_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (z * std) as f32
                    })
                }
            };
            state.index.insert(name.clone(), state.params.len());
            state.params.push(Param { name, value });
        };

        add(&mut state, "in_proj.w".into(), pd, d, Init::FanIn);
        add(&mut state, "in_proj.b".into(), 1, d, Init::Zero);
        add(&mut state, "t_embed.fc1.w".into(), d, d, Init::FanIn);
        add(&mut state, "t_embed.fc1.b".into(), 1, d, Init::Zero);
        add(&mut state, "t_embed.fc2.w".into(), d, d, Init::FanIn);
        add(&mut state, "t_embed.fc2.b".into(), 1, d, Init::Zero);
        add(&mut state, "text.embed".into(), config.vocab, d, Init::FanIn);
        add(&mut state, "text.null".into(), 1, d, Init::FanIn);

        for i in 1..=config.n_blocks {
            let p = |s: &str| format!("b{i}.{s}");
            add(&mut state, p("mod.w"), d, 9 * d, Init::Zero);
            add(&mut state, p("mod.b"), 1, 9 * d, Init::Zero);
            for attn in ["ca", "sa"] {
                for proj in ["q", "k", "v", "o"] {
                    add(&mut state, p(&format!("{attn}.{proj}.w")), d, d, Init::FanIn);
                    add(&mut state, p(&format!("{attn}.{proj}.b")), 1, d, Init::Zero);
                }
                add(&mut state, p(&format!("{attn}.qn.w")), 1, d, Init::One);
                add(&mut state, p(&format!("{attn}.kn.w")), 1, d, Init::One);
            }
            add(&mut state, p("mlp.fc1.w"), d, 4 * d, Init::FanIn);
            add(&mut state, p("mlp.fc1.b"), 1, 4 * d, Init::Zero);
            add(&mut state, p("mlp.fc2.w"), 4 * d, d, Init::FanIn);
            add(&mut state, p("mlp.fc2.b"), 1, d, Init::Zero);
        }

        add(&mut state, "out.mod.w".into(), d, 2 * d, Init::Zero);
        add(&mut state, "out.mod.b".into(), 1, 2 * d, Init::Zero);
        add(&mut state, "out.proj.w".into(), d, pd, Init::Zero);
        add(&mut state, "out.proj.b".into(), 1, pd, Init::Zero);

        if config.has_camera_branch() {
            let cc = CAM_ENCODER_CHANNELS;
            add(&mut state, "cam.enc.c1.w".into(), CONV_KERNEL * 6, cc, Init::FanIn);
            add(&mut state, "cam.enc.c1.b".into(), 1, cc, Init::Zero);
            add(&mut state, "cam.enc.c2.w".into(), CONV_KERNEL * cc, cc, Init::FanIn);
            add(&mut state, "cam.enc.c2.b".into(), 1, cc, Init::Zero);
            add(&mut state, "cam.enc.proj.w".into(), cc * config.patch * config.patch, dc, Init::FanIn);
            add(&mut state, "cam.enc.proj.b".into(), 1, dc, Init::Zero);
            for &i in &config.cam_inject_blocks {
                let p = |s: &str| format!("cam.b{i}.{s}");
                add(&mut state, p("mod.w"), d, 9 * dc, Init::Zero);
                add(&mut state, p("mod.b"), 1, 9 * dc, Init::Zero);
                // Feedback cross-attention: one side lives at d_main.
                let (q_in, kv_in) = match config.feedback {
                    FeedbackMode::CameraReadsVideo => (dc, d),
                    FeedbackMode::VideoReadsCamera => (d, dc),
                };
                add(&mut state, p("fb.q.w"), q_in, dc, Init::FanIn);
                add(&mut state, p("fb.q.b"), 1, dc, Init::Zero);
                add(&mut state, p("fb.k.w"), kv_in, dc, Init::FanIn);
                add(&mut state, p("fb.k.b"), 1, dc, Init::Zero);
                add(&mut state, p("fb.v.w"), kv_in, dc, Init::FanIn);
                add(&mut state, p("fb.v.b"), 1, dc, Init::Zero);
                add(&mut state, p("fb.o.w"), dc, dc, Init::FanIn);
                add(&mut state, p("fb.o.b"), 1, dc, Init::Zero);
                add(&mut state, p("fb.qn.w"), 1, dc, Init::One);
                add(&mut state, p("fb.kn.w"), 1, dc, Init::One);
                for proj in ["q", "k", "v", "o"] {
                    add(&mut state, p(&format!("sa.{proj}.w")), dc, dc, Init::FanIn);
                    add(&mut state, p(&format!("sa.{proj}.b")), 1, dc, Init::Zero);
                }
                add(&mut state, p("sa.qn.w"), 1, dc, Init::One);
                add(&mut state, p("sa.kn.w"), 1, dc, Init::One);
                add(&mut state, p("mlp.fc1.w"), dc, 4 * dc, Init::FanIn);
                add(&mut state, p("mlp.fc1.b"), 1, 4 * dc, Init::Zero);
                add(&mut state, p("mlp.fc2.w"), 4 * dc, dc, Init::FanIn);
                add(&mut state, p("mlp.fc2.b"), 1, dc, Init::Zero);
                add(&mut state, p("inject.w"), dc, d, Init::Zero);
                add(&mut state, p("inject.b"), 1, d, Init::Zero);
            }
        }
        Ok(state)
    }

    pub fn param(&self, name: &str) -> &Array2<f32> {
        &self.params[self.index[name]].value
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Array2<f32> {
        let i = self.index[name];
        &mut self.params[i].value
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// True for parameters belonging to the camera branch (the set trained
    /// in phase 2).
    pub fn is_camera_param(name: &str) -> bool {
        name.starts_with("cam.")
    }

    /// Re-draws every parameter from a generic random point (used by
    /// gradient checks, which must not sit at the zero-initialized start).
    pub fn randomize_for_test(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            let std = 0.6 / (p.value.nrows() as f64).sqrt();
            for v in p.value.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = (z * std) as f32;
            }
        }
    }
}

/// Parameters bound onto a tape as leaves. Frozen leaves do not require
/// gradients, which prunes their gradient work entirely.
pub struct BoundModel<T: NdFloat> {
    pub tape: Tape<T>,
    vars: Vec<VarId>,
    index: BTreeMap<String, usize>,
}

impl<T: NdFloat> BoundModel<T> {
    pub fn bind(state: &ModelState, frozen: impl Fn(&str) -> bool) -> Self {
        let mut tape = Tape::new();
        let mut vars = Vec::with_capacity(state.params.len());
        for p in &state.params {
            let value = p.value.mapv(|v| T::from(v).unwrap());
            vars.push(tape.leaf(value, !frozen(&p.name)));
        }
        Self { tape, vars, index: state.index.clone() }
    }

    pub fn var(&self, name: &str) -> VarId {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("no parameter `{name}`"))]
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&String, VarId)> {
        self.index.iter().map(|(n, &i)| (n, self.vars[i]))
    }

    /// Leaf ids in the state's parameter order.
    pub fn param_vars(&self) -> &[VarId] {
        &self.vars
    }

    fn linear(&mut self, x: VarId, name: &str) -> VarId {
        let w = self.var(&format!("{name}.w"));
        let b = self.var(&format!("{name}.b"));
        let y = self.tape.matmul(x, w);
        self.tape.add_row(y, b)
    }

    fn qk_norm(&mut self, x: VarId, weight: &str) -> VarId {
        let w = self.var(weight);
        let n = self.tape.rms_norm(x, T::from(NORM_EPS).unwrap());
        self.tape.mul_row(n, w)
    }
}

/// Token-grid geometry shared by the patchifier and RoPE tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.frames * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Compressed temporal length of the camera encoder: ceil(F / compress),
/// the causal-conv output length for F = 4k and 4k + 1 inputs.
pub fn compressed_frames(frames: usize, compress: usize) -> usize {
    frames.div_ceil(compress)
}

fn validate_video_dims(cfg: &ModelConfig, dims: &[usize]) -> Result<(usize, usize, usize), DiffusionError> {
    if dims.len() != 4 || dims[1] != 3 {
        return Err(DiffusionError::BadInput(format!("video must be [F, 3, H, W], got {dims:?}")));
    }
    let (f, h, w) = (dims[0], dims[2], dims[3]);
    if h % cfg.patch != 0 || w % cfg.patch != 0 {
        return Err(DiffusionError::BadInput(format!(
            "H, W = {h}, {w} not divisible by patch {}",
            cfg.patch
        )));
    }
    let rem = f % cfg.temporal_compress;
    if rem != 0 && rem != 1 {
        return Err(DiffusionError::BadInput(format!(
            "F = {f} must be 0 or 1 mod temporal_compress {}",
            cfg.temporal_compress
        )));
    }
    Ok((f, h, w))
}

/// Per-token cos/sin tables for multi-axis RoPE: each head splits its pairs
/// across (temporal, vertical, horizontal) in the configured ratio, and the
/// per-head table is tiled across heads.
pub fn rope_tables<T: NdFloat>(
    grid: TokenGrid,
    head_dim: usize,
    heads: usize,
    split: (usize, usize, usize),
) -> (Rc<Array2<T>>, Rc<Array2<T>>) {
    let pairs = head_dim / 2;
    let unit = pairs / (split.0 + split.1 + split.2);
    let parts = [split.0 * unit, split.1 * unit, split.2 * unit];
    let n = grid.len();
    let mut cos = Array2::zeros((n, head_dim * heads));
    let mut sin = Array2::zeros((n, head_dim * heads));
    for f in 0..grid.frames {
        for y in 0..grid.rows {
            for x in 0..grid.cols {
                let tok = (f * grid.rows + y) * grid.cols + x;
                let mut pair = 0usize;
                for (axis, &count) in parts.iter().enumerate() {
                    let coord = [f, y, x][axis] as f64;
                    for j in 0..count {
                        let theta = coord * (10_000f64).powf(-(j as f64) / count as f64);
                        let (s, c) = theta.sin_cos();
                        for h in 0..heads {
                            let base = h * head_dim + 2 * pair;
                            cos[(tok, base)] = T::from(c).unwrap();
                            cos[(tok, base + 1)] = T::from(c).unwrap();
                            sin[(tok, base)] = T::from(s).unwrap();
                            sin[(tok, base + 1)] = T::from(s).unwrap();
                        }
                        pair += 1;
                    }
                }
            }
        }
    }
    (Rc::new(cos), Rc::new(sin))
}

/// Sinusoidal timestep features, [1, dim].
fn timestep_features<T: NdFloat>(t: f64, dim: usize) -> Array2<T> {
    let half = dim / 2;
    let mut out = Array2::zeros((1, dim));
    for i in 0..half {
        let omega = (10_000f64).powf(-(i as f64) / half as f64);
        let angle = 1000.0 * t * omega;
        out[(0, i)] = T::from(angle.cos()).unwrap();
        out[(0, half + i)] = T::from(angle.sin()).unwrap();
    }
    out
}

fn patchify_indices(cfg: &ModelConfig, f: usize, h: usize, w: usize) -> Rc<Vec<u32>> {
    let p = cfg.patch;
    let (gh, gw) = (h / p, w / p);
    let pd = 3 * p * p;
    let mut idx = Vec::with_capacity(f * gh * gw * pd);
    for fi in 0..f {
        for gy in 0..gh {
            for gx in 0..gw {
                for c in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            let y = gy * p + py;
                            let x = gx * p + px;
                            idx.push((((fi * 3 + c) * h + y) * w + x) as u32);
                        }
                    }
                }
            }
        }
    }
    Rc::new(idx)
}

fn unpatchify_indices(cfg: &ModelConfig, f: usize, h: usize, w: usize) -> Rc<Vec<u32>> {
    let p = cfg.patch;
    let (gh, gw) = (h / p, w / p);
    let pd = 3 * p * p;
    let mut idx = Vec::with_capacity(f * 3 * h * w);
    for fi in 0..f {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let tok = (fi * gh + y / p) * gw + x / p;
                    let col = (c * p + y % p) * p + x % p;
                    idx.push((tok * pd + col) as u32);
                }
            }
        }
    }
    Rc::new(idx)
}

/// Gather map for one causal stride-2 temporal convolution layer: output
/// frame j taps input frames 2j-2, 2j-1, 2j (negative taps read zero).
/// Rows are (pixel, output frame), pixel-major on both sides.
fn causal_conv_indices(pixels: usize, f_in: usize, f_out: usize, channels: usize) -> Rc<Vec<u32>> {
    let mut idx = Vec::with_capacity(pixels * f_out * CONV_KERNEL * channels);
    for pix in 0..pixels {
        for j in 0..f_out {
            for k in 0..CONV_KERNEL {
                let fin = (2 * j + k) as isize - (CONV_KERNEL as isize - 1);
                for c in 0..channels {
                    if fin < 0 || fin as usize >= f_in {
                        idx.push(GATHER_ZERO);
                    } else {
                        idx.push(((pix * f_in + fin as usize) * channels + c) as u32);
                    }
                }
            }
        }
    }
    Rc::new(idx)
}

/// Everything the sampler or trainer needs from one forward pass.
pub struct ForwardResult {
    /// Velocity prediction, [1, F*3*H*W].
    pub velocity: VarId,
    /// Camera tokens before the injection projections, when the camera
    /// branch ran.
    pub camera_tokens: Option<VarId>,
}

pub struct ForwardInput<'a> {
    /// Noised video x_t, [F, 3, H, W].
    pub x_t: &'a Tensor,
    pub t: f64,
    /// None models the dropped-text pass (the learned null context token).
    pub text: Option<&'a [u16]>,
    /// None models the camera-free pass; the camera path never executes.
    pub plucker: Option<&'a PluckerVolume>,
}

/// Builds the camera-encoder subgraph: per-pixel causal temporal
/// convolutions (6 -> 32 channels, 4x downsampling), spatial patchify, and
/// a linear map to d_cam. Returns camera tokens [F' * gh * gw, d_cam].
pub fn encode_camera<T: NdFloat>(
    bound: &mut BoundModel<T>,
    cfg: &ModelConfig,
    plucker: &PluckerVolume,
) -> Result<(VarId, TokenGrid), DiffusionError> {
    let dims = plucker.values.dims().to_vec();
    let (f, h, w) = (dims[0], dims[1], dims[2]);
    let pixels = h * w;
    let f1 = f.div_ceil(2);
    let f2 = f1.div_ceil(2);

    // [F, H, W, 6] -> pixel-major [P*F, 6] layout for the conv gathers.
    let mut seq = vec![0.0f32; pixels * f * 6];
    for fi in 0..f {
        for y in 0..h {
            for x in 0..w {
                let pix = y * w + x;
                let src = plucker.values.offset(&[fi, y, x, 0]);
                for c in 0..6 {
                    seq[(pix * f + fi) * 6 + c] = plucker.values.data()[src + c];
                }
            }
        }
    }
    let seq = Array2::from_shape_vec((pixels * f, 6), seq)
        .unwrap()
        .mapv(|v| T::from(v).unwrap());
    let seq = bound.tape.leaf(seq, false);

    let cc = CAM_ENCODER_CHANNELS;
    let im1 = causal_conv_indices(pixels, f, f1, 6);
    let col1 = bound.tape.gather(seq, im1, pixels * f1, CONV_KERNEL * 6);
    let conv1 = bound.linear(col1, "cam.enc.c1");
    let conv1 = bound.tape.silu(conv1);

    let im2 = causal_conv_indices(pixels, f1, f2, cc);
    let col2 = bound.tape.gather(conv1, im2, pixels * f2, CONV_KERNEL * cc);
    let conv2 = bound.linear(col2, "cam.enc.c2");
    let conv2 = bound.tape.silu(conv2);

    // Spatial aggregation with the video patch size, then the linear map.
    let p = cfg.patch;
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(f2 * gh * gw * cc * p * p);
    for j in 0..f2 {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    for px in 0..p {
                        let pix = (gy * p + py) * w + (gx * p + px);
                        for c in 0..cc {
                            idx.push(((pix * f2 + j) * cc + c) as u32);
                        }
                    }
                }
            }
        }
    }
    let patches = bound.tape.gather(conv2, Rc::new(idx), f2 * gh * gw, cc * p * p);
    let tokens = bound.linear(patches, "cam.enc.proj");
    Ok((tokens, TokenGrid { frames: f2, rows: gh, cols: gw }))
}

/// One full model forward pass for a single sample.
pub fn forward<T: NdFloat>(
    bound: &mut BoundModel<T>,
    cfg: &ModelConfig,
    input: &ForwardInput,
) -> Result<ForwardResult, DiffusionError> {
    let (f, h, w) = validate_video_dims(cfg, input.x_t.dims())?;
    let p = cfg.patch;
    let (gh, gw) = (h / p, w / p);
    let grid = TokenGrid { frames: f, rows: gh, cols: gw };
    let d = cfg.d_main;
    let video = Array2::from_shape_vec(
        (1, input.x_t.len()),
        input.x_t.data().iter().map(|&v| T::from(v).unwrap()).collect(),
    )
    .unwrap();
    let video = bound.tape.leaf(video, false);
    let tokens = bound.tape.gather(video, patchify_indices(cfg, f, h, w), grid.len(), 3 * p * p);
    let mut hidden = bound.linear(tokens, "in_proj");

    // Timestep embedding and the per-block modulation input.
    let sin_emb = bound.tape.leaf(timestep_features(input.t, d), false);
    let t1 = bound.linear(sin_emb, "t_embed.fc1");
    let t1 = bound.tape.silu(t1);
    let t_emb = bound.linear(t1, "t_embed.fc2");
    let mod_in = bound.tape.silu(t_emb);

    // Text context: embedding rows, or the learned null token when dropped.
    let text_kv = match input.text {
        Some(tokens) if !tokens.is_empty() => {
            for &tok in tokens {
                if tok as usize >= cfg.vocab {
                    return Err(DiffusionError::BadInput(format!(
                        "text token {tok} outside vocab {}",
                        cfg.vocab
                    )));
                }
            }
            let table = bound.var("text.embed");
            let idx: Vec<u32> = tokens
                .iter()
                .flat_map(|&tok| (0..d).map(move |j| (tok as usize * d + j) as u32))
                .collect();
            bound.tape.gather(table, Rc::new(idx), tokens.len(), d)
        }
        _ => bound.var("text.null"),
    };

    let (rope_cos, rope_sin) = rope_tables::<T>(grid, cfg.head_dim(), cfg.n_heads, cfg.rope_split);

    // Camera branch state, when active.
    let camera_active = input.plucker.is_some() && cfg.has_camera_branch();
    let mut cam_state: Option<(VarId, TokenGrid, Rc<Array2<T>>, Rc<Array2<T>>, Rc<Vec<u32>>)> = None;
    if camera_active {
        let plucker = input.plucker.unwrap();
        let pdims = plucker.values.dims();
        if pdims[0] != f || pdims[1] != h || pdims[2] != w {
            return Err(DiffusionError::BadInput(format!(
                "camera token grid {:?} does not match video [F, H, W] = [{f}, {h}, {w}]",
                &pdims[..3]
            )));
        }
        let (tokens, cam_grid) = encode_camera(bound, cfg, plucker)?;
        let (cam_cos, cam_sin) =
            rope_tables::<T>(cam_grid, cfg.d_cam / cfg.cam_heads, cfg.cam_heads, cfg.rope_split);
        // Repeat camera rows 4x along time onto the video token grid:
        // video frame fi reads compressed index min(fi / compress, F' - 1).
        let mut repeat = Vec::with_capacity(grid.len() * d);
        for fi in 0..f {
            let j = (fi / cfg.temporal_compress).min(cam_grid.frames - 1);
            for gy in 0..gh {
                for gx in 0..gw {
                    let row = (j * gh + gy) * gw + gx;
                    for col in 0..d {
                        repeat.push((row * d + col) as u32);
                    }
                }
            }
        }
        cam_state = Some((tokens, cam_grid, cam_cos, cam_sin, Rc::new(repeat)));
    }

    let eps = T::from(NORM_EPS).unwrap();
    for i in 1..=cfg.n_blocks {
        // Camera block + injection immediately before a conditioned block.
        if let Some((cam, cam_grid, cam_cos, cam_sin, repeat)) = &mut cam_state {
            if cfg.cam_inject_blocks.contains(&i) {
                let prefix = format!("cam.b{i}");
                let rows = block_modulation(bound, &prefix, mod_in, cfg.d_cam);

                // Feedback cross-attention between the branches.
                let normed = bound.tape.layer_norm(*cam, eps);
                let x_hat = bound.tape.modulate(normed, rows[0], rows[1]);
                let fb = match cfg.feedback {
                    FeedbackMode::CameraReadsVideo => {
                        let q = bound.linear(x_hat, &format!("{prefix}.fb.q"));
                        let q = bound.qk_norm(q, &format!("{prefix}.fb.qn.w"));
                        let k = bound.linear(hidden, &format!("{prefix}.fb.k"));
                        let k = bound.qk_norm(k, &format!("{prefix}.fb.kn.w"));
                        let v = bound.linear(hidden, &format!("{prefix}.fb.v"));
                        let attn = bound.tape.attention(q, k, v, cfg.cam_heads);
                        bound.linear(attn, &format!("{prefix}.fb.o"))
                    }
                    FeedbackMode::VideoReadsCamera => {
                        // Video tokens query the camera tokens; the reads are
                        // mean-pooled back onto the camera grid.
                        let q = bound.linear(hidden, &format!("{prefix}.fb.q"));
                        let q = bound.qk_norm(q, &format!("{prefix}.fb.qn.w"));
                        let k = bound.linear(x_hat, &format!("{prefix}.fb.k"));
                        let k = bound.qk_norm(k, &format!("{prefix}.fb.kn.w"));
                        let v = bound.linear(x_hat, &format!("{prefix}.fb.v"));
                        let attn = bound.tape.attention(q, k, v, cfg.cam_heads);
                        let read = bound.linear(attn, &format!("{prefix}.fb.o"));
                        let pool = pool_matrix::<T>(grid, *cam_grid, cfg.temporal_compress);
                        let pool = bound.tape.leaf(pool, false);
                        bound.tape.matmul(pool, read)
                    }
                };
                let gated = bound.tape.mul_row(fb, rows[2]);
                *cam = bound.tape.add(*cam, gated);

                // Camera self-attention with RoPE on the camera grid.
                let normed = bound.tape.layer_norm(*cam, eps);
                let x_hat = bound.tape.modulate(normed, rows[3], rows[4]);
                let q = bound.linear(x_hat, &format!("{prefix}.sa.q"));
                let q = bound.qk_norm(q, &format!("{prefix}.sa.qn.w"));
                let q = bound.tape.rope(q, cam_cos.clone(), cam_sin.clone());
                let k = bound.linear(x_hat, &format!("{prefix}.sa.k"));
                let k = bound.qk_norm(k, &format!("{prefix}.sa.kn.w"));
                let k = bound.tape.rope(k, cam_cos.clone(), cam_sin.clone());
                let v = bound.linear(x_hat, &format!("{prefix}.sa.v"));
                let attn = bound.tape.attention(q, k, v, cfg.cam_heads);
                let out = bound.linear(attn, &format!("{prefix}.sa.o"));
                let gated = bound.tape.mul_row(out, rows[5]);
                *cam = bound.tape.add(*cam, gated);

                // Camera MLP.
                let normed = bound.tape.layer_norm(*cam, eps);
                let x_hat = bound.tape.modulate(normed, rows[6], rows[7]);
                let up = bound.linear(x_hat, &format!("{prefix}.mlp.fc1"));
                let up = bound.tape.silu(up);
                let down = bound.linear(up, &format!("{prefix}.mlp.fc2"));
                let gated = bound.tape.mul_row(down, rows[8]);
                *cam = bound.tape.add(*cam, gated);

                // Zero-initialized injection onto the video tokens.
                let proj = bound.linear(*cam, &format!("{prefix}.inject"));
                let aligned = bound.tape.gather(proj, repeat.clone(), grid.len(), d);
                hidden = bound.tape.add(hidden, aligned);
            }
        }

        let prefix = format!("b{i}");
        let rows = block_modulation(bound, &prefix, mod_in, d);

        // Text cross-attention.
        let normed = bound.tape.layer_norm(hidden, eps);
        let x_hat = bound.tape.modulate(normed, rows[0], rows[1]);
        let q = bound.linear(x_hat, &format!("{prefix}.ca.q"));
        let q = bound.qk_norm(q, &format!("{prefix}.ca.qn.w"));
        let k = bound.linear(text_kv, &format!("{prefix}.ca.k"));
        let k = bound.qk_norm(k, &format!("{prefix}.ca.kn.w"));
        let v = bound.linear(text_kv, &format!("{prefix}.ca.v"));
        let attn = bound.tape.attention(q, k, v, cfg.n_heads);
        let out = bound.linear(attn, &format!("{prefix}.ca.o"));
        let gated = bound.tape.mul_row(out, rows[2]);
        hidden = bound.tape.add(hidden, gated);

        // Self-attention with 3D RoPE.
        let normed = bound.tape.layer_norm(hidden, eps);
        let x_hat = bound.tape.modulate(normed, rows[3], rows[4]);
        let q = bound.linear(x_hat, &format!("{prefix}.sa.q"));
        let q = bound.qk_norm(q, &format!("{prefix}.sa.qn.w"));
        let q = bound.tape.rope(q, rope_cos.clone(), rope_sin.clone());
        let k = bound.linear(x_hat, &format!("{prefix}.sa.k"));
        let k = bound.qk_norm(k, &format!("{prefix}.sa.kn.w"));
        let k = bound.tape.rope(k, rope_cos.clone(), rope_sin.clone());
        let v = bound.linear(x_hat, &format!("{prefix}.sa.v"));
        let attn = bound.tape.attention(q, k, v, cfg.n_heads);
        let out = bound.linear(attn, &format!("{prefix}.sa.o"));
        let gated = bound.tape.mul_row(out, rows[5]);
        hidden = bound.tape.add(hidden, gated);

        // MLP with 4x expansion.
        let normed = bound.tape.layer_norm(hidden, eps);
        let x_hat = bound.tape.modulate(normed, rows[6], rows[7]);
        let up = bound.linear(x_hat, &format!("{prefix}.mlp.fc1"));
        let up = bound.tape.silu(up);
        let down = bound.linear(up, &format!("{prefix}.mlp.fc2"));
        let gated = bound.tape.mul_row(down, rows[8]);
        hidden = bound.tape.add(hidden, gated);
    }

    // Final norm, modulation, projection, unpatchify.
    let normed = bound.tape.layer_norm(hidden, eps);
    let out_mod = bound.linear(mod_in, "out.mod");
    let shift = slice_row(bound, out_mod, 0, d);
    let scale = slice_row(bound, out_mod, 1, d);
    let x_hat = bound.tape.modulate(normed, shift, scale);
    let out_tokens = bound.linear(x_hat, "out.proj");
    let velocity =
        bound.tape.gather(out_tokens, unpatchify_indices(cfg, f, h, w), 1, f * 3 * h * w);

    Ok(ForwardResult { velocity, camera_tokens: cam_state.map(|s| s.0) })
}

/// Projects the modulation input to 9 rows (shift, scale, gate per
/// sublayer) of width `dim`.
fn block_modulation<T: NdFloat>(
    bound: &mut BoundModel<T>,
    prefix: &str,
    mod_in: VarId,
    dim: usize,
) -> [VarId; 9] {
    let all = bound.linear(mod_in, &format!("{prefix}.mod"));
    std::array::from_fn(|r| slice_row(bound, all, r, dim))
}

/// Slices columns [r*dim, (r+1)*dim) of a [1, k*dim] node into [1, dim].
fn slice_row<T: NdFloat>(bound: &mut BoundModel<T>, v: VarId, r: usize, dim: usize) -> VarId {
    let idx: Vec<u32> = (0..dim).map(|j| (r * dim + j) as u32).collect();
    bound.tape.gather(v, Rc::new(idx), 1, dim)
}

/// Mean-pooling matrix from the video token grid onto the camera grid
/// (used by the video-queries-camera feedback mode).
fn pool_matrix<T: NdFloat>(video: TokenGrid, cam: TokenGrid, compress: usize) -> Array2<T> {
    let mut counts = vec![0usize; cam.len()];
    let mut pairs = Vec::with_capacity(video.len());
    for f in 0..video.frames {
        let j = (f / compress).min(cam.frames - 1);
        for y in 0..video.rows {
            for x in 0..video.cols {
                let vrow = (f * video.rows + y) * video.cols + x;
                let crow = (j * cam.rows + y) * cam.cols + x;
                counts[crow] += 1;
                pairs.push((crow, vrow));
            }
        }
    }
    let mut m = Array2::zeros((cam.len(), video.len()));
    for (crow, vrow) in pairs {
        m[(crow, vrow)] = T::one() / T::from(counts[crow]).unwrap();
    }
    m
}
