//! Optical flow estimation (pyramidal brightness-constancy with quadratic
//! smoothness), per-latent PCA projection to 3 channels, and motion spectral
//! volumes with per-timestep aggregation.

use ndarray::Array2;
use nalgebra::DMatrix;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

use crate::tensorio::Tensor;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("image too small ({h}x{w}); flow needs min side >= {min}")]
    TooSmall { h: usize, w: usize, min: usize },
    #[error("dimension mismatch: {a:?} vs {b:?}")]
    DimMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("expected a [H, W] or [C, H, W] tensor, got dims {dims:?}")]
    BadImageDims { dims: Vec<usize> },
    #[error("latent stack must be [F, C, H, W] with C >= 3, got dims {dims:?}")]
    BadLatentDims { dims: Vec<usize> },
    #[error("no flow fields given")]
    Empty,
    #[error("per-timestep input is missing the t = 0 entry")]
    MissingT0,
    #[error("video has {frames} frames; need at least 2")]
    ShortSequence { frames: usize },
}

/// Settings for the coarse-to-fine estimator. Defaults follow the pinned
/// recipe: up to 4 pyramid levels, smoothness weight 15, 30 iterations per
/// level, levels truncated when the short side would drop below 16.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub levels: usize,
    pub smoothness: f32,
    pub iterations: usize,
    pub min_side: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { levels: 4, smoothness: 15.0, iterations: 30, min_side: 16 }
    }
}

/// Dense per-pixel displacement (dx, dy) in pixels from a source frame to a
/// target frame.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub dx: Array2<f32>,
    pub dy: Array2<f32>,
}

impl FlowField {
    pub fn height(&self) -> usize {
        self.dx.nrows()
    }
    pub fn width(&self) -> usize {
        self.dx.ncols()
    }

    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = self.dx.dim();
        let mut data = Vec::with_capacity(h * w * 2);
        for v in 0..h {
            for u in 0..w {
                data.push(self.dx[(v, u)]);
                data.push(self.dy[(v, u)]);
            }
        }
        Tensor::new(vec![h, w, 2], data).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, FlowError> {
        let dims = t.dims();
        if dims.len() != 3 || dims[2] != 2 {
            return Err(FlowError::BadImageDims { dims: dims.to_vec() });
        }
        let (h, w) = (dims[0], dims[1]);
        let mut dx = Array2::zeros((h, w));
        let mut dy = Array2::zeros((h, w));
        for v in 0..h {
            for u in 0..w {
                dx[(v, u)] = t.data()[(v * w + u) * 2];
                dy[(v, u)] = t.data()[(v * w + u) * 2 + 1];
            }
        }
        Ok(Self { dx, dy })
    }
}

fn to_gray(t: &Tensor) -> Result<Array2<f32>, FlowError> {
    let dims = t.dims();
    match dims.len() {
        2 => {
            let (h, w) = (dims[0], dims[1]);
            Ok(Array2::from_shape_vec((h, w), t.data().to_vec()).unwrap())
        }
        3 => {
            let (c, h, w) = (dims[0], dims[1], dims[2]);
            let mut out = Array2::<f32>::zeros((h, w));
            for ch in 0..c {
                for v in 0..h {
                    for u in 0..w {
                        out[(v, u)] += t.data()[(ch * h + v) * w + u];
                    }
                }
            }
            out.mapv_inplace(|x| x / c as f32);
            Ok(out)
        }
        _ => Err(FlowError::BadImageDims { dims: dims.to_vec() }),
    }
}

fn downsample2(img: &Array2<f32>) -> Array2<f32> {
    let (h, w) = img.dim();
    let (nh, nw) = (h / 2, w / 2);
    Array2::from_shape_fn((nh, nw), |(v, u)| {
        0.25 * (img[(2 * v, 2 * u)]
            + img[(2 * v + 1, 2 * u)]
            + img[(2 * v, 2 * u + 1)]
            + img[(2 * v + 1, 2 * u + 1)])
    })
}

fn bilinear(img: &Array2<f32>, x: f32, y: f32) -> f32 {
    let (h, w) = img.dim();
    let x = x.clamp(0.0, (w - 1) as f32);
    let y = y.clamp(0.0, (h - 1) as f32);
    let x0 = (x as usize).min(w - 1);
    let y0 = (y as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = x - x0 as f32;
    let ay = y - y0 as f32;
    (1.0 - ax) * (1.0 - ay) * img[(y0, x0)]
        + ax * (1.0 - ay) * img[(y0, x1)]
        + (1.0 - ax) * ay * img[(y1, x0)]
        + ax * ay * img[(y1, x1)]
}

fn resize_scaled(field: &Array2<f32>, nh: usize, nw: usize, gain: f32) -> Array2<f32> {
    let (h, w) = field.dim();
    let sy = h as f32 / nh as f32;
    let sx = w as f32 / nw as f32;
    Array2::from_shape_fn((nh, nw), |(v, u)| {
        gain * bilinear(field, (u as f32 + 0.5) * sx - 0.5, (v as f32 + 0.5) * sy - 0.5)
    })
}

/// Weighted 8-neighbor average used by the smoothness term.
fn neighbor_avg(f: &Array2<f32>, out: &mut Array2<f32>) {
    let (h, w) = f.dim();
    let at = |v: isize, u: isize| -> f32 {
        let v = v.clamp(0, h as isize - 1) as usize;
        let u = u.clamp(0, w as isize - 1) as usize;
        f[(v, u)]
    };
    for v in 0..h as isize {
        for u in 0..w as isize {
            let cardinal = at(v - 1, u) + at(v + 1, u) + at(v, u - 1) + at(v, u + 1);
            let diagonal = at(v - 1, u - 1) + at(v - 1, u + 1) + at(v + 1, u - 1) + at(v + 1, u + 1);
            out[(v as usize, u as usize)] = cardinal / 6.0 + diagonal / 12.0;
        }
    }
}

/// Coarse-to-fine Horn-Schunck-family flow from `src` to `dst`.
///
/// Inputs are [H, W] or [C, H, W] tensors; channels are averaged to gray and
/// the pair is jointly remapped to [0, 255] so the pinned smoothness weight
/// has a fixed meaning regardless of the caller's value range.
pub fn estimate_flow(src: &Tensor, dst: &Tensor, cfg: &FlowConfig) -> Result<FlowField, FlowError> {
    if src.dims() != dst.dims() {
        return Err(FlowError::DimMismatch { a: src.dims().to_vec(), b: dst.dims().to_vec() });
    }
    let mut a = to_gray(src)?;
    let mut b = to_gray(dst)?;
    let (h, w) = a.dim();
    if h < cfg.min_side || w < cfg.min_side {
        return Err(FlowError::TooSmall { h, w, min: cfg.min_side });
    }

    let lo = a.iter().chain(b.iter()).fold(f32::INFINITY, |m, &v| m.min(v));
    let hi = a.iter().chain(b.iter()).fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    if hi > lo {
        let scale = 255.0 / (hi - lo);
        a.mapv_inplace(|v| (v - lo) * scale);
        b.mapv_inplace(|v| (v - lo) * scale);
    }

    // Pyramid, finest first.
    let mut pyr_a = vec![a];
    let mut pyr_b = vec![b];
    while pyr_a.len() < cfg.levels {
        let next = downsample2(pyr_a.last().unwrap());
        if next.nrows() < cfg.min_side || next.ncols() < cfg.min_side {
            break;
        }
        pyr_b.push(downsample2(pyr_b.last().unwrap()));
        pyr_a.push(next);
    }

    let coarsest = pyr_a.len() - 1;
    let (ch, cw) = pyr_a[coarsest].dim();
    let mut u = Array2::<f32>::zeros((ch, cw));
    let mut v = Array2::<f32>::zeros((ch, cw));

    for level in (0..=coarsest).rev() {
        let ia = &pyr_a[level];
        let ib = &pyr_b[level];
        let (lh, lw) = ia.dim();
        if u.dim() != (lh, lw) {
            let gain = lh as f32 / u.nrows() as f32;
            u = resize_scaled(&u, lh, lw, gain);
            v = resize_scaled(&v, lh, lw, gain);
        }

        // Backward-warp the target by the current flow.
        let warped = Array2::from_shape_fn((lh, lw), |(y, x)| {
            bilinear(ib, x as f32 + u[(y, x)], y as f32 + v[(y, x)])
        });

        // Spatial gradients of the average image, temporal difference.
        let avg = (&warped + ia) * 0.5f32;
        let mut ix = Array2::<f32>::zeros((lh, lw));
        let mut iy = Array2::<f32>::zeros((lh, lw));
        for y in 0..lh {
            for x in 0..lw {
                let xm = x.saturating_sub(1);
                let xp = (x + 1).min(lw - 1);
                let ym = y.saturating_sub(1);
                let yp = (y + 1).min(lh - 1);
                ix[(y, x)] = (avg[(y, xp)] - avg[(y, xm)]) / (xp - xm).max(1) as f32;
                iy[(y, x)] = (avg[(yp, x)] - avg[(ym, x)]) / (yp - ym).max(1) as f32;
            }
        }
        let it = &warped - ia;

        let alpha2 = cfg.smoothness * cfg.smoothness;
        let mut du = Array2::<f32>::zeros((lh, lw));
        let mut dv = Array2::<f32>::zeros((lh, lw));
        let mut du_avg = Array2::<f32>::zeros((lh, lw));
        let mut dv_avg = Array2::<f32>::zeros((lh, lw));
        for _ in 0..cfg.iterations {
            neighbor_avg(&du, &mut du_avg);
            neighbor_avg(&dv, &mut dv_avg);
            for y in 0..lh {
                for x in 0..lw {
                    let gx = ix[(y, x)];
                    let gy = iy[(y, x)];
                    let t = (gx * du_avg[(y, x)] + gy * dv_avg[(y, x)] + it[(y, x)])
                        / (alpha2 + gx * gx + gy * gy);
                    du[(y, x)] = du_avg[(y, x)] - gx * t;
                    dv[(y, x)] = dv_avg[(y, x)] - gy * t;
                }
            }
        }
        u += &du;
        v += &dv;
    }

    Ok(FlowField { dx: u, dy: v })
}

/// Projects a [F, C, H, W] latent stack to [F, 3, H, W] via per-frame PCA of
/// the channel covariance. The top-3 components (sign fixed so the
/// largest-magnitude loading is positive) are each rescaled to [0, 1];
/// rank-deficient frames pad missing channels with zeros.
pub fn pca_to_rgb(latents: &Tensor) -> Result<Tensor, FlowError> {
    let dims = latents.dims();
    if dims.len() != 4 || dims[1] < 3 {
        return Err(FlowError::BadLatentDims { dims: dims.to_vec() });
    }
    let (f, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let n = h * w;
    let frame_len = c * n;

    let frames: Vec<Vec<f32>> = (0..f)
        .into_par_iter()
        .map(|fi| {
            let frame = &latents.data()[fi * frame_len..(fi + 1) * frame_len];
            // Channel means.
            let mut mean = vec![0.0f64; c];
            for ch in 0..c {
                let mut s = 0.0;
                for p in 0..n {
                    s += frame[ch * n + p] as f64;
                }
                mean[ch] = s / n as f64;
            }
            // Covariance (C x C).
            let mut cov = DMatrix::<f64>::zeros(c, c);
            for i in 0..c {
                for j in i..c {
                    let mut s = 0.0;
                    for p in 0..n {
                        s += (frame[i * n + p] as f64 - mean[i]) * (frame[j * n + p] as f64 - mean[j]);
                    }
                    let v = s / n as f64;
                    cov[(i, j)] = v;
                    cov[(j, i)] = v;
                }
            }
            let eig = cov.clone().symmetric_eigen();
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
            let max_ev = eig.eigenvalues[order[0]].max(0.0);

            let mut out = vec![0.0f32; 3 * n];
            for (k, &oi) in order.iter().take(3).enumerate() {
                let ev = eig.eigenvalues[oi];
                if ev <= 1e-12 * max_ev.max(1e-300) || max_ev <= 0.0 {
                    log::warn!("pca_to_rgb: frame {fi} is rank-deficient; component {k} zeroed");
                    continue;
                }
                let mut comp: Vec<f64> = (0..c).map(|i| eig.eigenvectors[(i, oi)]).collect();
                // Deterministic sign: largest-magnitude loading positive.
                let lead = (0..c).fold(0, |best, i| if comp[i].abs() > comp[best].abs() { i } else { best });
                if comp[lead] < 0.0 {
                    for v in comp.iter_mut() {
                        *v = -*v;
                    }
                }
                let mut proj = vec![0.0f64; n];
                for i in 0..c {
                    let ci = comp[i];
                    for p in 0..n {
                        proj[p] += ci * (frame[i * n + p] as f64 - mean[i]);
                    }
                }
                let lo = proj.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if hi - lo > 1e-12 {
                    for p in 0..n {
                        out[k * n + p] = ((proj[p] - lo) / (hi - lo)) as f32;
                    }
                }
            }
            out
        })
        .collect();

    let mut data = Vec::with_capacity(f * 3 * n);
    for fr in frames {
        data.extend_from_slice(&fr);
    }
    Ok(Tensor::new(vec![f, 3, h, w], data).unwrap())
}

/// Radially binned amplitude spectrum of a set of flow fields.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBin {
    /// Radial spatial frequency at the bin center, cycles/pixel.
    pub nu: f64,
    /// Mean normalized amplitude (|F|/(H*W)) over the bin's frequency cells,
    /// components, and fields.
    pub amplitude: f64,
    /// Binned power (sum of |F|^2/(H*W)), averaged over fields; sums to the
    /// spatial flow energy by Parseval.
    pub power: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralVolume {
    pub bins: Vec<SpectralBin>,
    pub pair_count: usize,
}

pub const DEFAULT_SPECTRAL_BINS: usize = 32;

fn fft2(data: &Array2<f64>, planner: &mut FftPlanner<f64>) -> Array2<Complex<f64>> {
    let (h, w) = data.dim();
    let fft_w = planner.plan_fft_forward(w);
    let fft_h = planner.plan_fft_forward(h);
    let mut buf: Vec<Complex<f64>> = data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_mut(w) {
        fft_w.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        fft_h.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    Array2::from_shape_vec((h, w), buf).unwrap()
}

/// Computes the motion spectral volume of a set of equally sized flow
/// fields: 2D DFT per component, amplitudes normalized by H*W, binned by
/// radial frequency into `bins` uniform bins from DC to Nyquist (0.5), then
/// averaged over components and fields. Corner frequencies above Nyquist
/// fall into the last bin.
pub fn spectral_volume(flows: &[FlowField], bins: usize) -> Result<SpectralVolume, FlowError> {
    if flows.is_empty() {
        return Err(FlowError::Empty);
    }
    let (h, w) = flows[0].dx.dim();
    for f in flows {
        if f.dx.dim() != (h, w) {
            return Err(FlowError::DimMismatch {
                a: vec![h, w],
                b: vec![f.dx.nrows(), f.dx.ncols()],
            });
        }
    }
    assert!(bins >= 2, "need at least 2 spectral bins");
    let delta = 0.5 / (bins - 1) as f64;
    let bin_of = |k: usize, l: usize| -> usize {
        let fk = k.min(h - k) as f64 / h as f64;
        let fl = l.min(w - l) as f64 / w as f64;
        let nu = (fk * fk + fl * fl).sqrt();
        ((nu / delta).round() as usize).min(bins - 1)
    };
    let mut cell_count = vec![0usize; bins];
    for k in 0..h {
        for l in 0..w {
            cell_count[bin_of(k, l)] += 1;
        }
    }

    let mut planner = FftPlanner::new();
    let norm = (h * w) as f64;
    let mut amp_sum = vec![0.0f64; bins];
    let mut pow_sum = vec![0.0f64; bins];
    for field in flows {
        for comp in [&field.dx, &field.dy] {
            let spec = fft2(&comp.mapv(|v| v as f64), &mut planner);
            for k in 0..h {
                for l in 0..w {
                    let b = bin_of(k, l);
                    let mag = spec[(k, l)].norm();
                    amp_sum[b] += mag / norm;
                    pow_sum[b] += mag * mag / norm;
                }
            }
        }
    }

    let n_fields = flows.len() as f64;
    let bins_out = (0..bins)
        .map(|b| SpectralBin {
            nu: b as f64 * delta,
            amplitude: if cell_count[b] == 0 {
                0.0
            } else {
                amp_sum[b] / (2.0 * n_fields * cell_count[b] as f64)
            },
            power: pow_sum[b] / n_fields,
        })
        .collect();
    Ok(SpectralVolume { bins: bins_out, pair_count: flows.len() })
}

/// Settings for per-timestep spectra: flow estimator configuration, spectral
/// bin count, and the anchor-stride/horizon pair enumeration.
#[derive(Debug, Clone)]
pub struct SpectraConfig {
    pub flow: FlowConfig,
    pub bins: usize,
    pub anchor_stride: usize,
    pub horizon: usize,
}

impl Default for SpectraConfig {
    fn default() -> Self {
        Self {
            flow: FlowConfig::default(),
            bins: DEFAULT_SPECTRAL_BINS,
            anchor_stride: 6,
            horizon: 24,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TimestepSpectrum {
    pub t: f64,
    pub volume: SpectralVolume,
    /// Per-bin amplitude ratio against the t = 0 volume (identically 1 at
    /// t = 0).
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TimestepSpectra {
    /// Sorted ascending by t.
    pub entries: Vec<TimestepSpectrum>,
}

impl TimestepSpectra {
    pub fn at(&self, t: f64) -> Option<&TimestepSpectrum> {
        self.entries.iter().find(|e| (e.t - t).abs() < 1e-9)
    }
}

fn frame_tensor(video: &Tensor, frame: usize) -> Tensor {
    let dims = video.dims();
    let (c, h, w) = (dims[1], dims[2], dims[3]);
    let len = c * h * w;
    let start = frame * len;
    Tensor::new(vec![c, h, w], video.data()[start..start + len].to_vec()).unwrap()
}

/// Enumerates (anchor, target) frame pairs: anchors at every `stride`-th
/// frame, targets up to `horizon` frames ahead, clipped at the sequence end.
pub fn flow_pairs(frames: usize, stride: usize, horizon: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut anchor = 0;
    while anchor < frames {
        for k in 1..=horizon {
            if anchor + k >= frames {
                break;
            }
            pairs.push((anchor, anchor + k));
        }
        anchor += stride;
    }
    pairs
}

/// Computes per-timestep motion spectral volumes of denoised prediction
/// stacks (`(t, videos)` with videos of dims [F, C, H, W]), plus per-bin
/// amplitude ratios against the t = 0 volume. Latents with more than 3
/// channels are PCA-projected first.
pub fn per_timestep_spectra(
    denoised: &[(f64, Vec<Tensor>)],
    cfg: &SpectraConfig,
) -> Result<TimestepSpectra, FlowError> {
    if !denoised.iter().any(|(t, _)| *t == 0.0) {
        return Err(FlowError::MissingT0);
    }
    let mut volumes: Vec<(f64, SpectralVolume)> = Vec::with_capacity(denoised.len());
    for (t, videos) in denoised {
        let mut flows: Vec<FlowField> = Vec::new();
        for video in videos {
            let dims = video.dims();
            if dims.len() != 4 {
                return Err(FlowError::BadLatentDims { dims: dims.to_vec() });
            }
            let frames = dims[0];
            if frames < 2 {
                return Err(FlowError::ShortSequence { frames });
            }
            let rgb;
            let video = if dims[1] > 3 {
                rgb = pca_to_rgb(video)?;
                &rgb
            } else {
                video
            };
            let pairs = flow_pairs(frames, cfg.anchor_stride, cfg.horizon);
            let mut batch: Vec<FlowField> = pairs
                .par_iter()
                .map(|&(a, b)| {
                    estimate_flow(&frame_tensor(video, a), &frame_tensor(video, b), &cfg.flow)
                })
                .collect::<Result<_, _>>()?;
            flows.append(&mut batch);
        }
        volumes.push((*t, spectral_volume(&flows, cfg.bins)?));
    }
    volumes.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let base: Vec<f64> = volumes
        .iter()
        .find(|(t, _)| *t == 0.0)
        .map(|(_, v)| v.bins.iter().map(|b| b.amplitude).collect())
        .unwrap();
    const EPS: f64 = 1e-12;
    let entries = volumes
        .into_iter()
        .map(|(t, volume)| {
            let ratios = volume
                .bins
                .iter()
                .zip(&base)
                .map(|(b, &b0)| (b.amplitude + EPS) / (b0 + EPS))
                .collect();
            TimestepSpectrum { t, volume, ratios }
        })
        .collect();
    Ok(TimestepSpectra { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth band-limited texture from a sum of sinusoids, evaluable at any
    /// real coordinate (no resampling error in oracles).
    struct Texture {
        waves: Vec<(f64, f64, f64, f64)>, // (kx, ky, phase, amp)
    }

    impl Texture {
        fn new(rng: &mut ChaCha8Rng, n: usize) -> Self {
            let waves = (0..n)
                .map(|_| {
                    let wavelength = rng.random_range(8.0..24.0);
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    let k = std::f64::consts::TAU / wavelength;
                    (
                        k * angle.cos(),
                        k * angle.sin(),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(0.5..1.0) / n as f64,
                    )
                })
                .collect();
            Self { waves }
        }

        fn at(&self, x: f64, y: f64) -> f32 {
            self.waves
                .iter()
                .map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin())
                .sum::<f64>() as f32
        }

        fn render(&self, h: usize, w: usize, map: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
            let mut data = Vec::with_capacity(h * w);
            for v in 0..h {
                for u in 0..w {
                    let (x, y) = map(u as f64, v as f64);
                    data.push(self.at(x, y));
                }
            }
            Tensor::new(vec![h, w], data).unwrap()
        }
    }

    #[test]
    fn zero_motion_gives_near_zero_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tex = Texture::new(&mut rng, 8);
        let img = tex.render(48, 48, |u, v| (u, v));
        let flow = estimate_flow(&img, &img, &FlowConfig::default()).unwrap();
        let mean_mag: f32 = flow
            .dx
            .iter()
            .zip(flow.dy.iter())
            .map(|(&a, &b)| (a * a + b * b).sqrt())
            .sum::<f32>()
            / (48.0 * 48.0);
        assert!(mean_mag < 0.05, "mean |flow| = {mean_mag}");
    }

    #[test]
    fn three_pixel_shift_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tex = Texture::new(&mut rng, 8);
        let src = tex.render(64, 64, |u, v| (u, v));
        // Content moves right by 3: dst(x, y) = src(x - 3, y).
        let dst = tex.render(64, 64, |u, v| (u - 3.0, v));
        let flow = estimate_flow(&src, &dst, &FlowConfig::default()).unwrap();
        let margin = 8;
        let mut sum_dx = 0.0;
        let mut sum_dy = 0.0;
        let mut n = 0;
        for y in margin..64 - margin {
            for x in margin..64 - margin {
                sum_dx += flow.dx[(y, x)] as f64;
                sum_dy += flow.dy[(y, x)] as f64;
                n += 1;
            }
        }
        let mean_dx = sum_dx / n as f64;
        let mean_dy = sum_dy / n as f64;
        assert!((mean_dx - 3.0).abs() < 0.5, "mean dx = {mean_dx}");
        assert!(mean_dy.abs() < 0.5, "mean dy = {mean_dy}");
    }

    #[test]
    fn small_rotation_matches_analytic_rigid_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tex = Texture::new(&mut rng, 8);
        let (h, w) = (64usize, 64usize);
        let c = (w as f64 - 1.0) / 2.0;
        let theta = 2.0f64.to_radians();
        let (s, co) = theta.sin_cos();
        let src = tex.render(h, w, |u, v| (u, v));
        // Content rotates by theta about the center: dst(q) = src(R^-1 (q-c) + c).
        let dst = tex.render(h, w, |u, v| {
            let (du, dv) = (u - c, v - c);
            (co * du + s * dv + c, -s * du + co * dv + c)
        });
        let flow = estimate_flow(&src, &dst, &FlowConfig::default()).unwrap();
        let margin = 8;
        let mut sum_epe = 0.0;
        let mut n = 0;
        for y in margin..h - margin {
            for x in margin..w - margin {
                let (du, dv) = (x as f64 - c, y as f64 - c);
                let truth_dx = co * du - s * dv + c - x as f64;
                let truth_dy = s * du + co * dv + c - y as f64;
                let ex = flow.dx[(y, x)] as f64 - truth_dx;
                let ey = flow.dy[(y, x)] as f64 - truth_dy;
                sum_epe += (ex * ex + ey * ey).sqrt();
                n += 1;
            }
        }
        let epe = sum_epe / n as f64;
        assert!(epe < 0.7, "endpoint error {epe}");
    }

    #[test]
    fn too_small_image_is_rejected() {
        let img = Tensor::zeros(vec![8, 8]).unwrap();
        assert!(matches!(
            estimate_flow(&img, &img, &FlowConfig::default()),
            Err(FlowError::TooSmall { .. })
        ));
    }

    fn const_flow(h: usize, w: usize, dx: f32, dy: f32) -> FlowField {
        FlowField {
            dx: Array2::from_elem((h, w), dx),
            dy: Array2::from_elem((h, w), dy),
        }
    }

    #[test]
    fn constant_flow_is_pure_dc() {
        let vol = spectral_volume(&[const_flow(32, 32, 1.5, 0.0)], 32).unwrap();
        assert!(vol.bins[0].amplitude > 0.0);
        for b in &vol.bins[1..] {
            assert!(b.amplitude < 1e-9, "bin {} has amplitude {}", b.nu, b.amplitude);
        }
        assert_eq!(vol.pair_count, 1);
    }

    #[test]
    fn single_harmonic_lands_in_its_bin() {
        let (h, w) = (64usize, 64usize);
        let dx = Array2::from_shape_fn((h, w), |(_, u)| {
            (std::f64::consts::TAU * u as f64 * 4.0 / w as f64).sin() as f32
        });
        let flow = FlowField { dx, dy: Array2::zeros((h, w)) };
        let vol = spectral_volume(&[flow], 32).unwrap();
        let delta = 0.5 / 31.0;
        let expected_bin = ((4.0 / w as f64) / delta).round() as usize;
        for (i, b) in vol.bins.iter().enumerate() {
            if i != expected_bin {
                assert!(
                    b.amplitude < vol.bins[expected_bin].amplitude / 1e3,
                    "leakage into bin {i}"
                );
            }
        }
    }

    #[test]
    fn parseval_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (h, w) = (24usize, 40usize);
        let dx = Array2::from_shape_fn((h, w), |_| rng.random_range(-2.0f32..2.0));
        let dy = Array2::from_shape_fn((h, w), |_| rng.random_range(-2.0f32..2.0));
        let energy: f64 = dx.iter().chain(dy.iter()).map(|&v| (v as f64) * (v as f64)).sum();
        let vol = spectral_volume(&[FlowField { dx, dy }], 32).unwrap();
        let binned: f64 = vol.bins.iter().map(|b| b.power).sum();
        assert!(
            (binned - energy).abs() <= 1e-6 * energy,
            "binned {binned} vs spatial {energy}"
        );
    }

    #[test]
    fn spectral_dim_mismatch_is_rejected() {
        let a = const_flow(16, 16, 0.0, 0.0);
        let b = const_flow(16, 18, 0.0, 0.0);
        assert!(matches!(
            spectral_volume(&[a, b], 32),
            Err(FlowError::DimMismatch { .. })
        ));
    }

    #[test]
    fn pca_matches_jacobi_oracle_on_16_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (c, h, w) = (16usize, 8usize, 8usize);
        let n = h * w;
        // Correlated random latent.
        let data: Vec<f32> = {
            let base: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut d = Vec::with_capacity(c * n);
            for _ch in 0..c {
                let coeffs: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                for p in 0..n {
                    let v: f64 = (0..3).map(|j| coeffs[j] * base[j * n + p]).sum::<f64>()
                        + 0.05 * rng.random_range(-1.0f64..1.0);
                    d.push(v as f32);
                }
            }
            d
        };
        let latent = Tensor::new(vec![1, c, h, w], data.clone()).unwrap();
        let rgb = pca_to_rgb(&latent).unwrap();

        // Oracle: covariance + Jacobi + projection + identical rescale.
        let mut mean = vec![0.0f64; c];
        for ch in 0..c {
            mean[ch] = (0..n).map(|p| data[ch * n + p] as f64).sum::<f64>() / n as f64;
        }
        let mut cov = vec![vec![0.0f64; c]; c];
        for i in 0..c {
            for j in 0..c {
                cov[i][j] = (0..n)
                    .map(|p| (data[i * n + p] as f64 - mean[i]) * (data[j * n + p] as f64 - mean[j]))
                    .sum::<f64>()
                    / n as f64;
            }
        }
        let (evals, evecs) = crate::testutil::jacobi_eigh(cov);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| evals[b].partial_cmp(&evals[a]).unwrap());
        for (k, &oi) in order.iter().take(3).enumerate() {
            let mut comp: Vec<f64> = (0..c).map(|i| evecs[i][oi]).collect();
            let lead = (0..c).fold(0, |best, i| if comp[i].abs() > comp[best].abs() { i } else { best });
            if comp[lead] < 0.0 {
                comp.iter_mut().for_each(|v| *v = -*v);
            }
            let proj: Vec<f64> = (0..n)
                .map(|p| (0..c).map(|i| comp[i] * (data[i * n + p] as f64 - mean[i])).sum())
                .collect();
            let lo = proj.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for p in 0..n {
                let expected = (proj[p] - lo) / (hi - lo);
                let got = rgb.data()[k * n + p] as f64;
                assert!(
                    (expected - got).abs() < 1e-5,
                    "component {k} pixel {p}: oracle {expected} vs {got}"
                );
            }
        }
    }

    #[test]
    fn pca_constant_latent_is_degenerate() {
        let latent = Tensor::new(vec![1, 4, 4, 4], vec![0.7; 64]).unwrap();
        let rgb = pca_to_rgb(&latent).unwrap();
        assert!(rgb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pca_full_rank_c3_is_lossless_permutation() {
        // Exactly orthogonal mean-zero channels with distinct variances, so
        // the covariance is diagonal and components are the axes.
        let (h, w) = (8usize, 8usize);
        let n = h * w;
        let mut data = vec![0.0f32; 3 * n];
        for p in 0..n {
            data[p] = 3.0 * if p < n / 2 { 1.0 } else { -1.0 };
            data[n + p] = 2.0 * if p % 2 == 0 { 1.0 } else { -1.0 };
            data[2 * n + p] = 1.0 * if (p / 2) % 2 == 0 { 1.0 } else { -1.0 };
        }
        let latent = Tensor::new(vec![1, 3, h, w], data.clone()).unwrap();
        let rgb = pca_to_rgb(&latent).unwrap();
        // Each output channel must be an affine rescale of one input channel.
        for k in 0..3 {
            let out = &rgb.data()[k * n..(k + 1) * n];
            let mut matched = false;
            for ch in 0..3 {
                let input = &data[ch * n..(ch + 1) * n];
                let lo = input.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = input.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let up: Vec<f32> = input.iter().map(|&v| (v - lo) / (hi - lo)).collect();
                let down: Vec<f32> = up.iter().map(|&v| 1.0 - v).collect();
                let close = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-3);
                if close(out, &up) || close(out, &down) {
                    matched = true;
                    break;
                }
            }
            assert!(matched, "output channel {k} is not a rescale of any input channel");
        }
    }

    #[test]
    fn pca_is_invariant_to_channel_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (c, h, w) = (6usize, 8usize, 8usize);
        let n = h * w;
        let data: Vec<f32> = (0..c * n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let latent = Tensor::new(vec![1, c, h, w], data.clone()).unwrap();
        let rgb = pca_to_rgb(&latent).unwrap();

        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut permuted = vec![0.0f32; c * n];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * n..(dst + 1) * n].copy_from_slice(&data[src * n..(src + 1) * n]);
        }
        let latent_p = Tensor::new(vec![1, c, h, w], permuted).unwrap();
        let rgb_p = pca_to_rgb(&latent_p).unwrap();
        for (a, b) in rgb.data().iter().zip(rgb_p.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    fn video_from_frames(frames: Vec<Tensor>) -> Tensor {
        let (h, w) = (frames[0].dims()[0], frames[0].dims()[1]);
        let f = frames.len();
        let mut data = Vec::with_capacity(f * h * w);
        for fr in &frames {
            data.extend_from_slice(fr.data());
        }
        Tensor::new(vec![f, 1, h, w], data).unwrap()
    }

    #[test]
    fn identical_content_gives_unit_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let tex = Texture::new(&mut rng, 6);
        let frames: Vec<Tensor> = (0..7)
            .map(|f| tex.render(32, 32, |u, v| (u + 1.3 * f as f64, v)))
            .collect();
        let video = video_from_frames(frames);
        let denoised = vec![(0.0, vec![video.clone()]), (0.5, vec![video.clone()]), (1.0, vec![video])];
        let spectra = per_timestep_spectra(&denoised, &SpectraConfig::default()).unwrap();
        for entry in &spectra.entries {
            for r in &entry.ratios {
                assert_abs_diff_eq!(*r, 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn pan_missing_at_later_t_shows_in_low_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let tex = Texture::new(&mut rng, 6);
        // t = 0: panning video (low-frequency global motion present).
        let panning: Vec<Tensor> = (0..7)
            .map(|f| tex.render(32, 32, |u, v| (u + 2.0 * f as f64, v)))
            .collect();
        // t = 1: static video (pan absent).
        let static_frames: Vec<Tensor> = (0..7).map(|_| tex.render(32, 32, |u, v| (u, v))).collect();
        let denoised = vec![
            (0.0, vec![video_from_frames(panning)]),
            (1.0, vec![video_from_frames(static_frames)]),
        ];
        let spectra = per_timestep_spectra(&denoised, &SpectraConfig::default()).unwrap();
        let later = spectra.at(1.0).unwrap();
        let low_mean: f64 = later.ratios[..4].iter().sum::<f64>() / 4.0;
        assert!(low_mean < 0.5, "low-bin ratios should collapse, got {low_mean}");
    }

    #[test]
    fn pair_enumeration_at_boundary() {
        assert_eq!(flow_pairs(7, 6, 24).len(), 6);
        assert_eq!(flow_pairs(7, 6, 24), vec![(0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (0, 6)]);
        // 31 frames: anchors 0, 6, 12, 18, 24, 30.
        let pairs = flow_pairs(31, 6, 24);
        assert!(pairs.contains(&(0, 24)));
        assert!(!pairs.contains(&(0, 25)));
        assert!(pairs.contains(&(6, 30)));
        assert!(!pairs.contains(&(30, 31)));
    }

    #[test]
    fn missing_t0_is_an_error() {
        let video = Tensor::zeros(vec![3, 1, 16, 16]).unwrap();
        let denoised = vec![(0.5, vec![video])];
        assert!(matches!(
            per_timestep_spectra(&denoised, &SpectraConfig::default()),
            Err(FlowError::MissingT0)
        ));
    }

    #[test]
    fn short_sequence_is_an_error() {
        let video = Tensor::zeros(vec![1, 1, 16, 16]).unwrap();
        let denoised = vec![(0.0, vec![video])];
        assert!(matches!(
            per_timestep_spectra(&denoised, &SpectraConfig::default()),
            Err(FlowError::ShortSequence { frames: 1 })
        ));
    }
}
