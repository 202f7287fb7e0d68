//! Procedural video generator with exact ground-truth cameras and flow:
//! a distant textured plane viewed by a moving camera, composited with
//! independently moving foreground sprites.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use std::path::Path;
use thiserror::Error;

use crate::camera::{CameraFrame, CameraTrajectory, Extrinsics, Intrinsics};
use crate::flow::FlowField;
use crate::stage_seed;
use crate::tensorio::{self, Tensor, TensorIoError, TrajectoryFile, TrajectoryRecord};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("sprite of size {size} px does not fit a {h}x{w} frame")]
    SpriteTooLarge { size: f64, h: usize, w: usize },
    #[error("mode proportions sum to {sum}, expected 1")]
    BadMix { sum: f64 },
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error(transparent)]
    Io(#[from] TensorIoError),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
}

/// Scene category. `SceneMotion` is the stationary-camera dynamic-scene
/// mode (identity extrinsics); `Static` is a fully frozen scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    CameraMotion,
    SceneMotion,
    Both,
    Static,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::CameraMotion => "camera",
            Mode::SceneMotion => "scene",
            Mode::Both => "both",
            Mode::Static => "static",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "camera" => Some(Mode::CameraMotion),
            "scene" => Some(Mode::SceneMotion),
            "both" => Some(Mode::Both),
            "static" => Some(Mode::Static),
            _ => None,
        }
    }
}

/// Distance of the background plane from the world origin.
pub const PLANE_Z: f64 = 50.0;
const FX: f64 = 0.9;
const FY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub mode: Mode,
    pub texture_seed: u64,
    /// Camera yaw in rad/frame; the camera-to-world rotation of frame f is
    /// R_y(yaw_rate * f), so positive yaw moves image content left.
    pub yaw_rate: f64,
    /// Camera-center velocity in world units/frame.
    pub translation_velocity: [f64; 3],
    pub sprite_count: usize,
    /// Nominal sprite speed, px/frame (direction drawn per sprite).
    pub sprite_speed: f64,
    /// Sprite radius / half-side, px.
    pub sprite_size: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl SceneSpec {
    /// Zeroes out whichever motion source the mode forbids.
    pub fn canonicalize(mut self) -> Self {
        match self.mode {
            Mode::CameraMotion => self.sprite_speed = 0.0,
            Mode::SceneMotion => {
                self.yaw_rate = 0.0;
                self.translation_velocity = [0.0; 3];
            }
            Mode::Static => {
                self.yaw_rate = 0.0;
                self.translation_velocity = [0.0; 3];
                self.sprite_speed = 0.0;
            }
            Mode::Both => {}
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpriteShape {
    Disc,
    Square,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sprite {
    pub shape: SpriteShape,
    /// Position of the center at frame 0, px.
    pub position: [f64; 2],
    /// Velocity, px/frame.
    pub velocity: [f64; 2],
    pub radius: f64,
    pub color: [f32; 3],
}

impl Sprite {
    pub fn center_at(&self, frame: usize) -> [f64; 2] {
        [
            self.position[0] + self.velocity[0] * frame as f64,
            self.position[1] + self.velocity[1] * frame as f64,
        ]
    }

    /// Coverage in [0, 1] with a one-pixel soft edge.
    pub fn alpha_at(&self, frame: usize, x: f64, y: f64) -> f64 {
        let c = self.center_at(frame);
        match self.shape {
            SpriteShape::Disc => {
                let d = ((x - c[0]).powi(2) + (y - c[1]).powi(2)).sqrt();
                (self.radius + 0.5 - d).clamp(0.0, 1.0)
            }
            SpriteShape::Square => {
                let ax = (self.radius + 0.5 - (x - c[0]).abs()).clamp(0.0, 1.0);
                let ay = (self.radius + 0.5 - (y - c[1]).abs()).clamp(0.0, 1.0);
                ax * ay
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthClip {
    /// [F, 3, H, W] in [-1, 1].
    pub video: Tensor,
    /// Identity extrinsics for stationary-camera modes.
    pub trajectory: CameraTrajectory,
    /// Exact flow for consecutive frame pairs (f -> f+1).
    pub gt_flow: Vec<FlowField>,
    pub caption: String,
    pub tokens: Vec<u16>,
    pub sprites: Vec<Sprite>,
}

/// Smooth band-limited plane texture: a sum of sinusoids per channel,
/// defined at every world coordinate.
pub struct PlaneTexture {
    waves: Vec<([f64; 2], [f64; 3], [f64; 3])>, // (k, phase per channel, amp per channel)
}

impl PlaneTexture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 10;
        let waves = (0..n)
            .map(|_| {
                let wavelength = rng.random_range(10.0..42.0);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / wavelength;
                let kv = [k * angle.cos(), k * angle.sin()];
                let ph = [
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.0..std::f64::consts::TAU),
                ];
                let amp_base = rng.random_range(0.6..1.4) / n as f64;
                let amp = [
                    amp_base * rng.random_range(0.5..1.5),
                    amp_base * rng.random_range(0.5..1.5),
                    amp_base * rng.random_range(0.5..1.5),
                ];
                (kv, ph, amp)
            })
            .collect();
        Self { waves }
    }

    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let mut out = [0.0f64; 3];
        for (k, ph, amp) in &self.waves {
            let arg = k[0] * x + k[1] * y;
            for c in 0..3 {
                out[c] += amp[c] * (arg + ph[c]).sin();
            }
        }
        [
            out[0].clamp(-1.0, 1.0) as f32,
            out[1].clamp(-1.0, 1.0) as f32,
            out[2].clamp(-1.0, 1.0) as f32,
        ]
    }
}

fn yaw_matrix(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// World-to-camera extrinsics of frame f under the spec's camera model.
fn frame_extrinsics(spec: &SceneSpec, frame: usize) -> Extrinsics {
    let cam_to_world = yaw_matrix(spec.yaw_rate * frame as f64);
    let rotation = cam_to_world.transpose();
    let center = Vector3::new(
        spec.translation_velocity[0] * frame as f64,
        spec.translation_velocity[1] * frame as f64,
        spec.translation_velocity[2] * frame as f64,
    );
    let translation = -rotation * center;
    Extrinsics { rotation, translation }
}

fn intrinsics() -> Intrinsics {
    Intrinsics::new(FX, FY, 0.5, 0.5).unwrap()
}

/// World point on the background plane hit by the ray through pixel center
/// (u, v) of frame f.
fn plane_point(spec: &SceneSpec, frame: usize, u: f64, v: f64) -> Vector3<f64> {
    let k = intrinsics();
    let xn = (u + 0.5) / spec.width as f64;
    let yn = (v + 0.5) / spec.height as f64;
    let dir_cam = Vector3::new((xn - k.cx) / k.fx, (yn - k.cy) / k.fy, 1.0);
    let ext = frame_extrinsics(spec, frame);
    let dir_world = ext.rotation.transpose() * dir_cam;
    let origin = ext.camera_center();
    let s = (PLANE_Z - origin.z) / dir_world.z;
    origin + dir_world * s
}

/// Projects a world point into frame f, returning fractional pixel
/// coordinates under the pixel-center convention.
fn project(spec: &SceneSpec, frame: usize, point: &Vector3<f64>) -> (f64, f64) {
    let k = intrinsics();
    let ext = frame_extrinsics(spec, frame);
    let cam = ext.rotation * point + ext.translation;
    let xn = k.fx * (cam.x / cam.z) + k.cx;
    let yn = k.fy * (cam.y / cam.z) + k.cy;
    (xn * spec.width as f64 - 0.5, yn * spec.height as f64 - 0.5)
}

fn caption_for(spec: &SceneSpec) -> String {
    let count_word = |n: usize| match n {
        0 => "zero",
        1 => "one",
        2 => "two",
        3 => "three",
        _ => "four",
    };
    // Direction labels follow apparent image motion: positive yaw moves
    // content left.
    let dir = if spec.yaw_rate > 0.0 { "left" } else { "right" };
    let cam_speed = if spec.yaw_rate.abs() >= 0.035 { "fast" } else { "slow" };
    let sprite_speed = if spec.sprite_speed >= 1.6 { "fast" } else { "slow" };
    match spec.mode {
        Mode::CameraMotion => format!(
            "camera pans {dir} {cam_speed}, {} sprites still",
            count_word(spec.sprite_count)
        ),
        Mode::SceneMotion => format!(
            "camera static, {} sprites moving {sprite_speed}",
            count_word(spec.sprite_count)
        ),
        Mode::Both => format!(
            "camera pans {dir} {cam_speed}, {} sprites moving {sprite_speed}",
            count_word(spec.sprite_count)
        ),
        Mode::Static => "camera static, scene still".to_string(),
    }
}

/// Caption vocabulary shared with the diffusion model's embedding table.
pub const VOCAB: &[&str] = &[
    "camera", "pans", "left", "right", "slow", "fast", "static", "scene", "still", "sprites",
    "moving", "zero", "one", "two", "three", "four",
];

/// Token budget reserved for the vocabulary (the model's embedding table
/// size). Larger than the actual word list to leave room.
pub const VOCAB_SIZE: usize = 64;

pub fn tokenize(text: &str) -> Result<Vec<u16>, SynthError> {
    text.split([' ', ','])
        .filter(|w| !w.is_empty())
        .map(|w| {
            VOCAB
                .iter()
                .position(|&v| v == w)
                .map(|i| i as u16)
                .ok_or_else(|| SynthError::UnknownToken(w.to_string()))
        })
        .collect()
}

/// Renders a clip with exact ground-truth camera trajectory and flow.
/// Deterministic for a fixed spec and rng state.
pub fn render_clip(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<SynthClip, SynthError> {
    let spec = spec.clone().canonicalize();
    let (f, h, w) = (spec.frames, spec.height, spec.width);
    if 2.0 * spec.sprite_size + 1.0 > h.min(w) as f64 {
        return Err(SynthError::SpriteTooLarge { size: spec.sprite_size, h, w });
    }

    let texture = PlaneTexture::new(spec.texture_seed);
    let sprites: Vec<Sprite> = (0..spec.sprite_count)
        .map(|i| {
            let margin = spec.sprite_size + 1.0;
            let position = [
                rng.random_range(margin..w as f64 - margin),
                rng.random_range(margin..h as f64 - margin),
            ];
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let velocity = [spec.sprite_speed * angle.cos(), spec.sprite_speed * angle.sin()];
            let color = [
                rng.random_range(-1.0f32..1.0),
                rng.random_range(-1.0f32..1.0),
                rng.random_range(-1.0f32..1.0),
            ];
            Sprite {
                shape: if i % 2 == 0 { SpriteShape::Disc } else { SpriteShape::Square },
                position,
                velocity,
                radius: spec.sprite_size,
                color,
            }
        })
        .collect();

    let mut video = vec![0.0f32; f * 3 * h * w];
    for fi in 0..f {
        for v in 0..h {
            for u in 0..w {
                let p = plane_point(&spec, fi, u as f64, v as f64);
                let mut color = texture.sample(p.x, p.y);
                for sprite in &sprites {
                    let a = sprite.alpha_at(fi, u as f64, v as f64) as f32;
                    if a > 0.0 {
                        for c in 0..3 {
                            color[c] = color[c] * (1.0 - a) + sprite.color[c] * a;
                        }
                    }
                }
                for c in 0..3 {
                    video[((fi * 3 + c) * h + v) * w + u] = color[c];
                }
            }
        }
    }

    // Exact flow: sprite velocity where a sprite owns the pixel, otherwise
    // the reprojection of the plane point into the next frame. A stationary
    // camera yields exact zeros rather than reprojection roundoff.
    let static_camera = spec.yaw_rate == 0.0 && spec.translation_velocity == [0.0; 3];
    let mut gt_flow = Vec::with_capacity(f.saturating_sub(1));
    for fi in 0..f.saturating_sub(1) {
        let mut dx = Array2::<f32>::zeros((h, w));
        let mut dy = Array2::<f32>::zeros((h, w));
        for v in 0..h {
            for u in 0..w {
                let owner = sprites
                    .iter()
                    .rev()
                    .find(|s| s.alpha_at(fi, u as f64, v as f64) >= 0.5);
                if let Some(s) = owner {
                    dx[(v, u)] = s.velocity[0] as f32;
                    dy[(v, u)] = s.velocity[1] as f32;
                } else if !static_camera {
                    let p = plane_point(&spec, fi, u as f64, v as f64);
                    let (pu, pv) = project(&spec, fi + 1, &p);
                    dx[(v, u)] = (pu - u as f64) as f32;
                    dy[(v, u)] = (pv - v as f64) as f32;
                }
            }
        }
        gt_flow.push(FlowField { dx, dy });
    }

    let trajectory = CameraTrajectory {
        frames: (0..f)
            .map(|fi| CameraFrame {
                intrinsics: intrinsics(),
                extrinsics: frame_extrinsics(&spec, fi),
            })
            .collect(),
    };

    let caption = caption_for(&spec);
    let tokens = tokenize(&caption)?;
    Ok(SynthClip {
        video: Tensor::new(vec![f, 3, h, w], video).unwrap(),
        trajectory,
        gt_flow,
        caption,
        tokens,
        sprites,
    })
}

/// Size and parameter ranges for generated datasets.
#[derive(Debug, Clone)]
pub struct DatasetTemplate {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub yaw_range: (f64, f64),
    pub translation_range: (f64, f64),
    pub sprite_count_range: (usize, usize),
    pub sprite_speed_range: (f64, f64),
    pub sprite_size_range: (f64, f64),
}

impl Default for DatasetTemplate {
    fn default() -> Self {
        Self {
            frames: 17,
            height: 32,
            width: 32,
            yaw_range: (0.02, 0.05),
            translation_range: (0.0, 0.25),
            sprite_count_range: (1, 3),
            sprite_speed_range: (0.8, 2.5),
            sprite_size_range: (3.0, 6.0),
        }
    }
}

/// Exact deterministic allocation of `n` clips to modes by largest-remainder
/// rounding of the proportions (which must sum to 1).
pub fn allocate_modes(n: usize, mix: &[(Mode, f64)]) -> Result<Vec<(Mode, usize)>, SynthError> {
    let sum: f64 = mix.iter().map(|m| m.1).sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(SynthError::BadMix { sum });
    }
    let mut counts: Vec<usize> = mix.iter().map(|&(_, p)| (p * n as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = mix
        .iter()
        .enumerate()
        .map(|(i, &(_, p))| (i, p * n as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..n - assigned {
        counts[remainders[k % remainders.len()].0] += 1;
    }
    Ok(mix.iter().zip(counts).map(|(&(m, _), c)| (m, c)).collect())
}

fn spec_for(mode: Mode, template: &DatasetTemplate, rng: &mut ChaCha8Rng, clip_idx: usize) -> SceneSpec {
    let yaw_mag = rng.random_range(template.yaw_range.0..=template.yaw_range.1);
    let yaw_sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let t_mag = rng.random_range(template.translation_range.0..=template.translation_range.1);
    let t_angle = rng.random_range(0.0..std::f64::consts::TAU);
    let spec = SceneSpec {
        mode,
        texture_seed: rng.random::<u64>() ^ clip_idx as u64,
        yaw_rate: yaw_sign * yaw_mag,
        translation_velocity: [t_mag * t_angle.cos(), 0.0, t_mag * t_angle.sin()],
        sprite_count: rng.random_range(template.sprite_count_range.0..=template.sprite_count_range.1),
        sprite_speed: rng.random_range(template.sprite_speed_range.0..=template.sprite_speed_range.1),
        sprite_size: rng.random_range(template.sprite_size_range.0..=template.sprite_size_range.1),
        frames: template.frames,
        height: template.height,
        width: template.width,
    };
    spec.canonicalize()
}

/// Generates `n` clips with the requested mode mix. Clips are rendered from
/// independent per-clip seeds, so the result is byte-identical for a fixed
/// seed regardless of thread count.
pub fn make_dataset(
    n: usize,
    mix: &[(Mode, f64)],
    template: &DatasetTemplate,
    seed: u64,
) -> Result<Vec<(SceneSpec, SynthClip)>, SynthError> {
    let allocation = allocate_modes(n, mix)?;
    let mut specs = Vec::with_capacity(n);
    let mut idx = 0usize;
    for (mode, count) in allocation {
        for _ in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, &format!("clip-spec-{idx}")));
            specs.push(spec_for(mode, template, &mut rng, idx));
            idx += 1;
        }
    }
    specs
        .into_par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, &format!("clip-render-{i}")));
            render_clip(&spec, &mut rng).map(|clip| (spec, clip))
        })
        .collect()
}

pub fn clip_id(idx: usize) -> String {
    format!("clip{idx:04}")
}

/// Writes the dataset as TNSR videos, trajectory text files, ground-truth
/// flow tensors, and a manifest CSV.
pub fn write_dataset(dir: &Path, clips: &[(SceneSpec, SynthClip)]) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| TensorIoError::Io { path: dir.to_path_buf(), source: e })?;
    let mut manifest = String::from(
        "clip_id,mode,frames,height,width,yaw_rate,trans_x,trans_y,trans_z,sprite_count,sprite_speed,sprite_size,texture_seed,caption\n",
    );
    for (i, (spec, clip)) in clips.iter().enumerate() {
        let id = clip_id(i);
        tensorio::write_tensor(&clip.video, &dir.join(format!("{id}_video.tnsr")))?;
        let traj_file = trajectory_to_file(&clip.trajectory, &id);
        tensorio::write_trajectory(&traj_file, &dir.join(format!("{id}_traj.txt")))?;
        let (fh, fw) = (clip.video.dims()[2], clip.video.dims()[3]);
        if !clip.gt_flow.is_empty() {
            let mut flow_data = Vec::with_capacity(clip.gt_flow.len() * fh * fw * 2);
            for field in &clip.gt_flow {
                flow_data.extend(field.to_tensor().into_data());
            }
            let flow_tensor = Tensor::new(vec![clip.gt_flow.len(), fh, fw, 2], flow_data).unwrap();
            tensorio::write_tensor(&flow_tensor, &dir.join(format!("{id}_flow.tnsr")))?;
        }
        manifest.push_str(&format!(
            "{id},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            spec.mode.as_str(),
            spec.frames,
            spec.height,
            spec.width,
            spec.yaw_rate,
            spec.translation_velocity[0],
            spec.translation_velocity[1],
            spec.translation_velocity[2],
            spec.sprite_count,
            spec.sprite_speed,
            spec.sprite_size,
            spec.texture_seed,
            clip.caption,
        ));
    }
    std::fs::write(dir.join("manifest.csv"), manifest)
        .map_err(|e| TensorIoError::Io { path: dir.join("manifest.csv"), source: e })?;
    Ok(())
}

/// Converts a camera trajectory to the on-disk record format (frame index
/// timestamps, zero distortion).
pub fn trajectory_to_file(traj: &CameraTrajectory, source_id: &str) -> TrajectoryFile {
    TrajectoryFile {
        source_id: source_id.to_string(),
        frames: traj
            .frames
            .iter()
            .enumerate()
            .map(|(i, fr)| {
                let r = &fr.extrinsics.rotation;
                let t = &fr.extrinsics.translation;
                TrajectoryRecord {
                    timestamp: i as f64,
                    intrinsics: [
                        fr.intrinsics.fx,
                        fr.intrinsics.fy,
                        fr.intrinsics.cx,
                        fr.intrinsics.cy,
                    ],
                    distortion: [0.0, 0.0],
                    extrinsic: [
                        r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
                        r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
                        r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
                    ],
                }
            })
            .collect(),
    }
}

/// An entry loaded back from a written dataset.
#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub id: String,
    pub mode: Mode,
    pub video: Tensor,
    pub trajectory: CameraTrajectory,
    pub tokens: Vec<u16>,
    pub caption: String,
}

/// Loads the clips listed in a dataset manifest.
pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetEntry>, SynthError> {
    let manifest_path = dir.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| TensorIoError::Io { path: manifest_path.clone(), source: e })?;
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(14, ',').collect();
        if fields.len() != 14 {
            return Err(SynthError::Manifest {
                line: ln + 1,
                reason: format!("expected 14 fields, got {}", fields.len()),
            });
        }
        let id = fields[0].to_string();
        let mode = Mode::parse(fields[1]).ok_or_else(|| SynthError::Manifest {
            line: ln + 1,
            reason: format!("unknown mode `{}`", fields[1]),
        })?;
        let caption = fields[13].to_string();
        let video = tensorio::read_tensor(&dir.join(format!("{id}_video.tnsr")))?;
        let raw = tensorio::parse_trajectory(&dir.join(format!("{id}_traj.txt")))?;
        let trajectory = crate::camera::build_trajectory(&raw).map_err(|e| SynthError::Manifest {
            line: ln + 1,
            reason: format!("trajectory: {e}"),
        })?;
        let tokens = tokenize(&caption)?;
        entries.push(DatasetEntry { id, mode, video, trajectory, tokens, caption });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{estimate_flow, FlowConfig};
    use approx::assert_abs_diff_eq;

    fn base_spec(mode: Mode) -> SceneSpec {
        SceneSpec {
            mode,
            texture_seed: 99,
            yaw_rate: 0.03,
            translation_velocity: [0.0, 0.0, 0.0],
            sprite_count: 0,
            sprite_speed: 2.0,
            sprite_size: 4.0,
            frames: 5,
            height: 32,
            width: 32,
        }
    }

    #[test]
    fn static_mode_is_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = base_spec(Mode::Static);
        let clip = render_clip(&spec, &mut rng).unwrap();
        for field in &clip.gt_flow {
            assert!(field.dx.iter().all(|&v| v == 0.0));
            assert!(field.dy.iter().all(|&v| v == 0.0));
        }
        let frame_len = 3 * 32 * 32;
        let first = &clip.video.data()[..frame_len];
        for f in 1..5 {
            assert_eq!(first, &clip.video.data()[f * frame_len..(f + 1) * frame_len]);
        }
        for fr in &clip.trajectory.frames {
            assert_eq!(fr.extrinsics, Extrinsics::identity());
        }
    }

    #[test]
    fn pure_yaw_flow_matches_small_angle_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut spec = base_spec(Mode::CameraMotion);
        spec.yaw_rate = 0.01;
        // Odd size so pixel (16, 16)'s center is exactly the principal point.
        spec.height = 33;
        spec.width = 33;
        let clip = render_clip(&spec, &mut rng).unwrap();
        let center = clip.gt_flow[0].dx[(16, 16)] as f64;
        let expected = -FX * 33.0 * 0.01;
        assert!(
            (center - expected).abs() < 0.02 * expected.abs(),
            "center flow {center} vs small-angle {expected}"
        );
        let dy = clip.gt_flow[0].dy[(16, 16)] as f64;
        assert!(dy.abs() < 1e-6);
    }

    #[test]
    fn sprite_flow_inside_and_background_outside() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut spec = base_spec(Mode::SceneMotion);
        spec.sprite_count = 1;
        spec.sprite_speed = 2.0;
        let clip = render_clip(&spec, &mut rng).unwrap();
        let sprite = &clip.sprites[0];
        assert_abs_diff_eq!(
            (sprite.velocity[0].powi(2) + sprite.velocity[1].powi(2)).sqrt(),
            2.0,
            epsilon = 1e-9
        );
        let c = sprite.center_at(0);
        let (cu, cv) = (c[0].round() as usize, c[1].round() as usize);
        assert_abs_diff_eq!(clip.gt_flow[0].dx[(cv, cu)] as f64, sprite.velocity[0], epsilon = 1e-6);
        assert_abs_diff_eq!(clip.gt_flow[0].dy[(cv, cu)] as f64, sprite.velocity[1], epsilon = 1e-6);
        // A pixel far from the sprite carries zero flow (identity camera).
        let far_v = (cv + 16) % 32;
        let far_u = (cu + 16) % 32;
        let d = ((far_u as f64 - c[0]).powi(2) + (far_v as f64 - c[1]).powi(2)).sqrt();
        assert!(d > spec.sprite_size + 2.0);
        assert_eq!(clip.gt_flow[0].dx[(far_v, far_u)], 0.0);
        assert_eq!(clip.gt_flow[0].dy[(far_v, far_u)], 0.0);
    }

    #[test]
    fn sprite_too_large_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut spec = base_spec(Mode::SceneMotion);
        spec.sprite_count = 1;
        spec.sprite_size = 20.0;
        assert!(matches!(
            render_clip(&spec, &mut rng),
            Err(SynthError::SpriteTooLarge { .. })
        ));
    }

    #[test]
    fn allocation_is_exact() {
        let alloc =
            allocate_modes(400, &[(Mode::CameraMotion, 0.75), (Mode::Static, 0.25)]).unwrap();
        assert_eq!(alloc, vec![(Mode::CameraMotion, 300), (Mode::Static, 100)]);

        // Largest-remainder case: 0.5/0.3/0.2 over 7 = 3.5/2.1/1.4 ->
        // floors 3/2/1 (6 assigned), largest remainder 0.5 gets the extra.
        let alloc = allocate_modes(
            7,
            &[(Mode::CameraMotion, 0.5), (Mode::SceneMotion, 0.3), (Mode::Static, 0.2)],
        )
        .unwrap();
        assert_eq!(
            alloc,
            vec![(Mode::CameraMotion, 4), (Mode::SceneMotion, 2), (Mode::Static, 1)]
        );

        assert!(matches!(
            allocate_modes(4, &[(Mode::Static, 0.7)]),
            Err(SynthError::BadMix { .. })
        ));
    }

    #[test]
    fn pure_mode_has_zero_sprite_velocity() {
        let clips = make_dataset(
            10,
            &[(Mode::CameraMotion, 1.0)],
            &DatasetTemplate { frames: 3, ..Default::default() },
            7,
        )
        .unwrap();
        assert_eq!(clips.len(), 10);
        for (spec, clip) in &clips {
            assert_eq!(spec.mode, Mode::CameraMotion);
            assert_eq!(spec.sprite_speed, 0.0);
            for s in &clip.sprites {
                assert_eq!(s.velocity, [0.0, 0.0]);
            }
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let template = DatasetTemplate { frames: 3, height: 24, width: 24, ..Default::default() };
        let mix = [(Mode::CameraMotion, 0.5), (Mode::SceneMotion, 0.5)];
        let a = make_dataset(4, &mix, &template, 1234).unwrap();
        let b = make_dataset(4, &mix, &template, 1234).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        for ((sa, ca), (sb, cb)) in a.iter().zip(&b) {
            assert_eq!(sa, sb);
            assert_eq!(bits(&ca.video), bits(&cb.video));
        }
        let c = make_dataset(4, &mix, &template, 1235).unwrap();
        assert_ne!(bits(&a[0].1.video), bits(&c[0].1.video));
    }

    #[test]
    fn estimated_flow_matches_ground_truth_on_interiors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mode in [Mode::CameraMotion, Mode::SceneMotion] {
            let mut spec = base_spec(mode);
            spec.sprite_count = 1;
            spec.frames = 3;
            spec.height = 48;
            spec.width = 48;
            let clip = render_clip(&spec, &mut rng).unwrap();
            let frame = |f: usize| {
                let len = 3 * 48 * 48;
                Tensor::new(vec![3, 48, 48], clip.video.data()[f * len..(f + 1) * len].to_vec())
                    .unwrap()
            };
            let est = estimate_flow(&frame(0), &frame(1), &FlowConfig::default()).unwrap();
            let gt = &clip.gt_flow[0];
            let mut sum = 0.0;
            let mut n = 0usize;
            let margin = 5;
            'pixels: for v in margin..48 - margin {
                for u in margin..48 - margin {
                    // Interior only: skip pixels near any sprite boundary in
                    // either frame.
                    for s in &clip.sprites {
                        for f in 0..2 {
                            let c = s.center_at(f);
                            let d = ((u as f64 - c[0]).powi(2) + (v as f64 - c[1]).powi(2)).sqrt();
                            if (d - s.radius).abs() < 3.0 {
                                continue 'pixels;
                            }
                        }
                    }
                    let ex = (est.dx[(v, u)] - gt.dx[(v, u)]) as f64;
                    let ey = (est.dy[(v, u)] - gt.dy[(v, u)]) as f64;
                    sum += (ex * ex + ey * ey).sqrt();
                    n += 1;
                }
            }
            let epe = sum / n as f64;
            assert!(epe < 1.0, "mode {mode:?}: interior EPE {epe}");
        }
    }

    #[test]
    fn write_and_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let template = DatasetTemplate { frames: 3, height: 20, width: 20, ..Default::default() };
        let clips = make_dataset(3, &[(Mode::Both, 1.0)], &template, 42).unwrap();
        write_dataset(dir.path(), &clips).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (i, entry) in loaded.iter().enumerate() {
            assert_eq!(entry.id, clip_id(i));
            assert_eq!(entry.mode, Mode::Both);
            assert_eq!(entry.video.dims(), clips[i].1.video.dims());
            assert_eq!(entry.tokens, clips[i].1.tokens);
            assert_eq!(entry.trajectory.len(), 3);
        }
    }

    #[test]
    fn tokens_stay_within_vocab() {
        assert!(VOCAB.len() <= VOCAB_SIZE);
        for mode in [Mode::CameraMotion, Mode::SceneMotion, Mode::Both, Mode::Static] {
            let mut spec = base_spec(mode);
            spec.sprite_count = 2;
            let caption = caption_for(&spec.clone().canonicalize());
            let tokens = tokenize(&caption).unwrap();
            assert!(!tokens.is_empty());
            assert!(tokens.iter().all(|&t| (t as usize) < VOCAB.len()));
        }
        assert!(matches!(tokenize("camera warp"), Err(SynthError::UnknownToken(_))));
    }
}
