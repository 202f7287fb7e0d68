//! Deterministic Euler sampling with separate text/camera classifier-free
//! guidance and the camera conditioning gate.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{ConditioningGate, GuidanceWeights, ModelConfig};
use super::model::{forward, BoundModel, ForwardInput, ModelState};
use super::DiffusionError;
use crate::camera::{plucker_volume, CameraTrajectory, PluckerVolume};
use crate::tensorio::Tensor;

/// The separate-guidance combination
/// (1 + w_y + w_c) s(x|y,c) - w_y s(x|c) - w_c s(x|y).
pub fn combine_guidance(
    full: &Tensor,
    camera_only: &Tensor,
    text_only: &Tensor,
    g: &GuidanceWeights,
) -> Tensor {
    let coeff = 1.0 + g.w_text + g.w_camera;
    let data = full
        .data()
        .iter()
        .zip(camera_only.data())
        .zip(text_only.data())
        .map(|((&f, &c), &y)| {
            (coeff * f as f64 - g.w_text * c as f64 - g.w_camera * y as f64) as f32
        })
        .collect();
    Tensor::new(full.dims().to_vec(), data).unwrap()
}

fn run_forward(
    state: &ModelState,
    cfg: &ModelConfig,
    x_t: &Tensor,
    t: f64,
    text: Option<&[u16]>,
    plucker: Option<&PluckerVolume>,
) -> Result<Tensor, DiffusionError> {
    let mut bound: BoundModel<f32> = BoundModel::bind(state, |_| true);
    let out = forward(&mut bound, cfg, &ForwardInput { x_t, t, text, plucker })?;
    let v = bound.tape.value(out.velocity);
    Ok(Tensor::new(x_t.dims().to_vec(), v.iter().copied().collect()).unwrap())
}

/// One guided velocity evaluation. Inside the gate (with camera given) this
/// runs the three conditioned passes and combines them; outside it the
/// camera is dropped from all passes and the formula degenerates to
/// standard text CFG with weight w_y. Passes whose weight is zero are
/// skipped.
pub fn guided_velocity(
    state: &ModelState,
    x_t: &Tensor,
    t: f64,
    text: Option<&[u16]>,
    plucker: Option<&PluckerVolume>,
    g: &GuidanceWeights,
    gate: &ConditioningGate,
) -> Result<Tensor, DiffusionError> {
    let cfg = state.config.clone();
    let camera = if gate.admits(t) { plucker } else { None };
    match camera {
        Some(cam) => {
            let full = run_forward(state, &cfg, x_t, t, text, Some(cam))?;
            if g.w_text == 0.0 && g.w_camera == 0.0 {
                return Ok(full);
            }
            let camera_only = if g.w_text != 0.0 {
                run_forward(state, &cfg, x_t, t, None, Some(cam))?
            } else {
                full.clone()
            };
            let text_only = if g.w_camera != 0.0 {
                run_forward(state, &cfg, x_t, t, text, None)?
            } else {
                full.clone()
            };
            Ok(combine_guidance(&full, &camera_only, &text_only, g))
        }
        None => {
            let cond = run_forward(state, &cfg, x_t, t, text, None)?;
            if g.w_text == 0.0 {
                return Ok(cond);
            }
            let uncond = run_forward(state, &cfg, x_t, t, None, None)?;
            let data = cond
                .data()
                .iter()
                .zip(uncond.data())
                .map(|(&c, &u)| ((1.0 + g.w_text) * c as f64 - g.w_text * u as f64) as f32)
                .collect();
            Ok(Tensor::new(cond.dims().to_vec(), data).unwrap())
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub guidance: GuidanceWeights,
    pub gate: ConditioningGate,
    /// Keep the per-step denoised predictions (x0 estimates).
    pub save_denoised: bool,
}

impl SampleOptions {
    pub fn new(frames: usize, height: usize, width: usize, steps: usize) -> Self {
        Self {
            frames,
            height,
            width,
            steps,
            guidance: GuidanceWeights::off(),
            gate: ConditioningGate::default_camera(),
            save_denoised: false,
        }
    }
}

pub struct SampleOutput {
    /// Generated video, [F, 3, H, W].
    pub video: Tensor,
    /// (t, denoised prediction) per step, plus the final (0, video) entry,
    /// when requested.
    pub denoised: Vec<(f64, Tensor)>,
}

/// Deterministic Euler integration from t = 1 to t = 0 with `steps` uniform
/// steps. Camera conditioning is supplied only when t lies inside the gate.
/// A fixed rng state reproduces outputs bit-exactly.
pub fn sample(
    state: &ModelState,
    trajectory: Option<&CameraTrajectory>,
    text: Option<&[u16]>,
    opts: &SampleOptions,
    rng: &mut ChaCha8Rng,
) -> Result<SampleOutput, DiffusionError> {
    if opts.steps == 0 {
        return Err(DiffusionError::BadInput("steps must be >= 1".into()));
    }
    let plucker =
        trajectory.map(|traj| plucker_volume(traj, opts.height, opts.width));
    if let Some(traj) = trajectory {
        if traj.len() != opts.frames {
            return Err(DiffusionError::BadInput(format!(
                "trajectory has {} frames, sampling asked for {}",
                traj.len(),
                opts.frames
            )));
        }
    }

    let n = opts.frames * 3 * opts.height * opts.width;
    let mut x: Vec<f32> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect();
    let dims = vec![opts.frames, 3, opts.height, opts.width];
    let dt = 1.0 / opts.steps as f64;
    let mut denoised = Vec::new();

    for k in 0..opts.steps {
        let t = 1.0 - k as f64 * dt;
        let x_t = Tensor::new(dims.clone(), x.clone()).unwrap();
        let v = guided_velocity(
            state,
            &x_t,
            t,
            text,
            plucker.as_ref(),
            &opts.guidance,
            &opts.gate,
        )?;
        if opts.save_denoised {
            let x0: Vec<f32> = x
                .iter()
                .zip(v.data())
                .map(|(&xv, &vv)| (xv as f64 - t * vv as f64) as f32)
                .collect();
            denoised.push((t, Tensor::new(dims.clone(), x0).unwrap()));
        }
        for (xv, &vv) in x.iter_mut().zip(v.data()) {
            *xv = (*xv as f64 - dt * vv as f64) as f32;
        }
    }
    let video = Tensor::new(dims, x).unwrap();
    if opts.save_denoised {
        denoised.push((0.0, video.clone()));
    }
    Ok(SampleOutput { video, denoised })
}
