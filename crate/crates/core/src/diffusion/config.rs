//! Model hyperparameters, noise schedules, guidance weights, and the flat
//! key-value config file format.


use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::DiffusionError;

/// Which way the camera-branch cross-attention runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeedbackMode {
    /// Camera tokens query video tokens (the feedback reading).
    #[default]
    CameraReadsVideo,
    /// Video tokens query camera tokens; the result is pooled back onto the
    /// camera grid (the literal reading of the phrase).
    VideoReadsCamera,
}

impl FeedbackMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeedbackMode::CameraReadsVideo => "camera-queries-video",
            FeedbackMode::VideoReadsCamera => "video-queries-camera",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "camera-queries-video" => Some(Self::CameraReadsVideo),
            "video-queries-camera" => Some(Self::VideoReadsCamera),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_main: usize,
    pub n_heads: usize,
    /// Spatial patch size of the pixel-space patchifier.
    pub patch: usize,
    /// Temporal compression of the camera encoder.
    pub temporal_compress: usize,
    pub d_cam: usize,
    pub cam_heads: usize,
    /// 1-based main-block indices that receive the camera injection.
    pub cam_inject_blocks: Vec<usize>,
    /// Per-axis RoPE share (temporal : vertical : horizontal).
    pub rope_split: (usize, usize, usize),
    pub vocab: usize,
    pub feedback: FeedbackMode,
}

/// First quarter of the blocks (at least one).
pub fn default_inject_blocks(n_blocks: usize) -> Vec<usize> {
    (1..=(n_blocks / 4).max(1)).collect()
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 8,
            d_main: 256,
            n_heads: 4,
            patch: 2,
            temporal_compress: 4,
            d_cam: 64,
            cam_heads: 4,
            cam_inject_blocks: default_inject_blocks(8),
            rope_split: (2, 1, 1),
            vocab: 64,
            feedback: FeedbackMode::CameraReadsVideo,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |reason: String| Err(DiffusionError::BadConfig(reason));
        if self.n_blocks == 0 || self.vocab == 0 || self.patch == 0 {
            return bad("n_blocks, vocab, and patch must be >= 1".into());
        }
        if self.d_main % self.n_heads != 0 {
            return bad(format!("d_main {} not divisible by n_heads {}", self.d_main, self.n_heads));
        }
        if self.d_cam % self.cam_heads != 0 {
            return bad(format!("d_cam {} not divisible by cam_heads {}", self.d_cam, self.cam_heads));
        }
        let (a, b, c) = self.rope_split;
        if a == 0 || b == 0 || c == 0 {
            return bad("rope_split parts must be positive".into());
        }
        for (label, dim, heads) in
            [("d_main", self.d_main, self.n_heads), ("d_cam", self.d_cam, self.cam_heads)]
        {
            let hd = dim / heads;
            if hd % 2 != 0 || (hd / 2) % (a + b + c) != 0 {
                return bad(format!(
                    "{label} head dim {hd} incompatible with rope split {a}:{b}:{c}"
                ));
            }
        }
        if self.temporal_compress == 0 {
            return bad("temporal_compress must be >= 1".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for &i in &self.cam_inject_blocks {
            if i == 0 || i > self.n_blocks {
                return bad(format!("cam_inject_blocks entry {i} outside 1..={}", self.n_blocks));
            }
            if !seen.insert(i) {
                return bad(format!("cam_inject_blocks entry {i} duplicated"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_main / self.n_heads
    }

    pub fn has_camera_branch(&self) -> bool {
        !self.cam_inject_blocks.is_empty()
    }
}

/// Rectified-flow noise-level distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSchedule {
    LogitNormal { loc: f64, scale: f64 },
    TruncatedNormal { loc: f64, scale: f64, lo: f64, hi: f64 },
}

impl NoiseSchedule {
    /// Base schedule used for backbone training.
    pub fn base() -> Self {
        NoiseSchedule::LogitNormal { loc: 0.0, scale: 1.0 }
    }

    /// Biased, truncated schedule used for camera-branch training.
    pub fn camera_training() -> Self {
        NoiseSchedule::TruncatedNormal { loc: 0.8, scale: 0.075, lo: 0.6, hi: 1.0 }
    }
}

/// Draws a noise level: sigmoid(loc + scale z) for the logit-normal or
/// rejection-sampled loc + scale z into [lo, hi] for the truncated normal.
pub fn sample_noise_level(sched: &NoiseSchedule, rng: &mut ChaCha8Rng) -> f64 {
    match *sched {
        NoiseSchedule::LogitNormal { loc, scale } => {
            let z: f64 = StandardNormal.sample(rng);
            1.0 / (1.0 + (-(loc + scale * z)).exp())
        }
        NoiseSchedule::TruncatedNormal { loc, scale, lo, hi } => {
            if scale == 0.0 {
                return loc.clamp(lo, hi);
            }
            loop {
                let z: f64 = StandardNormal.sample(rng);
                let x = loc + scale * z;
                if (lo..=hi).contains(&x) {
                    return x;
                }
            }
        }
    }
}

/// Separate text/camera classifier-free guidance weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceWeights {
    pub w_text: f64,
    pub w_camera: f64,
}

impl GuidanceWeights {
    pub fn new(w_text: f64, w_camera: f64) -> Result<Self, DiffusionError> {
        if !w_text.is_finite() || !w_camera.is_finite() {
            return Err(DiffusionError::BadConfig("guidance weights must be finite".into()));
        }
        Ok(Self { w_text, w_camera })
    }

    pub fn off() -> Self {
        Self { w_text: 0.0, w_camera: 0.0 }
    }
}

/// Noise interval inside which camera conditioning is applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditioningGate {
    pub lo: f64,
    pub hi: f64,
}

impl ConditioningGate {
    pub fn new(lo: f64, hi: f64) -> Result<Self, DiffusionError> {
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(DiffusionError::BadConfig(format!(
                "gate [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"
            )));
        }
        Ok(Self { lo, hi })
    }

    /// Default gate matching the camera-training noise interval.
    pub fn default_camera() -> Self {
        Self { lo: 0.6, hi: 1.0 }
    }

    pub fn admits(&self, t: f64) -> bool {
        (self.lo..=self.hi).contains(&t)
    }
}

/// One training triplet: video in [-1, 1], caption tokens, optional camera.
#[derive(Debug, Clone)]
pub struct BatchSample {
    pub video: crate::tensorio::Tensor,
    pub text_tokens: Vec<u16>,
    pub plucker: Option<crate::camera::PluckerVolume>,
    pub camera_present: bool,
    pub text_present: bool,
}

fn parse_usize(key: &str, v: &str) -> Result<usize, DiffusionError> {
    v.parse().map_err(|_| DiffusionError::BadConfig(format!("{key}: expected integer, got `{v}`")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64, DiffusionError> {
    v.parse().map_err(|_| DiffusionError::BadConfig(format!("{key}: expected number, got `{v}`")))
}

/// Parses the flat `key = value` config format. Unknown keys are rejected.
/// Schedule keys are optional; when `schedule` is present the loc/scale
/// (and lo/hi for the truncated kind) must accompany it.
pub fn parse_config(text: &str) -> Result<(ModelConfig, Option<NoiseSchedule>), DiffusionError> {
    let mut cfg = ModelConfig::default();
    let mut inject_set_explicitly = false;
    let mut sched_kind: Option<String> = None;
    let mut sched_loc = None;
    let mut sched_scale = None;
    let mut sched_lo = None;
    let mut sched_hi = None;
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            DiffusionError::BadConfig(format!("line {}: expected `key = value`", ln + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "n_blocks" => cfg.n_blocks = parse_usize(key, value)?,
            "d_main" => cfg.d_main = parse_usize(key, value)?,
            "n_heads" => cfg.n_heads = parse_usize(key, value)?,
            "patch" => cfg.patch = parse_usize(key, value)?,
            "temporal_compress" => cfg.temporal_compress = parse_usize(key, value)?,
            "d_cam" => cfg.d_cam = parse_usize(key, value)?,
            "cam_heads" => cfg.cam_heads = parse_usize(key, value)?,
            "cam_inject_blocks" => {
                inject_set_explicitly = true;
                cfg.cam_inject_blocks = if value.is_empty() || value == "none" {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|s| parse_usize(key, s.trim()))
                        .collect::<Result<_, _>>()?
                };
            }
            "rope_split" => {
                let parts: Vec<&str> = value.split(':').collect();
                if parts.len() != 3 {
                    return Err(DiffusionError::BadConfig(format!(
                        "rope_split: expected a:b:c, got `{value}`"
                    )));
                }
                cfg.rope_split = (
                    parse_usize(key, parts[0])?,
                    parse_usize(key, parts[1])?,
                    parse_usize(key, parts[2])?,
                );
            }
            "vocab" => cfg.vocab = parse_usize(key, value)?,
            "feedback" => {
                cfg.feedback = FeedbackMode::parse(value).ok_or_else(|| {
                    DiffusionError::BadConfig(format!("feedback: unknown mode `{value}`"))
                })?
            }
            "schedule" => sched_kind = Some(value.to_string()),
            "sched_loc" => sched_loc = Some(parse_f64(key, value)?),
            "sched_scale" => sched_scale = Some(parse_f64(key, value)?),
            "sched_lo" => sched_lo = Some(parse_f64(key, value)?),
            "sched_hi" => sched_hi = Some(parse_f64(key, value)?),
            other => {
                return Err(DiffusionError::BadConfig(format!("unknown config key `{other}`")))
            }
        }
    }
    if !inject_set_explicitly {
        cfg.cam_inject_blocks = default_inject_blocks(cfg.n_blocks);
    }
    cfg.validate()?;
    let sched = match sched_kind.as_deref() {
        None => None,
        Some("logit-normal") => Some(NoiseSchedule::LogitNormal {
            loc: sched_loc.unwrap_or(0.0),
            scale: sched_scale.unwrap_or(1.0),
        }),
        Some("truncated-normal") => Some(NoiseSchedule::TruncatedNormal {
            loc: sched_loc.unwrap_or(0.8),
            scale: sched_scale.unwrap_or(0.075),
            lo: sched_lo.unwrap_or(0.6),
            hi: sched_hi.unwrap_or(1.0),
        }),
        Some(other) => {
            return Err(DiffusionError::BadConfig(format!("unknown schedule kind `{other}`")))
        }
    };
    Ok((cfg, sched))
}

pub fn write_config(cfg: &ModelConfig, sched: Option<&NoiseSchedule>) -> String {
    let inject = if cfg.cam_inject_blocks.is_empty() {
        "none".to_string()
    } else {
        cfg.cam_inject_blocks.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
    };
    let mut out = format!(
        "n_blocks = {}\nd_main = {}\nn_heads = {}\npatch = {}\ntemporal_compress = {}\n\
         d_cam = {}\ncam_heads = {}\ncam_inject_blocks = {}\nrope_split = {}:{}:{}\n\
         vocab = {}\nfeedback = {}\n",
        cfg.n_blocks,
        cfg.d_main,
        cfg.n_heads,
        cfg.patch,
        cfg.temporal_compress,
        cfg.d_cam,
        cfg.cam_heads,
        inject,
        cfg.rope_split.0,
        cfg.rope_split.1,
        cfg.rope_split.2,
        cfg.vocab,
        cfg.feedback.as_str(),
    );
    match sched {
        Some(NoiseSchedule::LogitNormal { loc, scale }) => {
            out.push_str(&format!("schedule = logit-normal\nsched_loc = {loc}\nsched_scale = {scale}\n"));
        }
        Some(NoiseSchedule::TruncatedNormal { loc, scale, lo, hi }) => {
            out.push_str(&format!(
                "schedule = truncated-normal\nsched_loc = {loc}\nsched_scale = {scale}\nsched_lo = {lo}\nsched_hi = {hi}\n"
            ));
        }
        None => {}
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn default_config_is_valid_with_first_quarter_injection() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.cam_inject_blocks, vec![1, 2]);
        assert_eq!(default_inject_blocks(32), (1..=8).collect::<Vec<_>>());
    }

    #[test]
    fn config_roundtrips_through_text() {
        let mut cfg = ModelConfig::default();
        cfg.n_blocks = 4;
        cfg.d_main = 64;
        cfg.cam_inject_blocks = vec![1];
        cfg.feedback = FeedbackMode::VideoReadsCamera;
        let sched = NoiseSchedule::camera_training();
        let text = write_config(&cfg, Some(&sched));
        let (back, back_sched) = parse_config(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back_sched, Some(sched));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            parse_config("n_blocks = 4\nbogus = 1\n"),
            Err(DiffusionError::BadConfig(_))
        ));
    }

    #[test]
    fn invalid_rope_split_is_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.d_main = 24; // head dim 6: 3 pairs, not divisible by 4
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn truncated_schedule_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sched = NoiseSchedule::camera_training();
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let t = sample_noise_level(&sched, &mut rng);
            assert!((0.6..=1.0).contains(&t), "sample {t} out of bounds");
            sum += t;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.8).abs() < 0.003, "mean {mean}");
    }

    #[test]
    fn degenerate_truncated_schedule_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sched = NoiseSchedule::TruncatedNormal { loc: 0.8, scale: 0.0, lo: 0.6, hi: 1.0 };
        for _ in 0..100 {
            assert_eq!(sample_noise_level(&sched, &mut rng), 0.8);
        }
    }

    #[test]
    fn logit_normal_median_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sched = NoiseSchedule::base();
        let n = 100_000;
        let mut samples: Vec<f64> = (0..n).map(|_| sample_noise_level(&sched, &mut rng)).collect();
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = samples[n / 2];
        assert!((median - 0.5).abs() < 0.01, "median {median}");
        assert!(samples.iter().all(|&t| t > 0.0 && t < 1.0));
    }

    #[test]
    fn gate_validation() {
        assert!(ConditioningGate::new(0.6, 1.0).is_ok());
        assert!(ConditioningGate::new(-0.1, 0.5).is_err());
        assert!(ConditioningGate::new(0.2, 1.2).is_err());
        assert!(ConditioningGate::new(0.7, 0.4).is_err());
        let g = ConditioningGate::default_camera();
        assert!(g.admits(0.6) && g.admits(1.0) && !g.admits(0.59));
    }

    #[test]
    fn guidance_weights_must_be_finite() {
        assert!(GuidanceWeights::new(2.0, 3.0).is_ok());
        assert!(GuidanceWeights::new(f64::NAN, 0.0).is_err());
        assert!(GuidanceWeights::new(0.0, f64::INFINITY).is_err());
    }
}
