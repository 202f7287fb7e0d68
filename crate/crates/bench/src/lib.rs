//! Shared fixtures for the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ac3d_core::synth::{render_clip, Mode, SceneSpec, SynthClip};

/// A small camera-motion clip reused across benches.
pub fn bench_clip(frames: usize, side: usize) -> SynthClip {
    let spec = SceneSpec {
        mode: Mode::CameraMotion,
        texture_seed: 7,
        yaw_rate: 0.03,
        translation_velocity: [0.0, 0.0, 0.0],
        sprite_count: 2,
        sprite_speed: 0.0,
        sprite_size: 4.0,
        frames,
        height: side,
        width: side,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    render_clip(&spec, &mut rng).unwrap()
}
