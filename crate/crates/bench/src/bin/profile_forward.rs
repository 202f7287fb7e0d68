// quick decomposition: time forward with varying pieces
use std::time::Instant;
use ac3d_core::diffusion::{forward, BoundModel, FeedbackMode, ForwardInput, ModelConfig, ModelState};
use ac3d_core::camera::plucker_volume;
use ac3d_bench::bench_clip;

fn time_fwd(cfg: &ModelConfig, with_cam: bool, label: &str) {
    let state = ModelState::init(cfg.clone(), 5).unwrap();
    let clip = bench_clip(17, 32);
    let plucker = plucker_volume(&clip.trajectory, 32, 32);
    // warmup
    for _ in 0..2 {
        let mut bound: BoundModel<f32> = BoundModel::bind(&state, |_| true);
        let _ = forward(&mut bound, cfg, &ForwardInput { x_t: &clip.video, t: 0.8, text: Some(&clip.tokens), plucker: if with_cam { Some(&plucker) } else { None } }).unwrap();
    }
    let t0 = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let mut bound: BoundModel<f32> = BoundModel::bind(&state, |_| true);
        let _ = forward(&mut bound, cfg, &ForwardInput { x_t: &clip.video, t: 0.8, text: Some(&clip.tokens), plucker: if with_cam { Some(&plucker) } else { None } }).unwrap();
    }
    println!("{label}: {:.1} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);
}

fn main() {
    let base = ModelConfig { n_blocks: 4, d_main: 64, n_heads: 4, patch: 4, temporal_compress: 4,
        d_cam: 32, cam_heads: 4, cam_inject_blocks: vec![1], rope_split: (2,1,1), vocab: 64,
        feedback: FeedbackMode::CameraReadsVideo };
    time_fwd(&base, true, "4 blocks, 4 heads, cam");
    time_fwd(&base, false, "4 blocks, 4 heads, no cam");
    let mut c = base.clone(); c.n_blocks = 1; c.cam_inject_blocks = vec![];
    time_fwd(&c, false, "1 block , 4 heads, no cam");
    let mut c2 = base.clone(); c2.n_heads = 2;
    time_fwd(&c2, true, "4 blocks, 2 heads, cam");
    let mut c3 = base.clone(); c3.patch = 8; c3.d_cam = 32;
    time_fwd(&c3, true, "4 blocks, 4 heads, cam, patch8");
}
