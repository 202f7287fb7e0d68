use std::time::Instant;
use ac3d_core::diffusion::{encode_camera, BoundModel, FeedbackMode, ModelConfig, ModelState};
use ac3d_core::camera::plucker_volume;
use ac3d_bench::bench_clip;

fn main() {
    let cfg = ModelConfig { n_blocks: 4, d_main: 64, n_heads: 4, patch: 4, temporal_compress: 4,
        d_cam: 32, cam_heads: 4, cam_inject_blocks: vec![1], rope_split: (2,1,1), vocab: 64,
        feedback: FeedbackMode::CameraReadsVideo };
    let state = ModelState::init(cfg.clone(), 5).unwrap();
    let clip = bench_clip(17, 32);
    let t0 = Instant::now();
    let plucker = plucker_volume(&clip.trajectory, 32, 32);
    println!("plucker_volume: {:.1} ms", t0.elapsed().as_secs_f64()*1e3);
    for _ in 0..2 {
        let mut bound: BoundModel<f32> = BoundModel::bind(&state, |_| true);
        let _ = encode_camera(&mut bound, &cfg, &plucker).unwrap();
    }
    let t0 = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let mut bound: BoundModel<f32> = BoundModel::bind(&state, |_| true);
        let _ = encode_camera(&mut bound, &cfg, &plucker).unwrap();
    }
    println!("bind+encode_camera: {:.1} ms", t0.elapsed().as_secs_f64()*1e3/reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps { let bound: BoundModel<f32> = BoundModel::bind(&state, |_| true); std::hint::black_box(&bound); }
    println!("bind alone: {:.1} ms", t0.elapsed().as_secs_f64()*1e3/reps as f64);
}
