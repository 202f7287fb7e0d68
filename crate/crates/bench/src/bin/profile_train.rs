use std::time::Instant;
use ac3d_core::diffusion::{train, BatchSample, FeedbackMode, ModelConfig, ModelState, TrainOptions, TrainPhase};
use ac3d_core::camera::plucker_volume;
use ac3d_core::synth::{make_dataset, DatasetTemplate, Mode};

fn main() {
    let cfg = ModelConfig { n_blocks: 3, d_main: 64, n_heads: 2, patch: 4, temporal_compress: 4,
        d_cam: 32, cam_heads: 2, cam_inject_blocks: vec![1], rope_split: (2,1,1), vocab: 64,
        feedback: FeedbackMode::CameraReadsVideo };
    let template = DatasetTemplate { frames: 17, height: 32, width: 32, ..Default::default() };
    let clips = make_dataset(8, &[(Mode::CameraMotion, 0.5), (Mode::SceneMotion, 0.5)], &template, 3).unwrap();
    let data: Vec<BatchSample> = clips.into_iter().map(|(_, c)| BatchSample {
        plucker: Some(plucker_volume(&c.trajectory, 32, 32)),
        video: c.video, text_tokens: c.tokens, camera_present: true, text_present: true,
    }).collect();

    for (label, phase) in [("phase1", TrainPhase::Backbone), ("phase2", TrainPhase::CameraBranch)] {
        let mut state = ModelState::init(cfg.clone(), 5).unwrap();
        let mut opts = TrainOptions::phase1(4, 2, 7);
        opts.phase = phase;
        if phase == TrainPhase::CameraBranch { opts.schedule = ac3d_core::diffusion::NoiseSchedule::camera_training(); }
        let t0 = Instant::now();
        train(&mut state, &data, &opts).unwrap();
        println!("{label} step (batch 2): {:.0} ms", t0.elapsed().as_secs_f64() * 1e3 / 4.0);
    }
}
