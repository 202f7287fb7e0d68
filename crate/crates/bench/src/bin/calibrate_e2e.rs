// End-to-end steering calibration: train the toy two-phase recipe on a
// camera/scene mix, then measure flow-sign agreement and per-timestep
// spectra on conditioned samples.
use std::time::Instant;

use ac3d_core::camera::plucker_volume;
use ac3d_core::diffusion::{
    sample, train, BatchSample, ConditioningGate, FeedbackMode, GuidanceWeights, ModelConfig,
    ModelState, SampleOptions, TrainOptions,
};
use ac3d_core::flow::{estimate_flow, per_timestep_spectra, FlowConfig, SpectraConfig};
use ac3d_core::synth::{self, make_dataset, DatasetTemplate, Mode, SceneSpec};
use ac3d_core::tensorio::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let p1_steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(700);
    let p2_steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(500);
    let n_seeds: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20);
    let w_c: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(4.0);
    let blocks: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(3);
    let p2_lr: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let yaw_lo: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.04);
    let yaw_hi: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(0.08);

    let cfg = ModelConfig {
        n_blocks: blocks,
        d_main: 64,
        n_heads: 2,
        patch: 4,
        temporal_compress: 4,
        d_cam: 32,
        cam_heads: 2,
        cam_inject_blocks: vec![1],
        rope_split: (2, 1, 1),
        vocab: 64,
        feedback: FeedbackMode::CameraReadsVideo,
    };
    let template = DatasetTemplate {
        frames: 17,
        height: 32,
        width: 32,
        yaw_range: (yaw_lo, yaw_hi),
        translation_range: (0.0, 0.0),
        ..Default::default()
    };
    let t0 = Instant::now();
    let clips = make_dataset(
        96,
        &[(Mode::CameraMotion, 0.625), (Mode::SceneMotion, 0.375)],
        &template,
        1001,
    )
    .unwrap();
    let data: Vec<BatchSample> = clips
        .into_iter()
        .map(|(_, c)| BatchSample {
            plucker: Some(plucker_volume(&c.trajectory, 32, 32)),
            video: c.video,
            text_tokens: c.tokens,
            camera_present: true,
            text_present: true,
        })
        .collect();
    println!("dataset: {:.1}s", t0.elapsed().as_secs_f64());

    let mut state = ModelState::init(cfg.clone(), 2024).unwrap();
    let t0 = Instant::now();
    let log1 = train(&mut state, &data, &TrainOptions::phase1(p1_steps, 2, 11)).unwrap();
    println!(
        "phase1 {p1_steps} steps: {:.1}s (loss {:.3} -> {:.3})",
        t0.elapsed().as_secs_f64(),
        log1[..20.min(log1.len())].iter().map(|r| r.loss).sum::<f64>() / 20f64.min(log1.len() as f64),
        log1[log1.len().saturating_sub(20)..].iter().map(|r| r.loss).sum::<f64>()
            / 20f64.min(log1.len() as f64)
    );
    let t0 = Instant::now();
    let mut p2_opts = TrainOptions::phase2(p2_steps, 2, 12);
    p2_opts.lr = p2_lr;
    let log2 = train(&mut state, &data, &p2_opts).unwrap();
    println!(
        "phase2 {p2_steps} steps: {:.1}s (loss {:.3} -> {:.3})",
        t0.elapsed().as_secs_f64(),
        log2[..20.min(log2.len())].iter().map(|r| r.loss).sum::<f64>() / 20f64.min(log2.len() as f64),
        log2[log2.len().saturating_sub(20)..].iter().map(|r| r.loss).sum::<f64>()
            / 20f64.min(log2.len() as f64)
    );

    // Steering: neutral caption, camera guidance only.
    let yaw_traj = |yaw: f64| {
        let spec = SceneSpec {
            mode: Mode::CameraMotion,
            texture_seed: 0,
            yaw_rate: yaw,
            translation_velocity: [0.0; 3],
            sprite_count: 0,
            sprite_speed: 0.0,
            sprite_size: 3.0,
            frames: 17,
            height: 32,
            width: 32,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        synth::render_clip(&spec, &mut rng).unwrap().trajectory
    };
    // Positive yaw_rate -> content moves left (negative dx).
    let traj_left = yaw_traj((yaw_lo + yaw_hi) / 2.0);
    let traj_right = yaw_traj(-(yaw_lo + yaw_hi) / 2.0);
    let text = synth::tokenize("camera pans").unwrap();

    let mut opts = SampleOptions::new(17, 32, 32, 20);
    opts.guidance = GuidanceWeights::new(0.0, w_c).unwrap();
    opts.gate = ConditioningGate::default_camera();
    let t0 = Instant::now();
    let mut agree = 0usize;
    let mut denoised_stacks: Vec<Vec<(f64, Tensor)>> = Vec::new();
    let flow_cfg = FlowConfig::default();
    for seed in 0..n_seeds {
        let (traj, want_negative) =
            if seed % 2 == 0 { (&traj_left, true) } else { (&traj_right, false) };
        let mut o = opts.clone();
        o.save_denoised = denoised_stacks.len() < 20;
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed as u64);
        let out = sample(&state, Some(traj), Some(&text), &o, &mut rng).unwrap();
        // Mean horizontal flow over a few consecutive pairs.
        let frame = |f: usize| {
            let len = 3 * 32 * 32;
            Tensor::new(vec![3, 32, 32], out.video.data()[f * len..(f + 1) * len].to_vec()).unwrap()
        };
        let mut dx_sum = 0.0f64;
        for f in [4usize, 8, 12] {
            let field = estimate_flow(&frame(f), &frame(f + 1), &flow_cfg).unwrap();
            dx_sum += field.dx.iter().map(|&v| v as f64).sum::<f64>() / field.dx.len() as f64;
        }
        let ok = (dx_sum < 0.0) == want_negative;
        agree += ok as usize;
        if o.save_denoised {
            denoised_stacks.push(out.denoised);
        }
        if seed < 6 {
            println!("  seed {seed}: mean dx {:.3} want_neg {want_negative} ok {ok}", dx_sum / 3.0);
        }
    }
    println!(
        "steering: {agree}/{n_seeds} agree ({:.0}%), sampling {:.1}s",
        100.0 * agree as f64 / n_seeds as f64,
        t0.elapsed().as_secs_f64()
    );

    // Per-timestep spectra of the saved denoised predictions.
    let t0 = Instant::now();
    let mut by_t: std::collections::BTreeMap<u64, (f64, Vec<Tensor>)> = Default::default();
    for stack in &denoised_stacks {
        for (t, pred) in stack {
            let key = (t * 1e6).round() as u64;
            by_t.entry(key).or_insert((*t, Vec::new())).1.push(pred.clone());
        }
    }
    let denoised: Vec<(f64, Vec<Tensor>)> = by_t.into_values().collect();
    let spectra = per_timestep_spectra(&denoised, &SpectraConfig::default()).unwrap();
    let at = spectra.at(0.8).expect("t = 0.8 in the grid");
    let low = at.ratios[0];
    let high = at.ratios[at.ratios.len() - 1];
    println!(
        "spectra at t=0.8: lowest-bin ratio {low:.3} vs highest-bin ratio {high:.3} ({}); {:.1}s",
        if low > high { "OK" } else { "FAIL" },
        t0.elapsed().as_secs_f64()
    );
    for e in &spectra.entries {
        if [1.0, 0.9, 0.8, 0.6, 0.4, 0.2, 0.0].iter().any(|t| (e.t - t).abs() < 1e-9) {
            println!(
                "  t={:.2}: ratios low4 [{:.2} {:.2} {:.2} {:.2}] high4 [{:.2} {:.2} {:.2} {:.2}]",
                e.t,
                e.ratios[0], e.ratios[1], e.ratios[2], e.ratios[3],
                e.ratios[28], e.ratios[29], e.ratios[30], e.ratios[31]
            );
        }
    }
}
