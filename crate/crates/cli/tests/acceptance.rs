//! Acceptance: every subcommand with a fixed seed is byte-identical across
//! two runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use ac3d_core::tensorio::{self, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run(args: &[&str], dir: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_ac3d"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn ac3d");
    assert!(
        out.status.code() == Some(0),
        "command {:?} failed ({:?}): {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Byte content of every file under a path (file or directory), keyed by
/// relative path.
fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, path: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            entries.sort();
            for e in entries {
                walk(root, &e, out);
            }
        } else {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.insert(rel, std::fs::read(path).unwrap());
        }
    }
    let mut out = BTreeMap::new();
    assert!(root.exists(), "missing output {}", root.display());
    walk(root, root, &mut out);
    out
}

fn assert_identical(a: &Path, b: &Path, what: &str) {
    let ta = tree_bytes(a);
    let tb = tree_bytes(b);
    assert_eq!(
        ta.keys().collect::<Vec<_>>(),
        tb.keys().collect::<Vec<_>>(),
        "{what}: file sets differ"
    );
    for (k, va) in &ta {
        assert_eq!(va, &tb[k], "{what}: file {k} differs between runs");
    }
}

/// Runs the same argv twice with outputs substituted into per-run
/// directories and asserts byte-identical results.
fn check_twice(dir: &Path, name: &str, args: &[&str], outputs: &[&str]) {
    for run_id in ["a", "b"] {
        let sub = dir.join(format!("{name}-{run_id}"));
        std::fs::create_dir_all(&sub).unwrap();
        let substituted: Vec<String> = args
            .iter()
            .map(|a| a.replace("{RUN}", &format!("{name}-{run_id}")))
            .collect();
        run(&substituted.iter().map(|s| s.as_str()).collect::<Vec<_>>(), dir);
    }
    for out in outputs {
        assert_identical(
            &dir.join(format!("{name}-a")).join(out),
            &dir.join(format!("{name}-b")).join(out),
            &format!("{name}:{out}"),
        );
    }
    println!("  determinism ok: {name}");
}

#[test]
fn criterion_9_every_subcommand_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // Shared fixtures.
    run(
        &[
            "synth-gen", "--out", "ds", "--n", "4", "--mix", "camera=0.5,scene=0.5", "--frames",
            "8", "--height", "16", "--width", "16", "--seed", "7",
        ],
        dir,
    );
    // Two frames for flow-estimate.
    let video = tensorio::read_tensor(&dir.join("ds/clip0000_video.tnsr")).unwrap();
    let (c, h, w) = (video.dims()[1], video.dims()[2], video.dims()[3]);
    let frame_len = c * h * w;
    for (name, f) in [("f0.tnsr", 0usize), ("f1.tnsr", 1)] {
        let t = Tensor::new(
            vec![c, h, w],
            video.data()[f * frame_len..(f + 1) * frame_len].to_vec(),
        )
        .unwrap();
        tensorio::write_tensor(&t, &dir.join(name)).unwrap();
    }
    // Denoised-prediction tree for spectrum-timesteps.
    for (t_name, f) in [("t_0", 0usize), ("t_0.5", 1)] {
        let sub = dir.join("den").join(t_name);
        std::fs::create_dir_all(&sub).unwrap();
        let t = Tensor::new(
            vec![video.dims()[0], c, h, w],
            video.data().iter().map(|&v| v * (1.0 + f as f32)).collect(),
        )
        .unwrap();
        tensorio::write_tensor(&t, &sub.join("v.tnsr")).unwrap();
    }
    // Activation dumps and pose targets for the probe commands.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    std::fs::create_dir_all(dir.join("acts")).unwrap();
    let frames = 3usize;
    let mut target_data = Vec::new();
    for vid in 0..5 {
        for fi in 0..frames {
            for j in 0..6 {
                let v: f32 =
                    if fi == 0 { 0.0 } else { rng.random_range(-0.2..0.2) * (j as f32 + 1.0) };
                target_data.push(v);
            }
        }
        for block in [1usize, 2] {
            for level in [4u8, 8] {
                let data: Vec<f32> = (0..6 * 2 * 2 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
                let t = Tensor::new(vec![6, 2, 2, 2], data).unwrap();
                tensorio::write_tensor(
                    &t,
                    &dir.join(format!("acts/act_b{block}_s{level}_v{vid}.tnsr")),
                )
                .unwrap();
            }
        }
    }
    tensorio::write_tensor(
        &Tensor::new(vec![5, frames, 6], target_data).unwrap(),
        &dir.join("targets.tnsr"),
    )
    .unwrap();
    std::fs::write(
        dir.join("cfg.txt"),
        "n_blocks = 2\nd_main = 32\nn_heads = 2\npatch = 4\nd_cam = 16\ncam_heads = 2\ncam_inject_blocks = 1\nvocab = 64\n",
    )
    .unwrap();

    check_twice(
        dir,
        "synthgen",
        &[
            "synth-gen", "--out", "{RUN}/ds", "--n", "4", "--mix", "camera=0.5,static=0.5",
            "--frames", "6", "--height", "16", "--width", "16", "--seed", "3",
        ],
        &["ds"],
    );
    check_twice(
        dir,
        "parse",
        &["cameras-parse", "ds/clip0000_traj.txt", "--report", "{RUN}/report.txt"],
        &["report.txt"],
    );
    check_twice(
        dir,
        "plucker",
        &[
            "cameras-plucker", "ds/clip0000_traj.txt", "--height", "8", "--width", "8", "--out",
            "{RUN}/vol.tnsr",
        ],
        &["vol.tnsr"],
    );
    // Rescale fixture: points + doubled metric depth from the dataset camera.
    {
        let mut pts = Vec::new();
        for i in 0..30 {
            let z = 3.0 + 0.1 * i as f32;
            pts.extend([((i % 6) as f32 / 6.0 - 0.5) * z, ((i % 4) as f32 / 4.0 - 0.5) * z, z]);
        }
        tensorio::write_tensor(
            &Tensor::new(vec![30, 3], pts).unwrap(),
            &dir.join("points.tnsr"),
        )
        .unwrap();
        let raw = tensorio::parse_trajectory(&dir.join("ds/clip0000_traj.txt")).unwrap();
        let traj = ac3d_core::camera::build_trajectory(&raw).unwrap();
        let mut metric = Vec::new();
        for frame in &traj.frames {
            let pts: Vec<nalgebra::Vector3<f64>> = (0..30)
                .map(|i| {
                    let z = 3.0 + 0.1 * i as f64;
                    nalgebra::Vector3::new(
                        ((i % 6) as f64 / 6.0 - 0.5) * z,
                        ((i % 4) as f64 / 4.0 - 0.5) * z,
                        z,
                    )
                })
                .collect();
            let sparse = ac3d_core::rescale::render_sparse_depth(
                &pts,
                &frame.intrinsics,
                &frame.extrinsics,
                12,
                12,
            );
            metric.extend(sparse.data().iter().map(|&d| 2.0 * d));
        }
        tensorio::write_tensor(
            &Tensor::new(vec![traj.len(), 12, 12], metric).unwrap(),
            &dir.join("metric.tnsr"),
        )
        .unwrap();
    }
    check_twice(
        dir,
        "rescale",
        &[
            "cameras-rescale", "ds/clip0000_traj.txt", "--points", "points.tnsr",
            "--metric-depth", "metric.tnsr", "--out", "{RUN}/rescaled.txt", "--report",
            "{RUN}/report.txt",
        ],
        &["rescaled.txt", "report.txt"],
    );
    check_twice(
        dir,
        "score",
        &[
            "cameras-score", "--reference", "ds/clip0000_traj.txt", "--candidate",
            "ds/clip0001_traj.txt", "--report", "{RUN}/report.txt",
        ],
        &["report.txt"],
    );
    check_twice(
        dir,
        "flow",
        &["flow-estimate", "--src", "f0.tnsr", "--dst", "f1.tnsr", "--out", "{RUN}/flow.tnsr"],
        &["flow.tnsr"],
    );
    run(&["flow-estimate", "--src", "f0.tnsr", "--dst", "f1.tnsr", "--out", "flow.tnsr"], dir);
    check_twice(
        dir,
        "spectrum",
        &["spectrum", "flow.tnsr", "--out", "{RUN}/spec.csv", "--bins", "16"],
        &["spec.csv"],
    );
    check_twice(
        dir,
        "spectrumts",
        &["spectrum-timesteps", "--input", "den", "--out", "{RUN}/ts.csv", "--bins", "16"],
        &["ts.csv"],
    );
    check_twice(
        dir,
        "probepca",
        &[
            "probe-pca", "--acts", "acts", "--block", "1", "--sigma-level", "4", "--k", "3",
            "--out", "{RUN}/basis.tnsr", "--report", "{RUN}/report.txt",
        ],
        &["basis.tnsr", "report.txt"],
    );
    check_twice(
        dir,
        "probefit",
        &[
            "probe-fit", "--acts", "acts", "--targets", "targets.tnsr", "--block", "1",
            "--sigma-level", "4", "--k", "3", "--alpha", "10", "--train-fraction", "0.8",
            "--report", "{RUN}/report.txt",
        ],
        &["report.txt"],
    );
    check_twice(
        dir,
        "probesweep",
        &[
            "probe-sweep", "--acts", "acts", "--targets", "targets.tnsr", "--k", "3", "--alpha",
            "10", "--train-fraction", "0.8", "--out", "{RUN}/sweep.csv",
        ],
        &["sweep.csv"],
    );
    check_twice(
        dir,
        "train",
        &[
            "train", "--data", "ds", "--out", "{RUN}/ckpt", "--phase", "both", "--steps", "12",
            "--steps2", "8", "--batch", "2", "--config", "cfg.txt", "--seed", "21",
        ],
        &["ckpt"],
    );
    run(
        &[
            "train", "--data", "ds", "--out", "ckpt", "--phase", "both", "--steps", "12",
            "--steps2", "8", "--batch", "2", "--config", "cfg.txt", "--seed", "21",
        ],
        dir,
    );
    check_twice(
        dir,
        "sample",
        &[
            "sample", "--ckpt", "ckpt", "--out", "{RUN}/video.tnsr", "--trajectory",
            "ds/clip0000_traj.txt", "--caption", "camera pans", "--steps", "4",
            "--guidance-camera", "2", "--frames", "8", "--height", "16", "--width", "16",
            "--save-denoised", "{RUN}/den", "--seed", "33",
        ],
        &["video.tnsr", "den"],
    );

    println!("PASS criterion 9: every subcommand byte-identical across two seeded runs");
}
