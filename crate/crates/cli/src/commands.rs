use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand_chacha::ChaCha8Rng;

use ac3d_core::camera::{self, CameraTrajectory};
use ac3d_core::diffusion::{
    self, load_checkpoint, loss_log_csv, parse_config, sample as sample_model, save_checkpoint,
    BatchSample, ConditioningGate, GuidanceWeights, ModelConfig, ModelState, NoiseSchedule,
    SampleOptions, TrainOptions,
};
use ac3d_core::flow::{self, FlowConfig, FlowField, SpectraConfig};
use ac3d_core::probe::{self, ActivationRecord, SweepConfig};
use ac3d_core::rescale::{self, Weighting};
use ac3d_core::synth::{self, DatasetTemplate, Mode};
use ac3d_core::tensorio::{self, Tensor};
use ac3d_core::{stage_seed, EulerPoseTargets};
use rand::SeedableRng;

#[derive(Parser)]
#[command(
    name = "ac3d",
    version,
    about = "Camera-trajectory geometry, motion spectral analysis, activation probing, and a toy camera-conditioned video diffusion model",
    disable_help_subcommand = true
)]
pub struct Cli {
    /// Global RNG seed; subcommands derive per-stage sub-seeds from it.
    #[arg(long, global = true, default_value_t = crate::DEFAULT_SEED)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args)]
pub struct FlowArgs {
    /// Maximum pyramid levels (truncated at the minimum side).
    #[arg(long, default_value_t = 4)]
    levels: usize,
    /// Smoothness weight of the quadratic regularizer.
    #[arg(long, default_value_t = 15.0)]
    smoothness: f32,
    /// Refinement iterations per pyramid level.
    #[arg(long, default_value_t = 30)]
    iterations: usize,
}

impl FlowArgs {
    fn config(&self) -> FlowConfig {
        FlowConfig {
            levels: self.levels,
            smoothness: self.smoothness,
            iterations: self.iterations,
            ..FlowConfig::default()
        }
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Parse and validate a camera trajectory text file.
    CamerasParse {
        /// Trajectory text file.
        input: PathBuf,
        /// Write the key=value report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compute the Plücker ray volume of a trajectory as a TNSR tensor.
    CamerasPlucker {
        /// Trajectory text file.
        input: PathBuf,
        /// Pixel rows of the volume.
        #[arg(long)]
        height: usize,
        /// Pixel columns of the volume.
        #[arg(long)]
        width: usize,
        /// Output [F, H, W, 6] TNSR path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Align a trajectory to metric scale from sparse points and metric depths.
    CamerasRescale {
        /// Trajectory text file.
        input: PathBuf,
        /// [N, 3] TNSR tensor of reconstruction points.
        #[arg(long)]
        points: PathBuf,
        /// [F, H, W] TNSR tensor of per-frame metric depths.
        #[arg(long)]
        metric_depth: PathBuf,
        /// Rescaled trajectory output path.
        #[arg(long)]
        out: PathBuf,
        /// Write the key=value report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Average residuals per frame before averaging over frames.
        #[arg(long)]
        per_frame_mean: bool,
    },
    /// Score rotation/translation errors between two trajectories.
    CamerasScore {
        /// Reference trajectory text file.
        #[arg(long)]
        reference: PathBuf,
        /// Candidate trajectory text file.
        #[arg(long)]
        candidate: PathBuf,
        /// Write the key=value report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Estimate dense optical flow between two frames.
    FlowEstimate {
        /// Source frame, [H, W] or [C, H, W] TNSR.
        #[arg(long)]
        src: PathBuf,
        /// Target frame with the same dims.
        #[arg(long)]
        dst: PathBuf,
        /// Output [H, W, 2] TNSR path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flow: FlowArgs,
    },
    /// Compute the radially binned amplitude spectrum of flow fields.
    Spectrum {
        /// [H, W, 2] flow TNSR files.
        #[arg(required = true)]
        flows: Vec<PathBuf>,
        /// Output CSV path (bin_center,amplitude).
        #[arg(long)]
        out: PathBuf,
        /// Radial bin count.
        #[arg(long, default_value_t = 32)]
        bins: usize,
    },
    /// Per-timestep motion spectra of denoised prediction stacks.
    SpectrumTimesteps {
        /// Directory with t_<value>/ subdirectories of [F, C, H, W] TNSR videos.
        #[arg(long)]
        input: PathBuf,
        /// Output CSV path (t,bin_center,amplitude,ratio).
        #[arg(long)]
        out: PathBuf,
        /// Radial bin count.
        #[arg(long, default_value_t = 32)]
        bins: usize,
        /// Anchor stride of the flow pair enumeration.
        #[arg(long, default_value_t = 6)]
        anchor_stride: usize,
        /// Pair horizon past each anchor.
        #[arg(long, default_value_t = 24)]
        horizon: usize,
        #[command(flatten)]
        flow: FlowArgs,
    },
    /// Fit a PCA basis on one (block, noise level) activation cell.
    ProbePca {
        /// Directory of act_b{block}_s{level}_{video}.tnsr dumps.
        #[arg(long)]
        acts: PathBuf,
        /// 1-based block index.
        #[arg(long)]
        block: usize,
        /// Noise level index in 1..=8.
        #[arg(long)]
        sigma_level: u8,
        /// Target channel dimensionality.
        #[arg(long, default_value_t = 16)]
        k: usize,
        /// Fraction of videos (by sorted id) used for fitting.
        #[arg(long, default_value_t = 0.9)]
        train_fraction: f64,
        /// Output basis TNSR ([K+1, D]: mean row, then components).
        #[arg(long)]
        out: PathBuf,
        /// Write the key=value report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fit and evaluate a ridge probe on one (block, noise level) cell.
    ProbeFit {
        /// Directory of act_b{block}_s{level}_{video}.tnsr dumps.
        #[arg(long)]
        acts: PathBuf,
        /// [N, F, 6] pose targets, rows in sorted video-id order.
        #[arg(long)]
        targets: PathBuf,
        /// 1-based block index.
        #[arg(long)]
        block: usize,
        /// Noise level index in 1..=8.
        #[arg(long)]
        sigma_level: u8,
        /// PCA channel dimensionality.
        #[arg(long, default_value_t = 16)]
        k: usize,
        /// Ridge regularization weight.
        #[arg(long, default_value_t = 25000.0)]
        alpha: f64,
        /// Train fraction of videos (by sorted id).
        #[arg(long, default_value_t = 0.9)]
        train_fraction: f64,
        /// Write the key=value report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sweep ridge probes over every (block, noise level) cell.
    ProbeSweep {
        /// Directory of act_b{block}_s{level}_{video}.tnsr dumps.
        #[arg(long)]
        acts: PathBuf,
        /// [N, F, 6] pose targets, rows in sorted video-id order.
        #[arg(long)]
        targets: PathBuf,
        /// Output CSV path (block,sigma,rot_err,trans_err).
        #[arg(long)]
        out: PathBuf,
        /// PCA channel dimensionality.
        #[arg(long, default_value_t = 16)]
        k: usize,
        /// Ridge regularization weight.
        #[arg(long, default_value_t = 25000.0)]
        alpha: f64,
        /// Train fraction of videos (by sorted id).
        #[arg(long, default_value_t = 0.9)]
        train_fraction: f64,
    },
    /// Generate a synthetic dataset with ground-truth cameras and flow.
    SynthGen {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of clips.
        #[arg(long)]
        n: usize,
        /// Mode proportions, e.g. camera=0.5,scene=0.3,static=0.2 (must sum to 1).
        #[arg(long, default_value = "camera=0.5,scene=0.5")]
        mix: String,
        /// Frames per clip.
        #[arg(long, default_value_t = 17)]
        frames: usize,
        /// Frame height.
        #[arg(long, default_value_t = 32)]
        height: usize,
        /// Frame width.
        #[arg(long, default_value_t = 32)]
        width: usize,
    },
    /// Train the toy model (phase 1 backbone, phase 2 camera branch, or both).
    Train {
        /// Dataset directory written by synth-gen.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output directory.
        #[arg(long)]
        out: PathBuf,
        /// 1 (backbone), 2 (camera branch), or both.
        #[arg(long, default_value = "both")]
        phase: String,
        /// Steps for phase 1 (and phase 2 unless --steps2 is given).
        #[arg(long, default_value_t = 500)]
        steps: usize,
        /// Steps for phase 2 when training both phases.
        #[arg(long)]
        steps2: Option<usize>,
        /// Micro-batch size.
        #[arg(long, default_value_t = 2)]
        batch: usize,
        /// Learning rate.
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Model config file (flat key=value); defaults used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Resume from an existing checkpoint directory.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Loss log CSV path (defaults to <out>/loss.csv).
        #[arg(long)]
        loss_log: Option<PathBuf>,
        /// Enable per-sample loss normalization.
        #[arg(long)]
        loss_normalization: bool,
    },
    /// Sample a video from a trained checkpoint.
    Sample {
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Output video TNSR path ([F, 3, H, W]).
        #[arg(long)]
        out: PathBuf,
        /// Camera trajectory text file (omit for unconditional camera).
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Caption text over the synth vocabulary (omit to drop text).
        #[arg(long)]
        caption: Option<String>,
        /// Euler integration steps.
        #[arg(long, default_value_t = 40)]
        steps: usize,
        /// Text guidance weight w_y.
        #[arg(long, default_value_t = 0.0)]
        guidance_text: f64,
        /// Camera guidance weight w_c.
        #[arg(long, default_value_t = 0.0)]
        guidance_camera: f64,
        /// Camera conditioning gate lower bound.
        #[arg(long, default_value_t = 0.6)]
        gate_lo: f64,
        /// Camera conditioning gate upper bound.
        #[arg(long, default_value_t = 1.0)]
        gate_hi: f64,
        /// Frames to generate.
        #[arg(long, default_value_t = 17)]
        frames: usize,
        /// Frame height.
        #[arg(long, default_value_t = 32)]
        height: usize,
        /// Frame width.
        #[arg(long, default_value_t = 32)]
        width: usize,
        /// Save per-step denoised predictions under this directory
        /// (t_<value>/sample.tnsr, readable by spectrum-timesteps).
        #[arg(long)]
        save_denoised: Option<PathBuf>,
    },
}

fn emit_report(report: Option<&Path>, text: &str) -> Result<()> {
    match report {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing report {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn load_trajectory(path: &Path) -> Result<CameraTrajectory> {
    let raw = tensorio::parse_trajectory(path)?;
    Ok(camera::build_trajectory(&raw)?)
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::CamerasParse { input, report } => {
            let raw = tensorio::parse_trajectory(&input)?;
            let traj = camera::build_trajectory(&raw)?;
            let text = format!("source_id={}\nframes={}\n", raw.source_id, traj.len());
            emit_report(report.as_deref(), &text)
        }
        Command::CamerasPlucker { input, height, width, out } => {
            let traj = load_trajectory(&input)?;
            let vol = camera::plucker_volume(&traj, height, width);
            tensorio::write_tensor(&vol.values, &out)?;
            Ok(())
        }
        Command::CamerasRescale { input, points, metric_depth, out, report, per_frame_mean } => {
            let raw = tensorio::parse_trajectory(&input)?;
            let traj = camera::build_trajectory(&raw)?;
            let pts = tensorio::read_tensor(&points)?;
            if pts.dims().len() != 2 || pts.dims()[1] != 3 {
                bail!("points tensor must be [N, 3], got {:?}", pts.dims());
            }
            let pts: Vec<nalgebra::Vector3<f64>> = pts
                .data()
                .chunks(3)
                .map(|c| nalgebra::Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
                .collect();
            let metric = tensorio::read_tensor(&metric_depth)?;
            let pairs = rescale::build_depth_pairs(&pts, &traj, &metric)?;
            let weighting =
                if per_frame_mean { Weighting::PerFrameMean } else { Weighting::Pooled };
            let sol = rescale::solve_scale(&pairs, weighting)?;
            let rescaled = rescale::rescale_trajectory(&traj, &sol);
            let mut out_file = synth::trajectory_to_file(&rescaled, &raw.source_id);
            for (rec, orig) in out_file.frames.iter_mut().zip(&raw.frames) {
                rec.timestamp = orig.timestamp;
                rec.intrinsics = orig.intrinsics;
                rec.distortion = orig.distortion;
            }
            tensorio::write_trajectory(&out_file, &out)?;
            let text = format!(
                "lambda={}\nobjective={}\npairs={}\n",
                sol.lambda_hat, sol.objective_value, sol.pair_count
            );
            emit_report(report.as_deref(), &text)
        }
        Command::CamerasScore { reference, candidate, report } => {
            let a = camera::normalize_to_first(&load_trajectory(&reference)?);
            let b = camera::normalize_to_first(&load_trajectory(&candidate)?);
            let rot = camera::rotation_error(&a, &b)?;
            let trans = camera::translation_error(&a, &b)?;
            emit_report(report.as_deref(), &format!("rot_err={rot}\ntrans_err={trans}\n"))
        }
        Command::FlowEstimate { src, dst, out, flow: flow_args } => {
            let a = tensorio::read_tensor(&src)?;
            let b = tensorio::read_tensor(&dst)?;
            let field = flow::estimate_flow(&a, &b, &flow_args.config())?;
            tensorio::write_tensor(&field.to_tensor(), &out)?;
            Ok(())
        }
        Command::Spectrum { flows, out, bins } => {
            let fields: Vec<FlowField> = flows
                .iter()
                .map(|p| Ok(FlowField::from_tensor(&tensorio::read_tensor(p)?)?))
                .collect::<Result<_>>()?;
            let vol = flow::spectral_volume(&fields, bins)?;
            let mut csv = String::from("bin_center,amplitude\n");
            for b in &vol.bins {
                csv.push_str(&format!("{},{}\n", b.nu, b.amplitude));
            }
            std::fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
            Ok(())
        }
        Command::SpectrumTimesteps { input, out, bins, anchor_stride, horizon, flow: flow_args } => {
            let denoised = read_timestep_tree(&input)?;
            let cfg = SpectraConfig {
                flow: flow_args.config(),
                bins,
                anchor_stride,
                horizon,
            };
            let spectra = flow::per_timestep_spectra(&denoised, &cfg)?;
            let mut csv = String::from("t,bin_center,amplitude,ratio\n");
            for entry in &spectra.entries {
                for (bin, ratio) in entry.volume.bins.iter().zip(&entry.ratios) {
                    csv.push_str(&format!("{},{},{},{}\n", entry.t, bin.nu, bin.amplitude, ratio));
                }
            }
            std::fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
            Ok(())
        }
        Command::ProbePca { acts, block, sigma_level, k, train_fraction, out, report } => {
            let records = read_activation_dumps(&acts)?;
            let mut cell: Vec<&ActivationRecord> = records
                .iter()
                .filter(|r| r.block == block && r.sigma_level == sigma_level)
                .collect();
            if cell.is_empty() {
                bail!("no activation dumps for block {block}, level {sigma_level} in {}", acts.display());
            }
            cell.sort_by(|a, b| a.video_id.cmp(&b.video_id));
            let n_train = ((cell.len() as f64 * train_fraction).floor() as usize)
                .clamp(1, cell.len());
            let basis = probe::fit_pca(&cell[..n_train], k)?;
            let d = basis.mean.len();
            let mut data: Vec<f32> = basis.mean.iter().map(|&v| v as f32).collect();
            for comp in &basis.components {
                data.extend(comp.iter().map(|&v| v as f32));
            }
            let tensor = Tensor::new(vec![k + 1, d], data)?;
            tensorio::write_tensor(&tensor, &out)?;
            let text = format!(
                "captured_variance={}\nrank={}\ntrain_videos={}\n",
                basis.captured_variance, basis.rank, n_train
            );
            emit_report(report.as_deref(), &text)
        }
        Command::ProbeFit { acts, targets, block, sigma_level, k, alpha, train_fraction, report } => {
            let records = read_activation_dumps(&acts)?;
            let target_map = read_targets(&targets, &records)?;
            let cell: Vec<ActivationRecord> = records
                .into_iter()
                .filter(|r| r.block == block && r.sigma_level == sigma_level)
                .collect();
            if cell.is_empty() {
                bail!("no activation dumps for block {block}, level {sigma_level}");
            }
            let table = probe::sweep(
                &cell,
                &target_map,
                &SweepConfig { k, alpha, train_fraction },
            )?;
            match table.cells.first().and_then(|c| c.result) {
                Some((rot, trans)) => {
                    emit_report(report.as_deref(), &format!("rot_err={rot}\ntrans_err={trans}\n"))
                }
                None => bail!(
                    "cell could not be evaluated: {}",
                    table.missing.first().map(|m| m.2.as_str()).unwrap_or("unknown")
                ),
            }
        }
        Command::ProbeSweep { acts, targets, out, k, alpha, train_fraction } => {
            let records = read_activation_dumps(&acts)?;
            let target_map = read_targets(&targets, &records)?;
            let table =
                probe::sweep(&records, &target_map, &SweepConfig { k, alpha, train_fraction })?;
            for (block, level, reason) in &table.missing {
                eprintln!("warning: gap at block {block}, level {level}: {reason}");
            }
            std::fs::write(&out, table.to_csv())
                .with_context(|| format!("writing {}", out.display()))?;
            Ok(())
        }
        Command::SynthGen { out, n, mix, frames, height, width } => {
            let mix = parse_mix(&mix)?;
            let template = DatasetTemplate { frames, height, width, ..Default::default() };
            let clips = synth::make_dataset(n, &mix, &template, stage_seed(seed, "synth-gen"))?;
            synth::write_dataset(&out, &clips)?;
            Ok(())
        }
        Command::Train {
            data,
            out,
            phase,
            steps,
            steps2,
            batch,
            lr,
            config,
            init,
            loss_log,
            loss_normalization,
        } => {
            let entries = synth::load_dataset(&data)?;
            if entries.is_empty() {
                bail!("dataset {} is empty", data.display());
            }
            let dims = entries[0].video.dims().to_vec();
            let (h, w) = (dims[2], dims[3]);
            let dataset: Vec<BatchSample> = entries
                .into_iter()
                .map(|e| BatchSample {
                    plucker: Some(camera::plucker_volume(&e.trajectory, h, w)),
                    video: e.video,
                    text_tokens: e.tokens,
                    camera_present: true,
                    text_present: true,
                })
                .collect();

            let (mut state, sched_override) = match (&init, &config) {
                (Some(ckpt), _) => (load_checkpoint(ckpt)?, None),
                (None, Some(cfg_path)) => {
                    let text = std::fs::read_to_string(cfg_path)
                        .with_context(|| format!("reading {}", cfg_path.display()))?;
                    let (cfg, sched) = parse_config(&text)?;
                    (ModelState::init(cfg, stage_seed(seed, "train-init"))?, sched)
                }
                (None, None) => (
                    ModelState::init(ModelConfig::default(), stage_seed(seed, "train-init"))?,
                    None,
                ),
            };

            let mut log = Vec::new();
            let run_phase = |state: &mut ModelState,
                             opts: &mut TrainOptions,
                             sched: Option<NoiseSchedule>|
             -> Result<Vec<diffusion::LossRow>> {
                opts.lr = lr;
                opts.loss.loss_normalization = loss_normalization;
                if let Some(s) = sched {
                    opts.schedule = s;
                }
                Ok(diffusion::train(state, &dataset, opts)?)
            };
            match phase.as_str() {
                "1" => {
                    let mut opts = TrainOptions::phase1(steps, batch, stage_seed(seed, "train-p1"));
                    log.extend(run_phase(&mut state, &mut opts, sched_override)?);
                }
                "2" => {
                    let mut opts = TrainOptions::phase2(steps, batch, stage_seed(seed, "train-p2"));
                    log.extend(run_phase(&mut state, &mut opts, sched_override)?);
                }
                "both" => {
                    let mut opts = TrainOptions::phase1(steps, batch, stage_seed(seed, "train-p1"));
                    log.extend(run_phase(&mut state, &mut opts, None)?);
                    let p2 = steps2.unwrap_or(steps);
                    let mut opts = TrainOptions::phase2(p2, batch, stage_seed(seed, "train-p2"));
                    log.extend(run_phase(&mut state, &mut opts, None)?);
                }
                other => bail!("unknown phase `{other}` (expected 1, 2, or both)"),
            }
            save_checkpoint(&state, &out)?;
            let log_path = loss_log.unwrap_or_else(|| out.join("loss.csv"));
            std::fs::write(&log_path, loss_log_csv(&log))
                .with_context(|| format!("writing {}", log_path.display()))?;
            Ok(())
        }
        Command::Sample {
            ckpt,
            out,
            trajectory,
            caption,
            steps,
            guidance_text,
            guidance_camera,
            gate_lo,
            gate_hi,
            frames,
            height,
            width,
            save_denoised,
        } => {
            let state = load_checkpoint(&ckpt)?;
            let traj = trajectory.as_deref().map(load_trajectory).transpose()?;
            let tokens = caption.as_deref().map(synth::tokenize).transpose()?;
            let mut opts = SampleOptions::new(frames, height, width, steps);
            opts.guidance = GuidanceWeights::new(guidance_text, guidance_camera)?;
            opts.gate = ConditioningGate::new(gate_lo, gate_hi)?;
            opts.save_denoised = save_denoised.is_some();
            let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, "sample"));
            let result = sample_model(
                &state,
                traj.as_ref(),
                tokens.as_deref(),
                &opts,
                &mut rng,
            )?;
            tensorio::write_tensor(&result.video, &out)?;
            if let Some(dir) = save_denoised {
                for (t, pred) in &result.denoised {
                    let sub = dir.join(format!("t_{t}"));
                    std::fs::create_dir_all(&sub)
                        .with_context(|| format!("creating {}", sub.display()))?;
                    tensorio::write_tensor(pred, &sub.join("sample.tnsr"))?;
                }
            }
            Ok(())
        }
    }
}

fn parse_mix(text: &str) -> Result<Vec<(Mode, f64)>> {
    let mut mix = Vec::new();
    for part in text.split(',') {
        let (name, value) = part
            .split_once('=')
            .with_context(|| format!("mix entry `{part}` is not name=proportion"))?;
        let mode = Mode::parse(name.trim())
            .with_context(|| format!("unknown mode `{}` (camera|scene|both|static)", name.trim()))?;
        let p: f64 = value.trim().parse().with_context(|| format!("bad proportion `{value}`"))?;
        mix.push((mode, p));
    }
    Ok(mix)
}

/// Reads a tree of t_<value>/ subdirectories, each holding TNSR videos.
fn read_timestep_tree(dir: &Path) -> Result<Vec<(f64, Vec<Tensor>)>> {
    let mut out = Vec::new();
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        let name = sub.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let Some(t_str) = name.strip_prefix("t_") else { continue };
        let t: f64 = t_str
            .parse()
            .with_context(|| format!("directory `{name}`: cannot parse timestep"))?;
        let mut files: Vec<PathBuf> = std::fs::read_dir(&sub)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "tnsr"))
            .collect();
        files.sort();
        let videos: Vec<Tensor> =
            files.iter().map(|p| Ok(tensorio::read_tensor(p)?)).collect::<Result<_>>()?;
        if !videos.is_empty() {
            out.push((t, videos));
        }
    }
    if out.is_empty() {
        bail!("no t_<value> subdirectories with TNSR videos under {}", dir.display());
    }
    Ok(out)
}

fn read_activation_dumps(dir: &Path) -> Result<Vec<ActivationRecord>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    files.sort();
    let mut records = Vec::new();
    for path in files {
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some((block, level, video_id)) = probe::parse_dump_name(name) else { continue };
        let tensor = tensorio::read_tensor(&path)?;
        records.push(ActivationRecord::new(block, level, video_id, tensor)?);
    }
    if records.is_empty() {
        bail!("no act_b*_s*_*.tnsr dumps under {}", dir.display());
    }
    Ok(records)
}

/// Loads the [N, F, 6] targets tensor; row i belongs to the i-th video id
/// in lexicographic order.
fn read_targets(
    path: &Path,
    records: &[ActivationRecord],
) -> Result<BTreeMap<String, EulerPoseTargets>> {
    let tensor = tensorio::read_tensor(path)?;
    let dims = tensor.dims();
    if dims.len() != 3 || dims[2] != 6 {
        bail!("targets tensor must be [N, F, 6], got {dims:?}");
    }
    let (n, f) = (dims[0], dims[1]);
    let mut ids: Vec<String> = records.iter().map(|r| r.video_id.clone()).collect();
    ids.sort();
    ids.dedup();
    if ids.len() != n {
        bail!("targets tensor has {n} rows but the dumps cover {} video ids", ids.len());
    }
    let mut map = BTreeMap::new();
    for (i, id) in ids.into_iter().enumerate() {
        let mut rows = Vec::with_capacity(f);
        for fi in 0..f {
            let off = tensor.offset(&[i, fi, 0]);
            let row: Vec<f64> = tensor.data()[off..off + 6].iter().map(|&v| v as f64).collect();
            rows.push(<[f64; 6]>::try_from(row.as_slice()).unwrap());
        }
        map.insert(id, EulerPoseTargets { rows });
    }
    Ok(map)
}
