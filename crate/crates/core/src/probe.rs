//! Linear probing of transformer activations for camera pose: PCA channel
//! reduction, probe feature construction, ridge regression, and
//! per-block/per-noise-level error sweeps.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Cholesky, DMatrix};
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{
    normalize_to_first, rotation_error, trajectory_from_euler_rows, translation_error, CameraError,
    EulerPoseTargets,
};
use crate::tensorio::Tensor;

/// The fixed noise grid sigma_t in {1/8, ..., 8/8}.
pub const NOISE_LEVELS: u8 = 8;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("noise level {0} outside the fixed 8-level grid")]
    BadLevel(u8),
    #[error("activation features must be [D, T, H, W], got dims {dims:?}")]
    BadDims { dims: Vec<usize> },
    #[error("inconsistent feature dims across records: {a:?} vs {b:?}")]
    InconsistentDims { a: Vec<usize>, b: Vec<usize> },
    #[error("duplicate record for block {block}, level {level}, video `{video_id}`")]
    Duplicate { block: usize, level: u8, video_id: String },
    #[error("train/test splits overlap on video `{0}`")]
    SplitOverlap(String),
    #[error("no pose targets for video `{0}`")]
    MissingTarget(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("cell (block {block}, level {level}) has {videos} videos; need >= 2")]
    NotEnoughVideos { block: usize, level: u8, videos: usize },
    #[error("PCA target dim {k} exceeds channel count {d}")]
    KTooLarge { k: usize, d: usize },
    #[error("feature width {got} does not match model width {expected}")]
    WidthMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Camera(#[from] CameraError),
}

/// Per-block, per-noise-level activations of one video, [D, T, H, W].
#[derive(Debug, Clone)]
pub struct ActivationRecord {
    pub block: usize,
    pub sigma_level: u8,
    pub video_id: String,
    pub features: Tensor,
}

impl ActivationRecord {
    pub fn new(
        block: usize,
        sigma_level: u8,
        video_id: String,
        features: Tensor,
    ) -> Result<Self, ProbeError> {
        if sigma_level == 0 || sigma_level > NOISE_LEVELS {
            return Err(ProbeError::BadLevel(sigma_level));
        }
        if features.dims().len() != 4 {
            return Err(ProbeError::BadDims { dims: features.dims().to_vec() });
        }
        Ok(Self { block, sigma_level, video_id, features })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_level as f64 / NOISE_LEVELS as f64
    }

    /// Standard dump filename for this record.
    pub fn file_name(&self) -> String {
        format!("act_b{}_s{}_{}.tnsr", self.block, self.sigma_level, self.video_id)
    }
}

/// Parses `act_b{block}_s{level}_{video_id}.tnsr` names.
pub fn parse_dump_name(name: &str) -> Option<(usize, u8, String)> {
    let stem = name.strip_suffix(".tnsr")?;
    let rest = stem.strip_prefix("act_b")?;
    let (block_str, rest) = rest.split_once("_s")?;
    let (level_str, video_id) = rest.split_once('_')?;
    Some((block_str.parse().ok()?, level_str.parse().ok()?, video_id.to_string()))
}

/// Orthonormal K-basis of the channel covariance, fit on a training split.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// K rows of D loadings; rows past the covariance rank are zero.
    pub components: Vec<Vec<f64>>,
    /// Sum of the top-K eigenvalues.
    pub captured_variance: f64,
    pub rank: usize,
}

/// Channel-reduced activations, [K, T, H, W] in f64.
#[derive(Debug, Clone)]
pub struct ReducedRecord {
    pub video_id: String,
    pub k: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl ReducedRecord {
    fn at(&self, k: usize, t: usize, h: usize, w: usize) -> f64 {
        self.data[((k * self.t + t) * self.h + h) * self.w + w]
    }
}

/// Fits the PCA basis on the given (training) records: the covariance of
/// channel vectors pooled over every video/time/space position. Rank
/// deficiency below K pads with zero components and warns.
pub fn fit_pca(records: &[&ActivationRecord], k: usize) -> Result<PcaBasis, ProbeError> {
    let dims = records
        .first()
        .map(|r| r.features.dims().to_vec())
        .ok_or(ProbeError::NotEnoughVideos { block: 0, level: 0, videos: 0 })?;
    let d = dims[0];
    if k > d {
        return Err(ProbeError::KTooLarge { k, d });
    }
    for r in records {
        if r.features.dims() != dims.as_slice() {
            return Err(ProbeError::InconsistentDims {
                a: dims.clone(),
                b: r.features.dims().to_vec(),
            });
        }
    }
    let positions = dims[1] * dims[2] * dims[3];
    let total = records.len() * positions;

    let mut mean = vec![0.0f64; d];
    for r in records {
        let data = r.features.data();
        for ch in 0..d {
            let mut s = 0.0;
            for p in 0..positions {
                s += data[ch * positions + p] as f64;
            }
            mean[ch] += s;
        }
    }
    for m in mean.iter_mut() {
        *m /= total as f64;
    }

    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in records {
        let data = r.features.data();
        for i in 0..d {
            for j in i..d {
                let mut s = 0.0;
                for p in 0..positions {
                    s += (data[i * positions + p] as f64 - mean[i])
                        * (data[j * positions + p] as f64 - mean[j]);
                }
                cov[(i, j)] += s;
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / total as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite("activation covariance"));
    }

    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let max_ev = eig.eigenvalues[order[0]].max(0.0);
    let mut components = Vec::with_capacity(k);
    let mut captured = 0.0;
    let mut rank = 0;
    for &oi in order.iter().take(k) {
        let ev = eig.eigenvalues[oi];
        if ev <= 1e-12 * max_ev.max(1e-300) {
            log::warn!("fit_pca: covariance rank {rank} < K = {k}; padding with zero components");
            components.push(vec![0.0; d]);
            continue;
        }
        captured += ev;
        rank += 1;
        let mut comp: Vec<f64> = (0..d).map(|i| eig.eigenvectors[(i, oi)]).collect();
        let lead = (0..d).fold(0, |best, i| if comp[i].abs() > comp[best].abs() { i } else { best });
        if comp[lead] < 0.0 {
            comp.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(comp);
    }
    while components.len() < k {
        components.push(vec![0.0; d]);
    }
    Ok(PcaBasis { mean, components, captured_variance: captured, rank })
}

/// Applies a fitted basis to one record.
pub fn apply_pca(basis: &PcaBasis, record: &ActivationRecord) -> ReducedRecord {
    let dims = record.features.dims();
    let (d, t, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let positions = t * h * w;
    let k = basis.components.len();
    let data_in = record.features.data();
    let mut data = vec![0.0f64; k * positions];
    for (ki, comp) in basis.components.iter().enumerate() {
        for ch in 0..d {
            let c = comp[ch];
            if c == 0.0 {
                continue;
            }
            let m = basis.mean[ch];
            for p in 0..positions {
                data[ki * positions + p] += c * (data_in[ch * positions + p] as f64 - m);
            }
        }
    }
    ReducedRecord { video_id: record.video_id.clone(), k, t, h, w, data }
}

/// Fits the basis on `train` and reduces both splits with it.
pub fn reduce_pca(
    train: &[&ActivationRecord],
    test: &[&ActivationRecord],
    k: usize,
) -> Result<(PcaBasis, Vec<ReducedRecord>, Vec<ReducedRecord>), ProbeError> {
    let basis = fit_pca(train, k)?;
    let reduced_train = train.iter().map(|r| apply_pca(&basis, r)).collect();
    let reduced_test = test.iter().map(|r| apply_pca(&basis, r)).collect();
    Ok((basis, reduced_train, reduced_test))
}

/// Per-video probe features: the spatially central K x T block and the
/// spatially average-pooled K x T block, each unrolled time-major, central
/// block first. Width = 2 K T.
#[derive(Debug, Clone)]
pub struct ProbeFeatures {
    pub matrix: Array2<f64>,
    pub video_ids: Vec<String>,
}

pub fn build_features(records: &[&ReducedRecord]) -> Result<ProbeFeatures, ProbeError> {
    let first = records.first().ok_or(ProbeError::NotEnoughVideos { block: 0, level: 0, videos: 0 })?;
    let (k, t, h, w) = (first.k, first.t, first.h, first.w);
    let width = 2 * k * t;
    let mut matrix = Array2::<f64>::zeros((records.len(), width));
    let mut video_ids = Vec::with_capacity(records.len());
    for (row, rec) in records.iter().enumerate() {
        if (rec.k, rec.t, rec.h, rec.w) != (k, t, h, w) {
            return Err(ProbeError::InconsistentDims {
                a: vec![k, t, h, w],
                b: vec![rec.k, rec.t, rec.h, rec.w],
            });
        }
        let (ch, cw) = (h / 2, w / 2);
        for ti in 0..t {
            for ki in 0..k {
                // Central block first, both unrolled time-major.
                matrix[(row, ti * k + ki)] = rec.at(ki, ti, ch, cw);
                let mut pooled = 0.0;
                for hi in 0..h {
                    for wi in 0..w {
                        pooled += rec.at(ki, ti, hi, wi);
                    }
                }
                matrix[(row, k * t + ti * k + ki)] = pooled / (h * w) as f64;
            }
        }
        video_ids.push(rec.video_id.clone());
    }
    Ok(ProbeFeatures { matrix, video_ids })
}

/// Ridge regression model with saved standardization statistics.
#[derive(Debug, Clone)]
pub struct RidgeModel {
    /// [P, Q] weights over standardized inputs.
    pub weights: Array2<f64>,
    /// [Q] bias (the training target column means).
    pub bias: Array1<f64>,
    pub alpha: f64,
    x_mean: Array1<f64>,
    /// Zero marks a constant column (left at 0 after centering).
    x_scale: Array1<f64>,
}

impl RidgeModel {
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>, ProbeError> {
        let (n, p) = x.dim();
        if p != self.weights.nrows() {
            return Err(ProbeError::WidthMismatch { got: p, expected: self.weights.nrows() });
        }
        let mut xs = x.clone();
        for j in 0..p {
            let s = self.x_scale[j];
            for i in 0..n {
                xs[(i, j)] = if s > 0.0 { (xs[(i, j)] - self.x_mean[j]) / s } else { 0.0 };
            }
        }
        let mut out = xs.dot(&self.weights);
        for i in 0..n {
            for q in 0..self.bias.len() {
                out[(i, q)] += self.bias[q];
            }
        }
        Ok(out)
    }
}

/// Solves (Xs^T Xs + alpha I) W = Xs^T Yc on column-standardized X and
/// centered Y via a symmetric positive-definite factorization.
pub fn fit_ridge(x: &Array2<f64>, y: &Array2<f64>, alpha: f64) -> Result<RidgeModel, ProbeError> {
    let (n, p) = x.dim();
    let q = y.ncols();
    assert!(n >= 2, "ridge needs at least 2 rows");
    assert_eq!(y.nrows(), n, "X/Y row mismatch");
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite("ridge inputs X"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite("ridge targets Y"));
    }
    if !(alpha > 0.0) {
        return Err(ProbeError::NonFinite("ridge alpha"));
    }

    let mut x_mean = Array1::<f64>::zeros(p);
    let mut x_scale = Array1::<f64>::zeros(p);
    for j in 0..p {
        let col = x.column(j);
        let mu = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        x_mean[j] = mu;
        x_scale[j] = if var > 1e-24 { var.sqrt() } else { 0.0 };
    }
    let mut xs = Array2::<f64>::zeros((n, p));
    for j in 0..p {
        let s = x_scale[j];
        if s > 0.0 {
            for i in 0..n {
                xs[(i, j)] = (x[(i, j)] - x_mean[j]) / s;
            }
        }
    }
    let bias = Array1::from_iter((0..q).map(|j| y.column(j).sum() / n as f64));
    let mut yc = y.clone();
    for j in 0..q {
        for i in 0..n {
            yc[(i, j)] -= bias[j];
        }
    }

    let mut gram = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            let v = xs.column(i).dot(&xs.column(j));
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    for i in 0..p {
        gram[(i, i)] += alpha;
    }
    let rhs = {
        let mut m = DMatrix::<f64>::zeros(p, q);
        for i in 0..p {
            for j in 0..q {
                m[(i, j)] = xs.column(i).dot(&yc.column(j));
            }
        }
        m
    };
    let chol = Cholesky::new(gram).ok_or(ProbeError::NonFinite("ridge normal equations"))?;
    let solved = chol.solve(&rhs);
    let mut weights = Array2::<f64>::zeros((p, q));
    for i in 0..p {
        for j in 0..q {
            weights[(i, j)] = solved[(i, j)];
        }
    }
    Ok(RidgeModel { weights, bias, alpha, x_mean, x_scale })
}

/// Stacks per-video Euler targets [F, 6] into rows of width 6F, frame-major.
pub fn stack_targets(targets: &[&EulerPoseTargets]) -> Array2<f64> {
    let f = targets[0].rows.len();
    let mut y = Array2::<f64>::zeros((targets.len(), 6 * f));
    for (i, t) in targets.iter().enumerate() {
        for (fi, row) in t.rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                y[(i, fi * 6 + j)] = v;
            }
        }
    }
    y
}

fn rows_from_flat(flat: &[f64]) -> Vec<[f64; 6]> {
    flat.chunks(6).map(|c| <[f64; 6]>::try_from(c).unwrap()).collect()
}

/// Scores predictions against targets: rows are reshaped to [F, 6] per
/// video, recomposed into trajectories, normalized to their first frame,
/// and scored with the rotation/translation pose errors, averaged over
/// videos. The test split must be disjoint from training by video id.
pub fn eval_probe(
    model: &RidgeModel,
    x_test: &Array2<f64>,
    test_ids: &[String],
    y_test: &Array2<f64>,
    train_ids: &[String],
) -> Result<(f64, f64), ProbeError> {
    let train_set: BTreeSet<&String> = train_ids.iter().collect();
    for id in test_ids {
        if train_set.contains(id) {
            return Err(ProbeError::SplitOverlap(id.clone()));
        }
    }
    let pred = model.predict(x_test)?;
    let mut rot_sum = 0.0;
    let mut trans_sum = 0.0;
    let n = x_test.nrows();
    for i in 0..n {
        let pred_rows = rows_from_flat(pred.row(i).as_slice().unwrap());
        let true_rows = rows_from_flat(y_test.row(i).as_slice().unwrap());
        let pred_traj = normalize_to_first(&trajectory_from_euler_rows(&pred_rows));
        let true_traj = normalize_to_first(&trajectory_from_euler_rows(&true_rows));
        rot_sum += rotation_error(&pred_traj, &true_traj)?;
        trans_sum += translation_error(&pred_traj, &true_traj)?;
    }
    Ok((rot_sum / n as f64, trans_sum / n as f64))
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub k: usize,
    pub alpha: f64,
    pub train_fraction: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { k: 16, alpha: 25_000.0, train_fraction: 0.9 }
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub block: usize,
    pub sigma_level: u8,
    /// (rotation error, translation error); None marks a gap.
    pub result: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
    /// (block, level, reason) for every gap.
    pub missing: Vec<(usize, u8, String)>,
}

impl SweepTable {
    /// CSV with gaps marked as nan.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,sigma,rot_err,trans_err\n");
        for cell in &self.cells {
            let sigma = cell.sigma_level as f64 / NOISE_LEVELS as f64;
            match cell.result {
                Some((r, t)) => out.push_str(&format!("{},{},{},{}\n", cell.block, sigma, r, t)),
                None => out.push_str(&format!("{},{},nan,nan\n", cell.block, sigma)),
            }
        }
        out
    }

    /// Cell with the smallest rot_err + trans_err.
    pub fn argmin(&self) -> Option<(usize, u8)> {
        self.cells
            .iter()
            .filter_map(|c| c.result.map(|(r, t)| (c.block, c.sigma_level, r + t)))
            .min_by(|a, b| a.2.partial_cmp(&b.2).unwrap())
            .map(|(b, s, _)| (b, s))
    }
}

/// Runs one independent fit+eval per (block, noise level) cell present in
/// the records. Cells that cannot be processed are reported as gaps;
/// duplicate (block, level, video) records are a hard error.
pub fn sweep(
    records: &[ActivationRecord],
    targets: &BTreeMap<String, EulerPoseTargets>,
    cfg: &SweepConfig,
) -> Result<SweepTable, ProbeError> {
    let mut by_cell: BTreeMap<(usize, u8), Vec<&ActivationRecord>> = BTreeMap::new();
    let mut seen: BTreeSet<(usize, u8, &str)> = BTreeSet::new();
    for r in records {
        if !seen.insert((r.block, r.sigma_level, r.video_id.as_str())) {
            return Err(ProbeError::Duplicate {
                block: r.block,
                level: r.sigma_level,
                video_id: r.video_id.clone(),
            });
        }
        by_cell.entry((r.block, r.sigma_level)).or_default().push(r);
    }
    let blocks: BTreeSet<usize> = by_cell.keys().map(|k| k.0).collect();
    let levels: BTreeSet<u8> = by_cell.keys().map(|k| k.1).collect();

    let grid: Vec<(usize, u8)> = blocks
        .iter()
        .flat_map(|&b| levels.iter().map(move |&l| (b, l)))
        .collect();
    let results: Vec<(usize, u8, Result<(f64, f64), String>)> = grid
        .par_iter()
        .map(|&(block, level)| {
            let out = run_cell(by_cell.get(&(block, level)).map(|v| v.as_slice()), block, level, targets, cfg)
                .map_err(|e| e.to_string());
            (block, level, out)
        })
        .collect();

    let mut cells = Vec::with_capacity(results.len());
    let mut missing = Vec::new();
    for (block, level, res) in results {
        match res {
            Ok(r) => cells.push(SweepCell { block, sigma_level: level, result: Some(r) }),
            Err(reason) => {
                cells.push(SweepCell { block, sigma_level: level, result: None });
                missing.push((block, level, reason));
            }
        }
    }
    Ok(SweepTable { cells, missing })
}

fn run_cell(
    records: Option<&[&ActivationRecord]>,
    block: usize,
    level: u8,
    targets: &BTreeMap<String, EulerPoseTargets>,
    cfg: &SweepConfig,
) -> Result<(f64, f64), ProbeError> {
    let mut records: Vec<&ActivationRecord> =
        records.ok_or(ProbeError::NotEnoughVideos { block, level, videos: 0 })?.to_vec();
    records.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    if records.len() < 2 {
        return Err(ProbeError::NotEnoughVideos { block, level, videos: records.len() });
    }
    let n_train = ((records.len() as f64 * cfg.train_fraction).floor() as usize)
        .clamp(1, records.len() - 1);
    let (train, test) = records.split_at(n_train);

    let lookup = |rs: &[&ActivationRecord]| -> Result<Vec<&EulerPoseTargets>, ProbeError> {
        rs.iter()
            .map(|r| {
                targets
                    .get(&r.video_id)
                    .ok_or_else(|| ProbeError::MissingTarget(r.video_id.clone()))
            })
            .collect()
    };
    let y_train = stack_targets(&lookup(train)?);
    let y_test = stack_targets(&lookup(test)?);

    let (_basis, red_train, red_test) = reduce_pca(train, test, cfg.k)?;
    let feats_train = build_features(&red_train.iter().collect::<Vec<_>>())?;
    let feats_test = build_features(&red_test.iter().collect::<Vec<_>>())?;
    let model = fit_ridge(&feats_train.matrix, &y_train, cfg.alpha)?;
    eval_probe(&model, &feats_test.matrix, &feats_test.video_ids, &y_test, &feats_train.video_ids)
}
