//! Position errors, dynamic time warping, Gaussian Fréchet distance and
//! per-frame pose statistics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, KinematicTree, ParamSequence, VertexRegressor};

/// Diagonal loading applied to both covariances before the matrix square root.
pub const FID_REGULARIZATION: f64 = 1e-6;

fn same_shape(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() || a.dim().2 != 3 {
        return Err(Error::DimensionMismatch(format!(
            "tracks have shapes {:?} and {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("position track".into()));
    }
    Ok(())
}

/// Mean per-point Euclidean distance between two F x N x 3 tracks,
/// restricted to `points` (all when `None`).
pub fn mean_point_error(pred: &Array3<f64>, truth: &Array3<f64>, points: Option<&[usize]>) -> Result<f64> {
    same_shape(pred, truth)?;
    let (f, n, _) = pred.dim();
    let all: Vec<usize> = (0..n).collect();
    let points = points.unwrap_or(&all);
    if points.is_empty() {
        return Err(Error::EmptyInput("point subset".into()));
    }
    let mut sum = 0.0;
    for fi in 0..f {
        for &j in points {
            let d: f64 = (0..3).map(|k| (pred[[fi, j, k]] - truth[[fi, j, k]]).powi(2)).sum();
            sum += d.sqrt();
        }
    }
    Ok(sum / (f * points.len()) as f64)
}

pub fn mpjpe(pred: &Array3<f64>, truth: &Array3<f64>) -> Result<f64> {
    mean_point_error(pred, truth, None)
}

pub fn mpvpe(pred: &Array3<f64>, truth: &Array3<f64>) -> Result<f64> {
    mean_point_error(pred, truth, None)
}

/// Alignment cost with Euclidean frame distance and match/insert/delete steps.
pub fn dtw(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::EmptyInput("dtw needs non-empty sequences".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "dtw frames have {} and {} channels",
            a.ncols(),
            b.ncols()
        )));
    }
    let (n, m) = (a.nrows(), b.nrows());
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let d = a
                .row(i - 1)
                .iter()
                .zip(b.row(j - 1))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            cur[j] = d + prev[j - 1].min(prev[j]).min(cur[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Mean and unbiased covariance of a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianFit {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "mean has {d} entries, covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if !(mean.iter().all(|v| v.is_finite()) && cov.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("Gaussian statistics".into()));
        }
        if (&cov - cov.transpose()).amax() > 1e-8 {
            return Err(Error::InvalidConfig("covariance is not symmetric".into()));
        }
        Ok(Self { mean, cov })
    }

    /// Fits N x D samples. A single sample yields zero covariance.
    pub fn from_samples(samples: ArrayView2<f64>) -> Result<Self> {
        let (n, d) = samples.dim();
        if n == 0 || d == 0 {
            return Err(Error::EmptyInput("no samples to fit".into()));
        }
        let mean = samples.mean_axis(Axis(0)).expect("non-empty");
        let mut cov = DMatrix::zeros(d, d);
        if n > 1 {
            for row in samples.rows() {
                let c = DVector::from_iterator(d, row.iter().zip(&mean).map(|(x, m)| x - m));
                cov += &c * c.transpose();
            }
            cov /= (n - 1) as f64;
        }
        Self::new(DVector::from_vec(mean.to_vec()), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians.
///
/// `Tr((Ca Cb)^1/2)` is evaluated as `Tr((Sa Cb Sa)^1/2)` with `Sa = Ca^1/2`,
/// which keeps every square root symmetric.
pub fn fid_from_stats(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "Gaussians have dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let eye = DMatrix::identity(a.dim(), a.dim()) * FID_REGULARIZATION;
    let ca = &a.cov + &eye;
    let cb = &b.cov + &eye;
    let sa = sqrt_psd(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let value = (&a.mean - &b.mean).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::NonFinite("fid".into()));
    }
    Ok(value.max(0.0))
}

pub fn fid(set_a: ArrayView2<f64>, set_b: ArrayView2<f64>) -> Result<f64> {
    fid_from_stats(&GaussianFit::from_samples(set_a)?, &GaussianFit::from_samples(set_b)?)
}

/// Per-frame-index mean and standard deviation of absolute pose values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Number of sequences covering each frame index.
    pub count: Vec<usize>,
}

/// Sequences may differ in length; frame `t` pools every sequence that has it.
pub fn frame_pose_stats(sequences: &[ArrayView2<f64>]) -> Result<FrameStats> {
    if sequences.is_empty() {
        return Err(Error::EmptyInput("no sequences".into()));
    }
    let len = sequences.iter().map(|s| s.nrows()).max().unwrap_or(0);
    let mut stats = FrameStats {
        mean: Vec::with_capacity(len),
        std: Vec::with_capacity(len),
        count: Vec::with_capacity(len),
    };
    for t in 0..len {
        let values: Vec<f64> = sequences
            .iter()
            .filter(|s| t < s.nrows())
            .flat_map(|s| s.row(t).iter().map(|v| v.abs()).collect::<Vec<_>>())
            .collect();
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        stats.mean.push(mean);
        stats.std.push(var.sqrt());
        stats.count.push(sequences.iter().filter(|s| t < s.nrows()).count());
    }
    Ok(stats)
}

/// L1 distance between two per-frame curves over their common frames.
pub fn curve_l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    #[serde(rename = "MPVPE")]
    pub mpvpe: f64,
    #[serde(rename = "MPJPE")]
    pub mpjpe: f64,
    #[serde(rename = "FID")]
    pub fid: f64,
    #[serde(rename = "DTW")]
    pub dtw: f64,
}

/// Position errors are in millimetres; FID and DTW are in pose-channel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub body: MetricRow,
    pub left_hand: MetricRow,
    pub right_hand: MetricRow,
}

/// Joint subset and its rotation channels for one report column block.
struct Part {
    joints: Vec<usize>,
    vertices: Vec<usize>,
    channels: Vec<usize>,
}

fn parts(tree: &KinematicTree, regressor: &VertexRegressor) -> Result<[Part; 3]> {
    let hands = tree.hand_groups();
    if hands.len() != 2 {
        return Err(Error::InvalidSkeleton(format!(
            "evaluation expects two hands, skeleton has {}",
            hands.len()
        )));
    }
    let make = |joints: Vec<usize>| {
        let vertices = (0..regressor.vertex_count())
            .filter(|&v| joints.contains(&regressor.dominant_joint(v)))
            .collect();
        let channels = joints
            .iter()
            .flat_map(|&j| (0..3).map(move |k| tree.rotation_channel(j) + k))
            .collect();
        Part {
            joints,
            vertices,
            channels,
        }
    };
    Ok([
        make(tree.body_joints().to_vec()),
        make(hands[0].clone()),
        make(hands[1].clone()),
    ])
}

/// Scores generated sequences against their references.
///
/// Pairs must have equal frame counts. FID pools every frame of every
/// sequence; DTW is averaged over pairs.
pub fn evaluate_pairs(
    tree: &KinematicTree,
    regressor: &VertexRegressor,
    generated: &[ParamSequence],
    reference: &[ParamSequence],
) -> Result<EvaluationReport> {
    if generated.is_empty() || generated.len() != reference.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} generated vs {} reference sequences",
            generated.len(),
            reference.len()
        )));
    }
    let parts = parts(tree, regressor)?;
    let mut rows = [[0.0f64; 4]; 3];
    let mut gen_frames: Vec<Array2<f64>> = Vec::new();
    let mut ref_frames: Vec<Array2<f64>> = Vec::new();
    for (g, r) in generated.iter().zip(reference) {
        if g.frames() != r.frames() {
            return Err(Error::DimensionMismatch(format!(
                "generated sequence has {} frames, reference has {}",
                g.frames(),
                r.frames()
            )));
        }
        let (gj, rj) = (forward_kinematics(tree, g)?, forward_kinematics(tree, r)?);
        let (gv, rv) = (regressor.apply(&gj)?, regressor.apply(&rj)?);
        let (gs, rs) = (g.to_state(), r.to_state());
        for (row, part) in rows.iter_mut().zip(&parts) {
            row[0] += 1000.0 * mean_point_error(&gv, &rv, Some(&part.vertices))?;
            row[1] += 1000.0 * mean_point_error(&gj, &rj, Some(&part.joints))?;
            row[3] += dtw(
                gs.select(Axis(1), &part.channels).view(),
                rs.select(Axis(1), &part.channels).view(),
            )?;
        }
        gen_frames.push(gs);
        ref_frames.push(rs);
    }
    let n = generated.len() as f64;
    let stack = |frames: &[Array2<f64>]| {
        ndarray::concatenate(Axis(0), &frames.iter().map(|a| a.view()).collect::<Vec<_>>())
            .expect("equal channel counts")
    };
    let (all_gen, all_ref) = (stack(&gen_frames), stack(&ref_frames));
    for (row, part) in rows.iter_mut().zip(&parts) {
        row[2] = fid(
            all_gen.select(Axis(1), &part.channels).view(),
            all_ref.select(Axis(1), &part.channels).view(),
        )?;
    }
    let to_row = |r: [f64; 4]| MetricRow {
        mpvpe: r[0] / n,
        mpjpe: r[1] / n,
        fid: r[2],
        dtw: r[3] / n,
    };
    Ok(EvaluationReport {
        body: to_row(rows[0]),
        left_hand: to_row(rows[1]),
        right_hand: to_row(rows[2]),
    })
}
