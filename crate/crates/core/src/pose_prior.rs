//! PCA subspace of feasible poses and its reconstruction-error loss.
//!
//! Priors live in a positional space: the flattened 3D positions of a joint
//! group expressed in the frame of an anchor joint above the group. Rotations
//! at or above the anchor therefore leave the features unchanged.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Vector3};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::arrayfile::ArrayFile;
use crate::error::{Error, Result};
use crate::kinematics::{pose_frame, FramePose, KinematicTree};

/// Mean and orthonormal basis (rows) of a PCA subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaPrior {
    mean: DVector<f64>,
    basis: DMatrix<f64>,
}

impl PcaPrior {
    pub fn new(mean: DVector<f64>, basis: DMatrix<f64>) -> Result<Self> {
        if basis.ncols() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "basis has {} columns, mean has {} entries",
                basis.ncols(),
                mean.len()
            )));
        }
        let gram = &basis * basis.transpose();
        let err = (gram - DMatrix::identity(basis.nrows(), basis.nrows())).amax();
        if err > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "basis rows are not orthonormal (max deviation {err:.3e})"
            )));
        }
        Ok(Self { mean, basis })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn component_count(&self) -> usize {
        self.basis.nrows()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// d x n, one component per row.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "prior expects {} values, got {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn reconstruct(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check(x)?;
        let centered = DVector::from_column_slice(x) - &self.mean;
        let coeffs = &self.basis * centered;
        Ok(&self.mean + self.basis.transpose() * coeffs)
    }

    pub fn residual(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(DVector::from_column_slice(x) - self.reconstruct(x)?)
    }

    /// `|| x - (mu + ((x - mu) U^T) U) ||_2`
    pub fn loss(&self, x: &[f64]) -> Result<f64> {
        Ok(self.residual(x)?.norm())
    }

    /// Loss and its gradient. The residual lies in the orthogonal complement
    /// of the basis, so the gradient is the unit residual (zero at zero).
    pub fn loss_and_gradient(&self, x: &[f64]) -> Result<(f64, DVector<f64>)> {
        let r = self.residual(x)?;
        let norm = r.norm();
        let grad = if norm > 0.0 { r / norm } else { DVector::zeros(x.len()) };
        Ok((norm, grad))
    }
}

fn centered_matrix(samples: &Array2<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (k, n) = samples.dim();
    if k < 2 {
        return Err(Error::DegenerateInput(format!("need at least 2 samples, got {k}")));
    }
    if n == 0 {
        return Err(Error::DegenerateInput("samples have zero width".into()));
    }
    if !samples.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("prior training samples".into()));
    }
    let data = DMatrix::from_fn(k, n, |i, j| samples[[i, j]]);
    let mean = DVector::from_fn(n, |j, _| data.column(j).mean());
    let centered = DMatrix::from_fn(k, n, |i, j| data[(i, j)] - mean[j]);
    Ok((mean, centered))
}

/// Right singular directions of the centred data with their singular values,
/// strongest first.
fn principal_directions(centered: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let values = order.iter().map(|&i| svd.singular_values[i]).collect();
    let rows = DMatrix::from_fn(order.len(), v_t.ncols(), |r, c| v_t[(order[r], c)]);
    (values, rows)
}

/// Fits a `d`-component prior to K x (N*3) samples.
pub fn fit_prior(samples: &Array2<f64>, d: usize) -> Result<PcaPrior> {
    let (k, n) = samples.dim();
    let max = k.min(n);
    if d == 0 || d > max {
        return Err(Error::InvalidComponentCount { requested: d, max });
    }
    let (mean, centered) = centered_matrix(samples)?;
    let (_, rows) = principal_directions(centered);
    let basis = rows.rows(0, d).into_owned();
    PcaPrior::new(mean, basis)
}

/// Smallest component count whose cumulative variance reaches `fraction`,
/// capped at `cap`.
pub fn components_for_variance(samples: &Array2<f64>, fraction: f64, cap: usize) -> Result<usize> {
    let (_, centered) = centered_matrix(samples)?;
    let (values, _) = principal_directions(centered);
    let total: f64 = values.iter().map(|s| s * s).sum();
    let limit = cap.min(values.len()).max(1);
    if total <= 0.0 {
        return Ok(1);
    }
    let mut acc = 0.0;
    for (i, s) in values.iter().enumerate().take(limit) {
        acc += s * s;
        if acc / total >= fraction {
            return Ok(i + 1);
        }
    }
    Ok(limit)
}

/// A joint group whose anchor-relative positions a prior models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorGroup {
    pub name: String,
    pub joints: Vec<usize>,
    /// Joint strictly above every member; features are expressed in its frame.
    pub anchor: usize,
}

impl PriorGroup {
    pub fn new(tree: &KinematicTree, name: &str, mut joints: Vec<usize>) -> Result<Self> {
        joints.sort_unstable();
        joints.dedup();
        let top = tree
            .common_ancestor(&joints)
            .ok_or_else(|| Error::InvalidConfig(format!("prior group `{name}` is empty")))?;
        let anchor = if joints.contains(&top) {
            tree.parent(top).ok_or_else(|| {
                Error::InvalidConfig(format!("prior group `{name}` contains the root"))
            })?
        } else {
            top
        };
        Ok(Self {
            name: name.to_string(),
            joints,
            anchor,
        })
    }

    /// Left hand, right hand and both arms of the skeleton.
    pub fn defaults(tree: &KinematicTree) -> Result<Vec<Self>> {
        let mut groups = Vec::new();
        for (i, hand) in tree.hand_groups().into_iter().enumerate() {
            let name = match i {
                0 => "left_hand".to_string(),
                1 => "right_hand".to_string(),
                n => format!("hand_{n}"),
            };
            groups.push(Self::new(tree, &name, hand)?);
        }
        if !tree.arm_joints().is_empty() {
            groups.push(Self::new(tree, "arms", tree.arm_joints().to_vec())?);
        }
        Ok(groups)
    }

    pub fn feature_dim(&self) -> usize {
        3 * self.joints.len()
    }

    pub fn features(&self, pose: &FramePose) -> Vec<f64> {
        let frame_t = pose.globals[self.anchor].transpose();
        let origin = pose.positions[self.anchor];
        self.joints
            .iter()
            .flat_map(|&j| {
                let q = frame_t * (pose.positions[j] - origin);
                [q.x, q.y, q.z]
            })
            .collect()
    }

    /// Maps a gradient w.r.t. the features back to world-frame joint gradients.
    pub fn feature_gradient_to_world(&self, pose: &FramePose, grad: &DVector<f64>) -> Vec<(usize, Vector3<f64>)> {
        let frame = pose.globals[self.anchor];
        self.joints
            .iter()
            .enumerate()
            .map(|(i, &j)| (j, frame * Vector3::new(grad[3 * i], grad[3 * i + 1], grad[3 * i + 2])))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PriorSidecar {
    d: usize,
    joint_subset: Vec<usize>,
    anchor: usize,
    name: String,
}

/// A PCA prior attached to a joint group.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalPrior {
    pub group: PriorGroup,
    pub pca: PcaPrior,
}

impl PositionalPrior {
    pub fn loss(&self, pose: &FramePose) -> f64 {
        self.pca
            .loss(&self.group.features(pose))
            .expect("group and prior dimensions agree")
    }

    /// Writes `<stem>.bin` (arrays `mu`, `U`) and the `<stem>.json` sidecar.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let mut file = ArrayFile::new();
        file.insert("mu", Array1::from(self.pca.mean().as_slice().to_vec()));
        let b = self.pca.basis();
        file.insert("U", Array2::from_shape_fn((b.nrows(), b.ncols()), |(i, j)| b[(i, j)]));
        file.write(stem.with_extension("bin"))?;
        let sidecar = PriorSidecar {
            d: self.pca.component_count(),
            joint_subset: self.group.joints.clone(),
            anchor: self.group.anchor,
            name: self.group.name.clone(),
        };
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let sidecar: PriorSidecar =
            serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let file = ArrayFile::read(stem.with_extension("bin"))?;
        let mu = file.array1("mu")?;
        let u = file.array2("U")?;
        if u.nrows() != sidecar.d || u.ncols() != 3 * sidecar.joint_subset.len() {
            return Err(Error::Schema(format!(
                "prior `{}` basis is {}x{}, sidecar declares d={} over {} joints",
                sidecar.name,
                u.nrows(),
                u.ncols(),
                sidecar.d,
                sidecar.joint_subset.len()
            )));
        }
        let pca = PcaPrior::new(
            DVector::from_vec(mu.to_vec()),
            DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| u[[i, j]]),
        )?;
        Ok(Self {
            group: PriorGroup {
                name: sidecar.name,
                joints: sidecar.joint_subset,
                anchor: sidecar.anchor,
            },
            pca,
        })
    }
}

/// Requested number of components per prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComponentCount {
    Fixed(usize),
    /// Smallest count explaining the given variance fraction, capped.
    Variance { fraction: f64, cap: usize },
}

impl Default for ComponentCount {
    fn default() -> Self {
        ComponentCount::Variance {
            fraction: 0.95,
            cap: 12,
        }
    }
}

/// The set of group priors used during fitting.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PriorSet {
    pub priors: Vec<PositionalPrior>,
}

impl PriorSet {
    /// Fits one prior per group from per-frame joint rotations.
    pub fn fit(
        tree: &KinematicTree,
        groups: &[PriorGroup],
        poses: &[Vec<Vector3<f64>>],
        components: ComponentCount,
    ) -> Result<Self> {
        let frames: Vec<FramePose> = poses
            .iter()
            .map(|r| pose_frame(tree, r, Vector3::zeros()))
            .collect();
        let priors = groups
            .iter()
            .map(|group| {
                let rows: Vec<f64> = frames.iter().flat_map(|p| group.features(p)).collect();
                let samples = Array2::from_shape_vec((frames.len(), group.feature_dim()), rows)
                    .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
                let d = match components {
                    ComponentCount::Fixed(d) => d,
                    ComponentCount::Variance { fraction, cap } => {
                        components_for_variance(&samples, fraction, cap)?
                    }
                };
                Ok(PositionalPrior {
                    group: group.clone(),
                    pca: fit_prior(&samples, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { priors })
    }

    /// Sum of every group's loss for one posed frame.
    pub fn loss(&self, pose: &FramePose) -> f64 {
        self.priors.iter().map(|p| p.loss(pose)).sum()
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.priors
            .iter()
            .map(|p| {
                let stem = dir.join(&p.group.name);
                p.save(&stem)?;
                Ok(stem)
            })
            .collect()
    }

    /// Loads every `<name>.json` + `<name>.bin` pair in a directory, by name.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let mut stems: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json") && p.with_extension("bin").exists())
            .map(|p| p.with_extension(""))
            .collect();
        stems.sort();
        if stems.is_empty() {
            return Err(Error::Schema(format!(
                "no prior checkpoints found in {}",
                dir.as_ref().display()
            )));
        }
        Ok(Self {
            priors: stems.iter().map(PositionalPrior::load).collect::<Result<_>>()?,
        })
    }
}
