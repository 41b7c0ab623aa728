//! Refines per-frame rotations against 2D joint detections.
//!
//! The objective is `rec + lambda_prior * prior + lambda_temp * temp`:
//! confidence-weighted L1 reprojection error, group PCA prior losses and a
//! smoothness term over consecutive frames. Gradients are analytic: forces on
//! joint positions are turned into rotation gradients through the kinematic
//! chain.

use std::path::Path;

use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::arrayfile::ArrayFile;
use crate::error::{Error, Result};
use crate::kinematics::{
    left_jacobian, pose_frame, Camera, FramePose, KinematicTree, ParamSequence, VertexRegressor,
};
use crate::pose_prior::PriorSet;

/// 2D joint detections with per-joint confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Detections {
    /// F x J x 2 pixel coordinates.
    pub joints2d: Array3<f64>,
    /// F x J confidences in [0, 1].
    pub confidence: Array2<f64>,
}

impl Detections {
    pub fn new(joints2d: Array3<f64>, confidence: Array2<f64>) -> Result<Self> {
        let (f, j, c) = joints2d.dim();
        if c != 2 || confidence.dim() != (f, j) {
            return Err(Error::DimensionMismatch(format!(
                "joints2d is {f}x{j}x{c}, confidence is {:?}",
                confidence.dim()
            )));
        }
        if !joints2d.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("detections".into()));
        }
        if !confidence.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::DimensionMismatch("confidences must lie in [0, 1]".into()));
        }
        Ok(Self {
            joints2d,
            confidence,
        })
    }

    /// Fully confident detections.
    pub fn certain(joints2d: Array3<f64>) -> Result<Self> {
        let (f, j, _) = joints2d.dim();
        Self::new(joints2d, Array2::ones((f, j)))
    }

    pub fn frames(&self) -> usize {
        self.joints2d.dim().0
    }

    pub fn joints(&self) -> usize {
        self.joints2d.dim().1
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = ArrayFile::new();
        file.insert("joints2d", self.joints2d.clone());
        file.insert("confidence", self.confidence.clone());
        file.write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let file = ArrayFile::read(path)?;
        Self::new(file.array3("joints2d")?, file.array2("confidence")?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lambda_prior: f64,
    pub lambda_temp: f64,
    pub max_iters: usize,
    /// Initial per-coordinate Adam step in radians.
    pub step_size: f64,
    /// Stop once the relative loss decrease falls below this.
    pub convergence_tol: f64,
    /// Joints whose rotations are optimized; `None` means arms and hands.
    pub optimized_joints: Option<Vec<usize>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda_prior: 0.1,
            lambda_temp: 1.0,
            max_iters: 200,
            step_size: 0.01,
            convergence_tol: 1e-5,
            optimized_joints: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::InvalidConfig("convergence_tol must be positive".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig("step_size must be positive".into()));
        }
        if !(self.lambda_prior >= 0.0 && self.lambda_temp >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn joints(&self, tree: &KinematicTree) -> Result<Vec<usize>> {
        let mut joints = match &self.optimized_joints {
            Some(j) => j.clone(),
            None => tree
                .arm_joints()
                .iter()
                .chain(tree.hand_joints())
                .copied()
                .collect(),
        };
        joints.sort_unstable();
        joints.dedup();
        if let Some(&bad) = joints.iter().find(|&&j| j >= tree.joint_count()) {
            return Err(Error::InvalidConfig(format!(
                "optimized joint {bad} is outside the skeleton"
            )));
        }
        Ok(joints)
    }
}

fn check_track(det: &Detections, joints3d: &Array3<f64>) -> Result<()> {
    let (f, j, c) = joints3d.dim();
    if c != 3 || f != det.frames() || j != det.joints() {
        return Err(Error::DimensionMismatch(format!(
            "detections are {}x{}, predicted joints are {f}x{j}x{c}",
            det.frames(),
            det.joints()
        )));
    }
    Ok(())
}

fn check_confidence(det: &Detections) -> Result<()> {
    if det.confidence.iter().all(|&c| c == 0.0) {
        return Err(Error::DegenerateInput("every detection has zero confidence".into()));
    }
    Ok(())
}

/// Mean over frames and joints of `c * |J - proj(J3d)|_1`.
pub fn reprojection_loss(det: &Detections, joints3d: &Array3<f64>, camera: &Camera) -> Result<f64> {
    check_track(det, joints3d)?;
    check_confidence(det)?;
    let projected = camera.project_track(joints3d)?;
    let (f, j, _) = joints3d.dim();
    let mut sum = 0.0;
    for fi in 0..f {
        for ji in 0..j {
            let l1 = (det.joints2d[[fi, ji, 0]] - projected[[fi, ji, 0]]).abs()
                + (det.joints2d[[fi, ji, 1]] - projected[[fi, ji, 1]]).abs();
            sum += det.confidence[[fi, ji]] * l1;
        }
    }
    Ok(sum / (f * j) as f64)
}

/// Smoothness term and whether it was skipped for a single-frame input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalLoss {
    pub value: f64,
    pub single_frame: bool,
}

fn frame_distance(a: &Array3<f64>, f: usize) -> f64 {
    let (_, n, c) = a.dim();
    let mut s = 0.0;
    for i in 0..n {
        for k in 0..c {
            s += (a[[f, i, k]] - a[[f - 1, i, k]]).powi(2);
        }
    }
    s.sqrt()
}

/// Mean over adjacent frame pairs of the flattened vertex and joint
/// displacement norms.
pub fn temporal_loss(vertices: &Array3<f64>, joints: &Array3<f64>) -> Result<TemporalLoss> {
    let f = joints.dim().0;
    if vertices.dim().0 != f || vertices.dim().2 != 3 || joints.dim().2 != 3 {
        return Err(Error::DimensionMismatch(format!(
            "vertices {:?} and joints {:?} disagree",
            vertices.dim(),
            joints.dim()
        )));
    }
    if f < 2 {
        log::warn!("temporal term needs at least two frames; using 0");
        return Ok(TemporalLoss {
            value: 0.0,
            single_frame: true,
        });
    }
    let sum: f64 = (1..f)
        .map(|fi| frame_distance(vertices, fi) + frame_distance(joints, fi))
        .sum();
    Ok(TemporalLoss {
        value: sum / (f - 1) as f64,
        single_frame: false,
    })
}

/// Mean over frames of the summed group prior losses.
pub fn prior_term(tree: &KinematicTree, priors: &PriorSet, seq: &ParamSequence) -> Result<f64> {
    seq.check_tree(tree)?;
    let f = seq.frames();
    let sum: f64 = (0..f)
        .map(|fi| priors.loss(&pose_frame(tree, &seq.joint_rotations(tree, fi), seq.translation_at(fi))))
        .sum();
    Ok(sum / f as f64)
}

pub fn total_loss(rec: f64, prior: f64, temp: f64, config: &FitConfig) -> f64 {
    rec + config.lambda_prior * prior + config.lambda_temp * temp
}

/// Loss values recorded at one accepted iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub total: f64,
    pub reprojection: f64,
    pub prior: f64,
    pub temporal: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ParamSequence,
    pub trace: Vec<TraceEntry>,
    pub converged: bool,
}

impl FitResult {
    pub fn trace_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.trace)?)
    }
}

/// The fitting objective over the rotations of the optimized joints.
pub struct Objective<'a> {
    tree: &'a KinematicTree,
    det: &'a Detections,
    camera: &'a Camera,
    priors: Option<&'a PriorSet>,
    regressor: &'a VertexRegressor,
    config: &'a FitConfig,
    joints: Vec<usize>,
    translations: Vec<Vector3<f64>>,
    base: Vec<Vec<Vector3<f64>>>,
}

/// Objective terms at one point, with the gradient w.r.t. each frame's
/// optimized rotations when requested.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub reprojection: f64,
    pub prior: f64,
    pub temporal: f64,
    pub total: f64,
    pub gradient: Option<Vec<Vec<Vector3<f64>>>>,
}

fn l1_sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl<'a> Objective<'a> {
    pub fn new(
        init: &ParamSequence,
        det: &'a Detections,
        camera: &'a Camera,
        tree: &'a KinematicTree,
        priors: Option<&'a PriorSet>,
        regressor: &'a VertexRegressor,
        config: &'a FitConfig,
    ) -> Result<Self> {
        config.validate()?;
        init.check_tree(tree)?;
        let f = init.frames();
        if det.frames() != f || det.joints() != tree.joint_count() {
            return Err(Error::DimensionMismatch(format!(
                "detections are {}x{}, sequence has {f} frames and {} joints",
                det.frames(),
                det.joints(),
                tree.joint_count()
            )));
        }
        if regressor.joint_count() != tree.joint_count() {
            return Err(Error::DimensionMismatch("regressor joint count differs from skeleton".into()));
        }
        check_confidence(det)?;
        Ok(Self {
            tree,
            det,
            camera,
            priors,
            regressor,
            config,
            joints: config.joints(tree)?,
            translations: (0..f).map(|fi| init.translation_at(fi)).collect(),
            base: (0..f).map(|fi| init.joint_rotations(tree, fi)).collect(),
        })
    }

    pub fn optimized_joints(&self) -> &[usize] {
        &self.joints
    }

    /// The starting values of the free parameters.
    pub fn initial_params(&self) -> Vec<Vec<Vector3<f64>>> {
        self.base
            .iter()
            .map(|rots| self.joints.iter().map(|&j| rots[j]).collect())
            .collect()
    }

    fn full_rotations(&self, params: &[Vec<Vector3<f64>>]) -> Vec<Vec<Vector3<f64>>> {
        self.base
            .iter()
            .zip(params)
            .map(|(rots, free)| {
                let mut rots = rots.clone();
                for (&j, r) in self.joints.iter().zip(free) {
                    rots[j] = *r;
                }
                rots
            })
            .collect()
    }

    pub fn evaluate(&self, params: &[Vec<Vector3<f64>>], with_gradient: bool) -> Result<Evaluation> {
        let rotations = self.full_rotations(params);
        let f = rotations.len();
        let n = self.tree.joint_count();
        let poses: Vec<FramePose> = rotations
            .iter()
            .zip(&self.translations)
            .map(|(r, t)| pose_frame(self.tree, r, *t))
            .collect();

        // Forces: gradients of the total loss w.r.t. world joint positions.
        let mut forces = vec![vec![Vector3::zeros(); n]; f];

        let rec_scale = 1.0 / (f * n) as f64;
        let mut rec = 0.0;
        for (fi, pose) in poses.iter().enumerate() {
            for (j, p) in pose.positions.iter().enumerate() {
                let uv = self.camera.project_point(p).map_err(|_| Error::BehindCamera {
                    index: fi * n + j,
                    z: p.z,
                })?;
                let c = self.det.confidence[[fi, j]];
                let du = uv.x - self.det.joints2d[[fi, j, 0]];
                let dv = uv.y - self.det.joints2d[[fi, j, 1]];
                rec += c * (du.abs() + dv.abs());
                if with_gradient && c != 0.0 {
                    let jac = self.camera.projection_jacobian(p);
                    let s = nalgebra::Vector2::new(l1_sign(du), l1_sign(dv));
                    forces[fi][j] += jac.transpose() * s * (c * rec_scale);
                }
            }
        }
        rec *= rec_scale;

        let mut temp = 0.0;
        if f >= 2 {
            let verts: Vec<Vec<Vector3<f64>>> = poses
                .iter()
                .map(|p| self.regressor.apply_frame(&p.positions))
                .collect();
            let w = self.config.lambda_temp / (f - 1) as f64;
            for fi in 1..f {
                let dj: Vec<Vector3<f64>> = (0..n)
                    .map(|j| poses[fi].positions[j] - poses[fi - 1].positions[j])
                    .collect();
                let dx: Vec<Vector3<f64>> = verts[fi]
                    .iter()
                    .zip(&verts[fi - 1])
                    .map(|(a, b)| a - b)
                    .collect();
                let nj = dj.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
                let nx = dx.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
                temp += nj + nx;
                if with_gradient && w != 0.0 {
                    if nj > 0.0 {
                        for j in 0..n {
                            let g = dj[j] * (w / nj);
                            forces[fi][j] += g;
                            forces[fi - 1][j] -= g;
                        }
                    }
                    if nx > 0.0 {
                        let gx: Vec<Vector3<f64>> = dx.iter().map(|v| v * (w / nx)).collect();
                        let gj = self.regressor.transpose_apply_frame(&gx);
                        for j in 0..n {
                            forces[fi][j] += gj[j];
                            forces[fi - 1][j] -= gj[j];
                        }
                    }
                }
            }
            temp /= (f - 1) as f64;
        }

        let mut prior = 0.0;
        // Per frame, per group: anchor and world forces on the group joints.
        let mut prior_forces: Vec<Vec<(usize, Vec<(usize, Vector3<f64>)>)>> = vec![Vec::new(); f];
        if let Some(set) = self.priors {
            let w = self.config.lambda_prior / f as f64;
            for (fi, pose) in poses.iter().enumerate() {
                for p in &set.priors {
                    let (loss, grad) = p.pca.loss_and_gradient(&p.group.features(pose))?;
                    prior += loss;
                    if with_gradient && w != 0.0 {
                        let world = p.group.feature_gradient_to_world(pose, &(grad * w));
                        prior_forces[fi].push((p.group.anchor, world));
                    }
                }
            }
            prior /= f as f64;
        }

        let total = total_loss(rec, prior, temp, self.config);
        let gradient = with_gradient.then(|| {
            (0..f)
                .map(|fi| {
                    let pose = &poses[fi];
                    self.joints
                        .iter()
                        .map(|&b| {
                            let pb = pose.positions[b];
                            let mut torque = Vector3::zeros();
                            for j in 0..n {
                                if j != b && self.tree.is_ancestor(b, j) {
                                    torque += (pose.positions[j] - pb).cross(&forces[fi][j]);
                                }
                            }
                            // Prior features live in the anchor frame, so only
                            // joints strictly below the anchor move them.
                            for (anchor, world) in &prior_forces[fi] {
                                if self.tree.is_ancestor(*anchor, b) {
                                    for (j, g) in world {
                                        if self.tree.is_ancestor(b, *j) {
                                            torque += (pose.positions[*j] - pb).cross(g);
                                        }
                                    }
                                }
                            }
                            let parent_frame = self
                                .tree
                                .parent(b)
                                .map_or_else(nalgebra::Matrix3::identity, |p| pose.globals[p]);
                            left_jacobian(&rotations[fi][b]).transpose()
                                * parent_frame.transpose()
                                * torque
                        })
                        .collect()
                })
                .collect()
        });

        Ok(Evaluation {
            reprojection: rec,
            prior,
            temporal: temp,
            total,
            gradient,
        })
    }

    /// Writes the free parameters back into a copy of `init`.
    pub fn apply(&self, init: &ParamSequence, params: &[Vec<Vector3<f64>>]) -> ParamSequence {
        let mut out = init.clone();
        for (fi, free) in params.iter().enumerate() {
            for (&j, r) in self.joints.iter().zip(free) {
                out.set_joint_rotation(self.tree, fi, j, *r);
            }
        }
        out
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MAX_HALVINGS: usize = 20;

/// Adam descent with a backtracking safeguard: a step is only taken when it
/// lowers the loss, so the trace never increases.
pub fn fit_sequence(
    init: &ParamSequence,
    det: &Detections,
    camera: &Camera,
    tree: &KinematicTree,
    priors: Option<&PriorSet>,
    regressor: &VertexRegressor,
    config: &FitConfig,
) -> Result<FitResult> {
    let objective = Objective::new(init, det, camera, tree, priors, regressor, config)?;
    let mut x = objective.initial_params();
    let mut current = objective.evaluate(&x, true)?;
    if !current.total.is_finite() {
        return Err(Error::Divergence { iteration: 0 });
    }
    let entry = |iteration: usize, e: &Evaluation| TraceEntry {
        iteration,
        total: e.total,
        reprojection: e.reprojection,
        prior: e.prior,
        temporal: e.temporal,
    };
    let mut trace = vec![entry(0, &current)];
    let (frames, free) = (x.len(), objective.joints.len());
    let zeros = || vec![vec![Vector3::<f64>::zeros(); free]; frames];
    let (mut m, mut v) = (zeros(), zeros());
    let mut converged = false;

    for iteration in 1..=config.max_iters {
        let grad = current.gradient.take().expect("gradient requested");
        if grad.iter().flatten().any(|g| !g.iter().all(|v| v.is_finite())) {
            return Err(Error::Divergence { iteration });
        }
        let t = iteration as i32;
        let mut direction = zeros();
        for fi in 0..x.len() {
            for k in 0..objective.joints.len() {
                let g = grad[fi][k];
                m[fi][k] = m[fi][k] * ADAM_BETA1 + g * (1.0 - ADAM_BETA1);
                v[fi][k] = v[fi][k] * ADAM_BETA2 + g.component_mul(&g) * (1.0 - ADAM_BETA2);
                let mh = m[fi][k] / (1.0 - ADAM_BETA1.powi(t));
                let vh = v[fi][k] / (1.0 - ADAM_BETA2.powi(t));
                direction[fi][k] = mh.zip_map(&vh, |a, b| a / (b.sqrt() + ADAM_EPS));
            }
        }

        let mut step = config.step_size;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<Vec<Vector3<f64>>> = x
                .iter()
                .zip(&direction)
                .map(|(xf, df)| xf.iter().zip(df).map(|(a, d)| a - d * step).collect())
                .collect();
            match objective.evaluate(&trial, true) {
                Ok(e) if !e.total.is_finite() => return Err(Error::Divergence { iteration }),
                Ok(e) if e.total < current.total => {
                    accepted = Some((trial, e));
                    break;
                }
                // A step that pushes a joint behind the camera is simply rejected.
                Ok(_) | Err(Error::BehindCamera { .. }) => step *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some((trial, e)) = accepted else {
            converged = true;
            break;
        };
        let rel = (current.total - e.total) / current.total.abs().max(f64::MIN_POSITIVE);
        x = trial;
        current = e;
        trace.push(entry(iteration, &current));
        if rel < config.convergence_tol {
            converged = true;
            break;
        }
    }

    Ok(FitResult {
        params: objective.apply(init, &x),
        trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{forward_kinematics, StateLayout};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera() -> Camera {
        Camera::from_intrinsics(500.0, 500.0, 320.0, 240.0).unwrap()
    }

    #[test]
    fn reprojection_examples() {
        let cam = camera();
        let joints = Array3::from_shape_vec((1, 1, 3), vec![0.1, -0.2, 2.0]).unwrap();
        let proj = cam.project_track(&joints).unwrap();
        let det = Detections::certain(proj.clone()).unwrap();
        assert_eq!(reprojection_loss(&det, &joints, &cam).unwrap(), 0.0);
        let mut shifted = proj;
        shifted[[0, 0, 0]] += 3.0;
        let det = Detections::certain(shifted).unwrap();
        assert_abs_diff_eq!(reprojection_loss(&det, &joints, &cam).unwrap(), 3.0, epsilon = 1e-9);
        let zero = Detections::new(det.joints2d.clone(), Array2::zeros((1, 1))).unwrap();
        assert!(matches!(reprojection_loss(&zero, &joints, &cam), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn temporal_examples() {
        let still = Array3::from_elem((5, 4, 3), 0.3);
        assert_eq!(temporal_loss(&still, &still).unwrap().value, 0.0);
        let mut joints = Array3::zeros((2, 2, 3));
        joints[[1, 0, 0]] = 1.2;
        joints[[1, 1, 2]] = 1.6;
        let verts = Array3::zeros((2, 3, 3));
        assert_abs_diff_eq!(temporal_loss(&verts, &joints).unwrap().value, 2.0, epsilon = 1e-12);
        let single = temporal_loss(&Array3::zeros((1, 3, 3)), &Array3::zeros((1, 2, 3))).unwrap();
        assert!(single.single_frame);
        assert_eq!(single.value, 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let mut cfg = FitConfig {
            lambda_prior: 0.0,
            lambda_temp: 0.0,
            ..FitConfig::default()
        };
        assert_eq!(total_loss(1.5, 7.0, 9.0, &cfg), 1.5);
        cfg.lambda_prior = 0.5;
        cfg.lambda_temp = 2.0;
        assert_eq!(total_loss(1.0, 2.0, 3.0, &cfg), 8.0);
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig { max_iters: 0, ..FitConfig::default() }.validate().is_err());
        assert!(FitConfig { convergence_tol: 0.0, ..FitConfig::default() }.validate().is_err());
        let tree = KinematicTree::default_signer();
        let joints = FitConfig::default().joints(&tree).unwrap();
        assert_eq!(joints, vec![4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15]);
        let bad = FitConfig {
            optimized_joints: Some(vec![99]),
            ..FitConfig::default()
        };
        assert!(bad.joints(&tree).is_err());
    }

    fn random_sequence(tree: &KinematicTree, frames: usize, rng: &mut ChaCha8Rng) -> ParamSequence {
        let layout = StateLayout::for_tree(tree, 2, true);
        let mut seq = ParamSequence::zeros(layout, frames, 4, 30.0);
        for f in 0..frames {
            for j in 0..tree.joint_count() {
                let r = Vector3::new(
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                );
                seq.set_joint_rotation(tree, f, j, r);
            }
            seq.translation.as_mut().unwrap()[[f, 2]] = 2.5;
        }
        seq
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let tree = KinematicTree::default_signer();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let seq = random_sequence(&tree, 4, &mut rng);
        let other = random_sequence(&tree, 4, &mut rng);
        let cam = camera();
        let det = Detections::new(
            cam.project_track(&forward_kinematics(&tree, &other).unwrap()).unwrap(),
            Array2::from_shape_fn((4, 16), |_| rng.random_range(0.2..1.0)),
        )
        .unwrap();
        let poses: Vec<Vec<Vector3<f64>>> = (0..30)
            .map(|_| random_sequence(&tree, 1, &mut rng).joint_rotations(&tree, 0))
            .collect();
        let groups = crate::pose_prior::PriorGroup::defaults(&tree).unwrap();
        let priors = PriorSet::fit(&tree, &groups, &poses, crate::pose_prior::ComponentCount::Fixed(3)).unwrap();
        let reg = VertexRegressor::for_tree(&tree);
        let cfg = FitConfig {
            lambda_prior: 0.7,
            lambda_temp: 1.3,
            optimized_joints: Some((0..16).collect()),
            ..FitConfig::default()
        };
        let obj = Objective::new(&seq, &det, &cam, &tree, Some(&priors), &reg, &cfg).unwrap();
        let x = obj.initial_params();
        let grad = obj.evaluate(&x, true).unwrap().gradient.unwrap();
        let h = 1e-6;
        for f in 0..4 {
            for k in 0..16 {
                for c in 0..3 {
                    let mut a = x.clone();
                    let mut b = x.clone();
                    a[f][k][c] += h;
                    b[f][k][c] -= h;
                    let fd = (obj.evaluate(&a, false).unwrap().total - obj.evaluate(&b, false).unwrap().total)
                        / (2.0 * h);
                    let g = grad[f][k][c];
                    let scale = fd.abs().max(g.abs()).max(1e-6);
                    assert!((fd - g).abs() / scale < 1e-3, "frame {f} joint {k} axis {c}: fd {fd} vs {g}");
                }
            }
        }
    }

    #[test]
    fn fixed_point_at_ground_truth() {
        let tree = KinematicTree::default_signer();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let seq = random_sequence(&tree, 6, &mut rng);
        let cam = camera();
        let det = Detections::certain(cam.project_track(&forward_kinematics(&tree, &seq).unwrap()).unwrap()).unwrap();
        let reg = VertexRegressor::for_tree(&tree);
        let out = fit_sequence(&seq, &det, &cam, &tree, None, &reg, &FitConfig::default()).unwrap();
        for (a, b) in out.params.hand_pose.iter().zip(seq.hand_pose.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn untouched_channels_are_bit_identical_and_trace_decreases() {
        let tree = KinematicTree::default_signer();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let truth = random_sequence(&tree, 5, &mut rng);
        let mut init = truth.clone();
        for v in init.hand_pose.iter_mut().chain(init.body_pose.iter_mut()) {
            *v += rng.random_range(-0.1..0.1);
        }
        let cam = camera();
        let det = Detections::certain(cam.project_track(&forward_kinematics(&tree, &truth).unwrap()).unwrap()).unwrap();
        let reg = VertexRegressor::for_tree(&tree);
        let cfg = FitConfig {
            optimized_joints: Some(vec![8, 9, 10]),
            max_iters: 30,
            ..FitConfig::default()
        };
        let out = fit_sequence(&init, &det, &cam, &tree, None, &reg, &cfg).unwrap();
        let layout = init.layout();
        let tree = &tree;
        let touched: Vec<usize> = [8, 9, 10]
            .iter()
            .flat_map(|&j| (0..3).map(move |k| tree.rotation_channel(j) + k))
            .collect();
        let (a, b) = (init.to_state(), out.params.to_state());
        for f in 0..5 {
            for c in 0..layout.dim() {
                if !touched.contains(&c) {
                    assert_eq!(a[[f, c]].to_bits(), b[[f, c]].to_bits());
                }
            }
        }
        assert!(out.trace.windows(2).all(|w| w[1].total <= w[0].total));
        assert!(out.trace.last().unwrap().total < out.trace[0].total);
    }
}
