//! Articulated skeleton, per-frame pose parameters, rigid forward kinematics,
//! proxy surface points and pinhole projection.
//!
//! Rotations are axis-angle 3-vectors (radians). A joint's own rotation moves
//! its descendants, never the joint itself: `p_i = p_parent + G_parent * offset_i`
//! with `G_i = G_parent * exp(r_i)`.

use std::ops::Range;
use std::path::Path;

use nalgebra::{Matrix2x3, Matrix3, Rotation3, Vector2, Vector3};
use ndarray::{s, Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint graph with rest offsets and the hand / arm subsets.
///
/// Joints are stored in topological order: every non-root joint has a parent
/// with a smaller index, and joint 0 is the only root.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicTree {
    parents: Vec<Option<usize>>,
    names: Vec<String>,
    offsets: Vec<Vector3<f64>>,
    hand_joints: Vec<usize>,
    arm_joints: Vec<usize>,
    children: Vec<Vec<usize>>,
    body_joints: Vec<usize>,
    // start of each joint's 3 rotation channels in [theta_b | theta_h]
    rotation_channel: Vec<usize>,
}

/// On-disk skeleton definition. The root's parent is `-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonFile {
    pub parents: Vec<i64>,
    pub offsets: Vec<[f64; 3]>,
    pub names: Vec<String>,
    pub hand_joints: Vec<usize>,
    pub arm_joints: Vec<usize>,
}

impl KinematicTree {
    pub fn new(
        parents: Vec<Option<usize>>,
        offsets: Vec<Vector3<f64>>,
        names: Vec<String>,
        mut hand_joints: Vec<usize>,
        mut arm_joints: Vec<usize>,
    ) -> Result<Self> {
        let n = parents.len();
        if n == 0 {
            return Err(Error::InvalidSkeleton("skeleton has no joints".into()));
        }
        if offsets.len() != n || names.len() != n {
            return Err(Error::InvalidSkeleton(format!(
                "{} parents, {} offsets and {} names",
                n,
                offsets.len(),
                names.len()
            )));
        }
        if parents[0].is_some() {
            return Err(Error::InvalidSkeleton("joint 0 must be the root".into()));
        }
        for (i, p) in parents.iter().enumerate().skip(1) {
            match p {
                None => {
                    return Err(Error::InvalidSkeleton(format!(
                        "joint {i} is a second root"
                    )))
                }
                Some(p) if *p >= i => {
                    return Err(Error::InvalidSkeleton(format!(
                        "joint {i} has parent {p}; parents must precede their children"
                    )))
                }
                _ => {}
            }
        }
        if offsets.iter().any(|o| !o.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidSkeleton("offsets must be finite".into()));
        }
        hand_joints.sort_unstable();
        hand_joints.dedup();
        arm_joints.sort_unstable();
        arm_joints.dedup();
        if let Some(&j) = hand_joints.iter().chain(arm_joints.iter()).find(|&&j| j >= n) {
            return Err(Error::InvalidSkeleton(format!(
                "joint subset index {j} out of range for {n} joints"
            )));
        }
        if let Some(j) = hand_joints.iter().find(|j| arm_joints.contains(j)) {
            return Err(Error::InvalidSkeleton(format!(
                "joint {j} is listed as both a hand and an arm joint"
            )));
        }

        let mut children = vec![Vec::new(); n];
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(i);
            }
        }
        let body_joints: Vec<usize> = (0..n).filter(|j| !hand_joints.contains(j)).collect();
        let mut rotation_channel = vec![0; n];
        for (k, &j) in body_joints.iter().enumerate() {
            rotation_channel[j] = 3 * k;
        }
        for (k, &j) in hand_joints.iter().enumerate() {
            rotation_channel[j] = 3 * body_joints.len() + 3 * k;
        }

        Ok(Self {
            parents,
            names,
            offsets,
            hand_joints,
            arm_joints,
            children,
            body_joints,
            rotation_channel,
        })
    }

    /// The default signer skeleton: 8 body joints (pelvis, spine, neck, head,
    /// both shoulders and elbows) and two 4-joint hands (wrist, thumb, index
    /// base, index tip). Metres, y up, the signer faces -z.
    pub fn default_signer() -> Self {
        let joint_table: [(&str, Option<usize>, [f64; 3]); 16] = [
            ("pelvis", None, [0.0, 0.0, 0.0]),
            ("spine", Some(0), [0.0, 0.25, 0.0]),
            ("neck", Some(1), [0.0, 0.25, 0.0]),
            ("head", Some(2), [0.0, 0.15, -0.02]),
            ("left_shoulder", Some(2), [0.18, -0.02, 0.0]),
            ("left_elbow", Some(4), [0.28, 0.0, 0.0]),
            ("right_shoulder", Some(2), [-0.18, -0.02, 0.0]),
            ("right_elbow", Some(6), [-0.28, 0.0, 0.0]),
            ("left_wrist", Some(5), [0.25, 0.0, 0.0]),
            ("left_thumb", Some(8), [0.03, 0.01, -0.04]),
            ("left_index", Some(8), [0.09, 0.0, -0.01]),
            ("left_index_tip", Some(10), [0.045, 0.0, -0.005]),
            ("right_wrist", Some(7), [-0.25, 0.0, 0.0]),
            ("right_thumb", Some(12), [-0.03, 0.01, -0.04]),
            ("right_index", Some(12), [-0.09, 0.0, -0.01]),
            ("right_index_tip", Some(14), [-0.045, 0.0, -0.005]),
        ];
        Self::new(
            joint_table.iter().map(|s| s.1).collect(),
            joint_table.iter().map(|s| Vector3::from(s.2)).collect(),
            joint_table.iter().map(|s| s.0.to_string()).collect(),
            (8..16).collect(),
            vec![4, 5, 6, 7],
        )
        .expect("default skeleton is valid")
    }

    pub fn from_file(file: &SkeletonFile) -> Result<Self> {
        let parents = file
            .parents
            .iter()
            .enumerate()
            .map(|(i, &p)| match p {
                -1 => Ok(None),
                p if p >= 0 => Ok(Some(p as usize)),
                p => Err(Error::InvalidSkeleton(format!("joint {i} has parent {p}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            parents,
            file.offsets.iter().map(|o| Vector3::from(*o)).collect(),
            file.names.clone(),
            file.hand_joints.clone(),
            file.arm_joints.clone(),
        )
    }

    pub fn to_file(&self) -> SkeletonFile {
        SkeletonFile {
            parents: self
                .parents
                .iter()
                .map(|p| p.map_or(-1, |p| p as i64))
                .collect(),
            offsets: self.offsets.iter().map(|o| [o.x, o.y, o.z]).collect(),
            names: self.names.clone(),
            hand_joints: self.hand_joints.clone(),
            arm_joints: self.arm_joints.clone(),
        }
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file(&serde_json::from_str(&text)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn children(&self, joint: usize) -> &[usize] {
        &self.children[joint]
    }

    pub fn name(&self, joint: usize) -> &str {
        &self.names[joint]
    }

    pub fn offset(&self, joint: usize) -> &Vector3<f64> {
        &self.offsets[joint]
    }

    /// The neighbour set of a joint: its parent (if any) followed by its children.
    pub fn neighbors(&self, joint: usize) -> Vec<usize> {
        self.parents[joint]
            .into_iter()
            .chain(self.children[joint].iter().copied())
            .collect()
    }

    pub fn hand_joints(&self) -> &[usize] {
        &self.hand_joints
    }

    pub fn arm_joints(&self) -> &[usize] {
        &self.arm_joints
    }

    /// Every joint that is not a hand joint, ascending. These own `theta_b`.
    pub fn body_joints(&self) -> &[usize] {
        &self.body_joints
    }

    /// Index of the first of the joint's three rotation channels in the
    /// concatenated `[theta_b | theta_h]` vector.
    pub fn rotation_channel(&self, joint: usize) -> usize {
        self.rotation_channel[joint]
    }

    /// True when `ancestor` lies strictly above `joint`.
    pub fn is_ancestor(&self, ancestor: usize, joint: usize) -> bool {
        let mut cur = self.parents[joint];
        while let Some(p) = cur {
            if p == ancestor {
                return true;
            }
            cur = self.parents[p];
        }
        false
    }

    /// Connected components of the hand subset, ordered by their top joint.
    /// With the default skeleton these are the left and right hand.
    pub fn hand_groups(&self) -> Vec<Vec<usize>> {
        self.components(&self.hand_joints)
    }

    pub fn arm_groups(&self) -> Vec<Vec<usize>> {
        self.components(&self.arm_joints)
    }

    fn components(&self, subset: &[usize]) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for &j in subset {
            match self.parents[j].filter(|p| subset.contains(p)) {
                Some(p) => {
                    let g = groups
                        .iter_mut()
                        .find(|g| g.contains(&p))
                        .expect("parent precedes child");
                    g.push(j);
                }
                None => groups.push(vec![j]),
            }
        }
        groups
    }

    /// Deepest joint that is an ancestor-or-self of every joint in `joints`.
    pub fn common_ancestor(&self, joints: &[usize]) -> Option<usize> {
        let chain = |j: usize| {
            let mut v = vec![j];
            let mut cur = self.parents[j];
            while let Some(p) = cur {
                v.push(p);
                cur = self.parents[p];
            }
            v
        };
        let first = chain(*joints.first()?);
        first.into_iter().find(|&a| {
            joints
                .iter()
                .all(|&j| j == a || self.is_ancestor(a, j))
        })
    }
}

/// Channel layout of the diffusion state `[theta_b | theta_h | psi (| translation)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    pub body_joints: usize,
    pub hand_joints: usize,
    pub expression: usize,
    #[serde(default)]
    pub translation: bool,
}

impl StateLayout {
    pub fn for_tree(tree: &KinematicTree, expression: usize, translation: bool) -> Self {
        Self {
            body_joints: tree.body_joints().len(),
            hand_joints: tree.hand_joints().len(),
            expression,
            translation,
        }
    }

    pub fn dim(&self) -> usize {
        3 * self.body_joints + 3 * self.hand_joints + self.expression + 3 * self.translation as usize
    }

    pub fn body_range(&self) -> Range<usize> {
        0..3 * self.body_joints
    }

    pub fn hand_range(&self) -> Range<usize> {
        let start = 3 * self.body_joints;
        start..start + 3 * self.hand_joints
    }

    pub fn expression_range(&self) -> Range<usize> {
        let start = 3 * (self.body_joints + self.hand_joints);
        start..start + self.expression
    }

    pub fn translation_range(&self) -> Option<Range<usize>> {
        let start = self.expression_range().end;
        self.translation.then_some(start..start + 3)
    }
}

/// Per-frame body pose, hand pose and expression, plus the static shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSequence {
    /// F x (3 * J_b) axis-angle radians.
    pub body_pose: Array2<f64>,
    /// F x (3 * J_h) axis-angle radians.
    pub hand_pose: Array2<f64>,
    /// F x E expression coefficients.
    pub expression: Array2<f64>,
    /// Static shape coefficients.
    pub shape: Array1<f64>,
    /// Optional F x 3 root translation.
    pub translation: Option<Array2<f64>>,
    pub fps: f64,
}

impl ParamSequence {
    pub fn new(
        body_pose: Array2<f64>,
        hand_pose: Array2<f64>,
        expression: Array2<f64>,
        shape: Array1<f64>,
        translation: Option<Array2<f64>>,
        fps: f64,
    ) -> Result<Self> {
        let seq = Self {
            body_pose,
            hand_pose,
            expression,
            shape,
            translation,
            fps,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn zeros(layout: StateLayout, frames: usize, shape_dim: usize, fps: f64) -> Self {
        Self {
            body_pose: Array2::zeros((frames, 3 * layout.body_joints)),
            hand_pose: Array2::zeros((frames, 3 * layout.hand_joints)),
            expression: Array2::zeros((frames, layout.expression)),
            shape: Array1::zeros(shape_dim),
            translation: layout.translation.then(|| Array2::zeros((frames, 3))),
            fps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.body_pose.nrows();
        if f == 0 {
            return Err(Error::DimensionMismatch("sequence has no frames".into()));
        }
        if self.body_pose.ncols() % 3 != 0 || self.hand_pose.ncols() % 3 != 0 {
            return Err(Error::DimensionMismatch(
                "pose widths must be multiples of 3".into(),
            ));
        }
        let trans_rows = self.translation.as_ref().map(|t| (t.nrows(), t.ncols()));
        if self.hand_pose.nrows() != f
            || self.expression.nrows() != f
            || trans_rows.is_some_and(|(r, c)| r != f || c != 3)
        {
            return Err(Error::DimensionMismatch(
                "body pose, hand pose, expression and translation frame counts differ".into(),
            ));
        }
        let all_finite = self.body_pose.iter().all(|v| v.is_finite())
            && self.hand_pose.iter().all(|v| v.is_finite())
            && self.expression.iter().all(|v| v.is_finite())
            && self.shape.iter().all(|v| v.is_finite())
            && self
                .translation
                .as_ref()
                .is_none_or(|t| t.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::NonFinite("parameter sequence".into()));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::DimensionMismatch(format!("fps must be positive, got {}", self.fps)));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.body_pose.nrows()
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout {
            body_joints: self.body_pose.ncols() / 3,
            hand_joints: self.hand_pose.ncols() / 3,
            expression: self.expression.ncols(),
            translation: self.translation.is_some(),
        }
    }

    /// Checks that the pose widths match the tree's body / hand split.
    pub fn check_tree(&self, tree: &KinematicTree) -> Result<()> {
        let layout = self.layout();
        if layout.body_joints != tree.body_joints().len()
            || layout.hand_joints != tree.hand_joints().len()
        {
            return Err(Error::DimensionMismatch(format!(
                "sequence has {} body and {} hand joints, skeleton has {} and {}",
                layout.body_joints,
                layout.hand_joints,
                tree.body_joints().len(),
                tree.hand_joints().len()
            )));
        }
        Ok(())
    }

    /// The F x D diffusion state `[theta_b | theta_h | psi (| translation)]`.
    pub fn to_state(&self) -> Array2<f64> {
        let layout = self.layout();
        let mut state = Array2::zeros((self.frames(), layout.dim()));
        state
            .slice_mut(s![.., layout.body_range()])
            .assign(&self.body_pose);
        state
            .slice_mut(s![.., layout.hand_range()])
            .assign(&self.hand_pose);
        state
            .slice_mut(s![.., layout.expression_range()])
            .assign(&self.expression);
        if let (Some(r), Some(t)) = (layout.translation_range(), &self.translation) {
            state.slice_mut(s![.., r]).assign(t);
        }
        state
    }

    pub fn from_state(
        layout: StateLayout,
        state: &Array2<f64>,
        shape: Array1<f64>,
        fps: f64,
    ) -> Result<Self> {
        if state.ncols() != layout.dim() {
            return Err(Error::DimensionMismatch(format!(
                "state has {} channels, layout expects {}",
                state.ncols(),
                layout.dim()
            )));
        }
        Self::new(
            state.slice(s![.., layout.body_range()]).to_owned(),
            state.slice(s![.., layout.hand_range()]).to_owned(),
            state.slice(s![.., layout.expression_range()]).to_owned(),
            shape,
            layout
                .translation_range()
                .map(|r| state.slice(s![.., r]).to_owned()),
            fps,
        )
    }

    fn rotation_block(&self, tree: &KinematicTree, joint: usize) -> (bool, usize) {
        let c = tree.rotation_channel(joint);
        let nb = self.body_pose.ncols();
        if c < nb {
            (false, c)
        } else {
            (true, c - nb)
        }
    }

    pub fn joint_rotation(&self, tree: &KinematicTree, frame: usize, joint: usize) -> Vector3<f64> {
        let (hand, c) = self.rotation_block(tree, joint);
        let m = if hand { &self.hand_pose } else { &self.body_pose };
        Vector3::new(m[[frame, c]], m[[frame, c + 1]], m[[frame, c + 2]])
    }

    pub fn set_joint_rotation(
        &mut self,
        tree: &KinematicTree,
        frame: usize,
        joint: usize,
        value: Vector3<f64>,
    ) {
        let (hand, c) = self.rotation_block(tree, joint);
        let m = if hand {
            &mut self.hand_pose
        } else {
            &mut self.body_pose
        };
        for k in 0..3 {
            m[[frame, c + k]] = value[k];
        }
    }

    /// Rotations of every joint at `frame`, in tree order.
    pub fn joint_rotations(&self, tree: &KinematicTree, frame: usize) -> Vec<Vector3<f64>> {
        (0..tree.joint_count())
            .map(|j| self.joint_rotation(tree, frame, j))
            .collect()
    }

    pub fn translation_at(&self, frame: usize) -> Vector3<f64> {
        self.translation
            .as_ref()
            .map_or_else(Vector3::zeros, |t| Vector3::new(t[[frame, 0]], t[[frame, 1]], t[[frame, 2]]))
    }
}

/// World positions and orientations of every joint for one frame.
#[derive(Debug, Clone)]
pub struct FramePose {
    pub positions: Vec<Vector3<f64>>,
    pub globals: Vec<Matrix3<f64>>,
}

pub fn axis_angle_matrix(r: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*r).into_inner()
}

/// Left Jacobian of the SO(3) exponential: `exp(r + d) ~ exp(J(r) d) exp(r)`.
pub fn left_jacobian(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = r.norm_squared();
    let (b, c) = if theta2 < 1e-8 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let k = r.cross_matrix();
    Matrix3::identity() + k * b + k * k * c
}

/// Poses one frame. The root sits at `translation`; its rest offset is ignored.
pub fn pose_frame(
    tree: &KinematicTree,
    rotations: &[Vector3<f64>],
    translation: Vector3<f64>,
) -> FramePose {
    let n = tree.joint_count();
    let mut positions = Vec::with_capacity(n);
    let mut globals = Vec::with_capacity(n);
    for j in 0..n {
        let local = axis_angle_matrix(&rotations[j]);
        match tree.parent(j) {
            None => {
                positions.push(translation);
                globals.push(local);
            }
            Some(p) => {
                positions.push(positions[p] + globals[p] * tree.offset(j));
                globals.push(globals[p] * local);
            }
        }
    }
    FramePose { positions, globals }
}

/// F x J x 3 joint positions of a parameter sequence.
pub fn forward_kinematics(tree: &KinematicTree, seq: &ParamSequence) -> Result<Array3<f64>> {
    seq.check_tree(tree)?;
    let n = tree.joint_count();
    let mut track = Array3::zeros((seq.frames(), n, 3));
    for f in 0..seq.frames() {
        let pose = pose_frame(tree, &seq.joint_rotations(tree, f), seq.translation_at(f));
        for (j, p) in pose.positions.iter().enumerate() {
            for k in 0..3 {
                track[[f, j, k]] = p[k];
            }
        }
    }
    Ok(track)
}

/// Pinhole camera with upper-triangular intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    k: Matrix3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    pub fn new(k: Matrix3<f64>) -> Result<Self> {
        let lower_zero = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0;
        let diag_positive = (0..3).all(|i| k[(i, i)] > 0.0);
        if !lower_zero || !diag_positive || !k.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera(
                "intrinsics must be upper-triangular with a positive diagonal".into(),
            ));
        }
        Ok(Self { k })
    }

    pub fn from_intrinsics(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        Self::new(Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0))
    }

    pub fn from_file(file: &CameraFile) -> Result<Self> {
        Self::from_intrinsics(file.fx, file.fy, file.cx, file.cy)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file(&serde_json::from_str(&text)?)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn project_point(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        if !(p.z > 0.0) {
            return Err(Error::BehindCamera { index: 0, z: p.z });
        }
        let h = self.k * p;
        Ok(Vector2::new(h.x / h.z, h.y / h.z))
    }

    pub fn project(&self, points: &[Vector3<f64>]) -> Result<Vec<Vector2<f64>>> {
        points
            .iter()
            .enumerate()
            .map(|(index, p)| {
                self.project_point(p)
                    .map_err(|_| Error::BehindCamera { index, z: p.z })
            })
            .collect()
    }

    /// Projects an F x J x 3 track to F x J x 2 pixels.
    pub fn project_track(&self, track: &Array3<f64>) -> Result<Array3<f64>> {
        let (f, j, c) = track.dim();
        if c != 3 {
            return Err(Error::DimensionMismatch(format!("expected 3D points, got {c}")));
        }
        let mut out = Array3::zeros((f, j, 2));
        for fi in 0..f {
            for ji in 0..j {
                let p = Vector3::new(track[[fi, ji, 0]], track[[fi, ji, 1]], track[[fi, ji, 2]]);
                let uv = self.project_point(&p).map_err(|_| Error::BehindCamera {
                    index: fi * j + ji,
                    z: p.z,
                })?;
                out[[fi, ji, 0]] = uv.x;
                out[[fi, ji, 1]] = uv.y;
            }
        }
        Ok(out)
    }

    /// Derivative of the projected pixel w.r.t. the 3D point.
    pub fn projection_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let h = self.k * p;
        let (u, v) = (h.x / h.z, h.y / h.z);
        let r0 = self.k.row(0) - self.k.row(2) * u;
        let r1 = self.k.row(1) - self.k.row(2) * v;
        Matrix2x3::from_rows(&[r0 / h.z, r1 / h.z])
    }
}

/// Sparse convex-combination map from joints to proxy surface points.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexRegressor {
    joint_count: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl VertexRegressor {
    pub fn new(joint_count: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for (m, row) in rows.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::InvalidRegressor(format!("row {m} is empty")));
            }
            if let Some((j, w)) = row.iter().find(|(j, w)| *j >= joint_count || !(*w >= 0.0)) {
                return Err(Error::InvalidRegressor(format!(
                    "row {m} has entry ({j}, {w}); weights must be non-negative joint indices below {joint_count}"
                )));
            }
            let sum: f64 = row.iter().map(|(_, w)| w).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidRegressor(format!("row {m} sums to {sum}")));
            }
        }
        Ok(Self { joint_count, rows })
    }

    pub fn from_dense(weights: &Array2<f64>) -> Result<Self> {
        let rows = weights
            .outer_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0.0)
                    .map(|(j, w)| (j, *w))
                    .collect()
            })
            .collect();
        Self::new(weights.ncols(), rows)
    }

    /// One proxy point per joint plus one per bone at its midpoint.
    pub fn for_tree(tree: &KinematicTree) -> Self {
        let n = tree.joint_count();
        let mut rows: Vec<Vec<(usize, f64)>> = (0..n).map(|j| vec![(j, 1.0)]).collect();
        for j in 1..n {
            let p = tree.parent(j).expect("non-root joint");
            rows.push(vec![(p, 0.5), (j, 0.5)]);
        }
        Self::new(n, rows).expect("midpoint rows are convex")
    }

    pub fn vertex_count(&self) -> usize {
        self.rows.len()
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// Joint carrying the largest weight; ties go to the deeper joint.
    pub fn dominant_joint(&self, vertex: usize) -> usize {
        self.rows[vertex]
            .iter()
            .fold((0, f64::NEG_INFINITY), |best, &(j, w)| {
                if w > best.1 || (w == best.1 && j > best.0) {
                    (j, w)
                } else {
                    best
                }
            })
            .0
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut w = Array2::zeros((self.rows.len(), self.joint_count));
        for (m, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                w[[m, j]] += v;
            }
        }
        w
    }

    pub fn apply_frame(&self, joints: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, w)| joints[j] * w).sum())
            .collect()
    }

    /// Pulls a per-vertex gradient back to the joints (`W^T g`).
    pub fn transpose_apply_frame(&self, grad: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        let mut out = vec![Vector3::zeros(); self.joint_count];
        for (row, g) in self.rows.iter().zip(grad) {
            for &(j, w) in row {
                out[j] += g * w;
            }
        }
        out
    }

    /// Maps an F x J x 3 joint track to F x M x 3 proxy vertices.
    pub fn apply(&self, joints: &Array3<f64>) -> Result<Array3<f64>> {
        let (f, j, c) = joints.dim();
        if j != self.joint_count || c != 3 {
            return Err(Error::DimensionMismatch(format!(
                "regressor expects {} joints x 3, got {j} x {c}",
                self.joint_count
            )));
        }
        let mut out = Array3::zeros((f, self.rows.len(), 3));
        for fi in 0..f {
            for (m, row) in self.rows.iter().enumerate() {
                for &(ji, w) in row {
                    for k in 0..3 {
                        out[[fi, m, k]] += w * joints[[fi, ji, k]];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Rows of an F x J x 3 track as vectors for one frame.
pub fn frame_points(track: &Array3<f64>, frame: usize) -> Vec<Vector3<f64>> {
    (0..track.dim().1)
        .map(|j| Vector3::new(track[[frame, j, 0]], track[[frame, j, 1]], track[[frame, j, 2]]))
        .collect()
}
