//! Synthetic pseudo-sign corpus, parameter files and the corpus layout on disk.
//!
//! Each lexicon token owns a motion primitive: a short clip driven by a few
//! shared per-limb synergies with token-specific sinusoidal coefficients.
//! A sentence's motion is its primitives played back to back with a short
//! linear transition inserted between consecutive primitives.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arrayfile::ArrayFile;
use crate::error::{Error, Result};
use crate::kinematics::{KinematicTree, ParamSequence, StateLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// 80/10/10 assignment from the SHA-256 of the id.
pub fn split_for_id(id: &str) -> Split {
    let digest = Sha256::digest(id.as_bytes());
    let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % 10;
    match bucket {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSample {
    pub id: String,
    pub transcript: String,
    pub split: Split,
    pub params: ParamSequence,
}

impl MotionSample {
    pub fn new(id: String, transcript: String, split: Split, params: ParamSequence) -> Result<Self> {
        if transcript.trim().is_empty() {
            return Err(Error::Schema(format!("sample `{id}` has an empty transcript")));
        }
        params.validate()?;
        Ok(Self {
            id,
            transcript,
            split,
            params,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconConfig {
    pub tokens: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    /// Shared synergies per channel group.
    pub synergies: usize,
    pub expression: usize,
    pub shape_dim: usize,
    pub fps: f64,
    /// Rotation bound (radians, per axis) for arm and hand joints.
    pub limb_limit: f64,
    /// Rotation bound for the remaining joints.
    pub trunk_limit: f64,
    pub expression_limit: f64,
}

impl Default for LexiconConfig {
    fn default() -> Self {
        Self {
            tokens: 64,
            min_duration: 8,
            max_duration: 16,
            synergies: 3,
            expression: 10,
            shape_dim: 10,
            fps: 30.0,
            limb_limit: 1.2,
            trunk_limit: 0.3,
            expression_limit: 1.0,
        }
    }
}

impl LexiconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 {
            return Err(Error::InvalidConfig("lexicon needs at least one token".into()));
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return Err(Error::InvalidConfig(format!(
                "invalid duration range {}..={}",
                self.min_duration, self.max_duration
            )));
        }
        if self.synergies == 0 {
            return Err(Error::InvalidConfig("synergy count must be positive".into()));
        }
        Ok(())
    }
}

/// One token's motion: `duration` x state-dimension frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub token: String,
    pub frames: Array2<f64>,
}

impl Primitive {
    pub fn duration(&self) -> usize {
        self.frames.nrows()
    }
}

/// Token vocabulary with one motion primitive per token.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub config: LexiconConfig,
    pub seed: u64,
    pub layout: StateLayout,
    primitives: Vec<Primitive>,
    /// Per-channel symmetric bound.
    limits: Vec<f64>,
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3);
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
        .collect()
}

/// Channel groups sharing synergies: trunk, left limb, right limb, expression.
fn channel_groups(tree: &KinematicTree, layout: &StateLayout) -> Vec<Vec<usize>> {
    let channels = |joints: &[usize]| -> Vec<usize> {
        joints
            .iter()
            .flat_map(|&j| (0..3).map(move |k| tree.rotation_channel(j) + k))
            .collect()
    };
    let limbs: Vec<usize> = tree.arm_joints().iter().chain(tree.hand_joints()).copied().collect();
    let trunk: Vec<usize> = (0..tree.joint_count()).filter(|j| !limbs.contains(j)).collect();
    let mut groups = vec![channels(&trunk)];
    // Split limbs by side: each hand group plus the arm joints above it.
    for hand in tree.hand_groups() {
        let side: Vec<usize> = limbs
            .iter()
            .copied()
            .filter(|&j| hand.contains(&j) || hand.iter().any(|&h| tree.is_ancestor(j, h)))
            .collect();
        groups.push(channels(&side));
    }
    let covered: Vec<usize> = groups.iter().flatten().copied().collect();
    let rest: Vec<usize> = channels(&limbs).into_iter().filter(|c| !covered.contains(c)).collect();
    if !rest.is_empty() {
        groups.push(rest);
    }
    if layout.expression > 0 {
        groups.push(layout.expression_range().collect());
    }
    groups.retain(|g| !g.is_empty());
    groups
}

impl Lexicon {
    pub fn generate(tree: &KinematicTree, config: LexiconConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = StateLayout::for_tree(tree, config.expression, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let limbs: Vec<usize> = tree.arm_joints().iter().chain(tree.hand_joints()).copied().collect();
        let mut limits = vec![config.expression_limit; layout.dim()];
        for j in 0..tree.joint_count() {
            let bound = if limbs.contains(&j) { config.limb_limit } else { config.trunk_limit };
            for k in 0..3 {
                limits[tree.rotation_channel(j) + k] = bound;
            }
        }

        let groups = channel_groups(tree, &layout);
        // Shared synergy vectors, one set per group.
        let synergies: Vec<Vec<Vec<f64>>> = groups
            .iter()
            .map(|g| {
                (0..config.synergies)
                    .map(|_| g.iter().map(|&c| rng.random_range(-1.0..1.0) * 0.35 * limits[c]).collect())
                    .collect()
            })
            .collect();

        let mut words: Vec<String> = Vec::with_capacity(config.tokens);
        while words.len() < config.tokens {
            let w = pseudo_word(&mut rng);
            if !words.contains(&w) {
                words.push(w);
            }
        }

        let primitives = words
            .into_iter()
            .map(|token| {
                let d = rng.random_range(config.min_duration..=config.max_duration);
                let mut frames = Array2::<f64>::zeros((d, layout.dim()));
                for (group, basis) in groups.iter().zip(&synergies) {
                    for syn in basis {
                        let offset = rng.random_range(-0.5..0.5);
                        let amp = rng.random_range(0.2..0.6);
                        let cycles = rng.random_range(0.5..1.5);
                        let phase = rng.random_range(0.0..std::f64::consts::TAU);
                        for t in 0..d {
                            let u = t as f64 / (d.max(2) - 1) as f64;
                            let a = offset + amp * (std::f64::consts::TAU * cycles * u + phase).sin();
                            for (&c, &w) in group.iter().zip(syn) {
                                frames[[t, c]] += a * w;
                            }
                        }
                    }
                }
                for (c, mut col) in frames.columns_mut().into_iter().enumerate() {
                    col.mapv_inplace(|v: f64| v.clamp(-limits[c], limits[c]));
                }
                Primitive { token, frames }
            })
            .collect();

        Ok(Self {
            config,
            seed,
            layout,
            primitives,
            limits,
        })
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.primitives.iter().map(|p| p.token.as_str())
    }

    pub fn primitive(&self, token: &str) -> Option<&Primitive> {
        self.primitives.iter().find(|p| p.token == token)
    }

    pub fn limits(&self) -> &[f64] {
        &self.limits
    }

    /// Motion for a token sequence and the frame range of each primitive.
    pub fn compose(&self, tokens: &[&str]) -> Result<(Array2<f64>, Vec<Range<usize>>)> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("sentence has no tokens".into()));
        }
        let prims = tokens
            .iter()
            .map(|t| {
                self.primitive(t)
                    .ok_or_else(|| Error::InvalidConfig(format!("token `{t}` is not in the lexicon")))
            })
            .collect::<Result<Vec<_>>>()?;
        let total: usize =
            prims.iter().map(|p| p.duration()).sum::<usize>() + TRANSITION_FRAMES * (prims.len() - 1);
        let mut out = Array2::zeros((total, self.layout.dim()));
        let mut ranges = Vec::with_capacity(prims.len());
        let mut at = 0;
        for (i, p) in prims.iter().enumerate() {
            if i > 0 {
                let from = out.row(at - 1).to_owned();
                let to = p.frames.row(0);
                for k in 1..=TRANSITION_FRAMES {
                    let w = k as f64 / (TRANSITION_FRAMES + 1) as f64;
                    let row = &from * (1.0 - w) + &to * w;
                    out.row_mut(at).assign(&row);
                    at += 1;
                }
            }
            out.slice_mut(s![at..at + p.duration(), ..]).assign(&p.frames);
            ranges.push(at..at + p.duration());
            at += p.duration();
        }
        Ok((out, ranges))
    }

    /// Random frames of random primitives, as full joint rotation lists.
    pub fn sample_poses(
        &self,
        tree: &KinematicTree,
        count: usize,
        seed: u64,
    ) -> Vec<Vec<nalgebra::Vector3<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let p = self.primitives.choose(&mut rng).expect("lexicon is non-empty");
                let t = rng.random_range(0..p.duration());
                let row = p.frames.row(t);
                (0..tree.joint_count())
                    .map(|j| {
                        let c = tree.rotation_channel(j);
                        nalgebra::Vector3::new(row[c], row[c + 1], row[c + 2])
                    })
                    .collect()
            })
            .collect()
    }
}

/// Frames inserted between consecutive primitives.
pub const TRANSITION_FRAMES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub sentences: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sentences: 500,
            min_tokens: 2,
            max_tokens: 6,
        }
    }
}

pub fn sample_id(index: usize) -> String {
    format!("seq_{index:05}")
}

pub fn generate_corpus(lexicon: &Lexicon, config: &CorpusConfig, seed: u64) -> Result<Vec<MotionSample>> {
    if config.min_tokens == 0 || config.min_tokens > config.max_tokens {
        return Err(Error::InvalidConfig(format!(
            "invalid sentence length range {}..={}",
            config.min_tokens, config.max_tokens
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<&str> = lexicon.tokens().collect();
    (0..config.sentences)
        .map(|i| {
            let n = rng.random_range(config.min_tokens..=config.max_tokens);
            let words: Vec<&str> = (0..n).map(|_| *tokens.choose(&mut rng).expect("non-empty")).collect();
            let (state, _) = lexicon.compose(&words)?;
            let params = ParamSequence::from_state(
                lexicon.layout,
                &state,
                Array1::zeros(lexicon.config.shape_dim),
                lexicon.config.fps,
            )?;
            let id = sample_id(i);
            let split = split_for_id(&id);
            MotionSample::new(id, words.join(" "), split, params)
        })
        .collect()
}

/// Writes a parameter file with arrays `theta_b`, `theta_h`, `psi`, `beta`,
/// `fps` and, when present, `trans`.
pub fn save_params(path: impl AsRef<Path>, params: &ParamSequence) -> Result<()> {
    params_to_arrays(params).write(path)
}

pub fn params_to_arrays(params: &ParamSequence) -> ArrayFile {
    let mut file = ArrayFile::new();
    file.insert("theta_b", params.body_pose.clone());
    file.insert("theta_h", params.hand_pose.clone());
    file.insert("psi", params.expression.clone());
    file.insert("beta", params.shape.clone());
    file.insert_scalar("fps", params.fps);
    if let Some(t) = &params.translation {
        file.insert("trans", t.clone());
    }
    file
}

pub fn params_from_arrays(file: &ArrayFile) -> Result<ParamSequence> {
    let trans = match file.get("trans") {
        Some(_) => Some(file.array2("trans")?),
        None => None,
    };
    ParamSequence::new(
        file.array2("theta_b")?,
        file.array2("theta_h")?,
        file.array2("psi")?,
        file.array1("beta")?,
        trans,
        file.scalar("fps")?,
    )
    .map_err(|e| match e {
        Error::DimensionMismatch(m) | Error::NonFinite(m) => Error::Schema(m),
        other => other,
    })
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamSequence> {
    params_from_arrays(&ArrayFile::read(path)?)
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub transcript: String,
    pub split: Split,
    /// Path of the parameter file, relative to the corpus directory.
    pub file: String,
}

pub const MANIFEST: &str = "manifest.jsonl";
pub const SKELETON: &str = "skeleton.json";
pub const GENERATOR: &str = "generator.json";

/// How a synthetic corpus was produced, stored next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub lexicon: LexiconConfig,
    pub corpus: CorpusConfig,
}

/// Writes `manifest.jsonl` and `sequences/<id>.bin` under `dir`, plus the
/// skeleton when given.
pub fn save_corpus(dir: impl AsRef<Path>, samples: &[MotionSample], tree: Option<&KinematicTree>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("sequences"))?;
    let mut manifest = fs::File::create(dir.join(MANIFEST))?;
    for sample in samples {
        let file = format!("sequences/{}.bin", sample.id);
        save_params(dir.join(&file), &sample.params)?;
        let entry = ManifestEntry {
            id: sample.id.clone(),
            transcript: sample.transcript.clone(),
            split: sample.split,
            file,
        };
        writeln!(manifest, "{}", serde_json::to_string(&entry)?)?;
    }
    if let Some(tree) = tree {
        tree.save_json(dir.join(SKELETON))?;
    }
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = dir.as_ref().join(MANIFEST);
    let reader = BufReader::new(fs::File::open(&path)?);
    let mut entries = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), n + 1)))?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<MotionSample>> {
    let dir = dir.as_ref();
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            let params = load_params(dir.join(&e.file))?;
            MotionSample::new(e.id, e.transcript, e.split, params)
        })
        .collect()
}

/// The corpus skeleton, or the default signer when none was stored.
pub fn load_skeleton(dir: impl AsRef<Path>) -> Result<KinematicTree> {
    let path: PathBuf = dir.as_ref().join(SKELETON);
    if path.exists() {
        KinematicTree::load_json(path)
    } else {
        Ok(KinematicTree::default_signer())
    }
}

pub fn by_split(samples: &[MotionSample], split: Split) -> Vec<&MotionSample> {
    samples.iter().filter(|s| s.split == split).collect()
}
