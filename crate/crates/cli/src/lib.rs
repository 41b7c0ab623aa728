//! Command implementations behind the `signmotion` binary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Serialize};
use signmotion_core::dataset::{
    by_split, generate_corpus, load_corpus, load_params, load_skeleton, save_corpus, save_params, CorpusConfig,
    GeneratorInfo, Lexicon, LexiconConfig, MotionSample, Split, GENERATOR,
};
use signmotion_core::fitting::{fit_sequence, Detections, FitConfig};
use signmotion_core::kinematics::{forward_kinematics, Camera, KinematicTree, ParamSequence, VertexRegressor};
use signmotion_core::metrics::evaluate_pairs;
use signmotion_core::pose_prior::{ComponentCount, PriorGroup, PriorSet};
use signmotion_model::checkpoint::TrainedModel;
use signmotion_model::denoiser::{ModelConfig, Variant};
use signmotion_model::evaluate::{ablation_row, evaluate_model};
use signmotion_model::schedule::ScheduleConfig;
use signmotion_model::train::{train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "signmotion", version, about = "Text-to-sign-motion diffusion toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic pseudo-sign corpus.
    GenData(GenData),
    /// Fit PCA pose priors on a corpus.
    FitPrior(FitPrior),
    /// Refine a parameter sequence against 2D detections.
    Fit(Fit),
    /// Train the diffusion model.
    Train(Train),
    /// Sample a motion for a transcript.
    Sample(Sample),
    /// Score a checkpoint (or a directory of generated motions) on a split.
    Evaluate(Evaluate),
    /// Train and evaluate one architecture variant.
    Ablate(Ablate),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub sentences: Option<usize>,
    #[arg(long)]
    pub tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitPrior {
    #[arg(long)]
    pub data: PathBuf,
    /// Components per prior; by default enough for 95% of the variance, at most 12.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Fit {
    /// Initial parameter file.
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    /// Camera intrinsics JSON `{fx, fy, cx, cy}`.
    #[arg(long)]
    pub camera: PathBuf,
    /// Fitting configuration JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of prior checkpoints from `fit-prior`.
    #[arg(long)]
    pub priors: Option<PathBuf>,
    /// Skeleton JSON; the default signer when omitted.
    #[arg(long)]
    pub skeleton: Option<PathBuf>,
    /// Output parameter file; the loss trace goes next to it as `.trace.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Train {
    #[arg(long)]
    pub data: PathBuf,
    /// Model configuration JSON; the desk-scale configuration when omitted.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Noise schedule JSON `{steps, beta_start, beta_end}`.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// Training configuration JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Sample {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output parameter file; joint positions go next to it as `.joints.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Evaluate {
    #[arg(long, required_unless_present = "generated", conflicts_with = "generated")]
    pub checkpoint: Option<PathBuf>,
    /// Corpus directory of already generated motions, matched to `--data` by id.
    #[arg(long)]
    pub generated: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct Ablate {
    #[arg(long)]
    pub variant: String,
    #[arg(long)]
    pub data: PathBuf,
    /// Base model configuration JSON the variant modifies.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the checkpoint and the comparison row.
    #[arg(long)]
    pub out: PathBuf,
}

/// Marks failures caused by the caller's inputs rather than by the program.
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

/// 1 for bad inputs (missing files, malformed or invalid configs), 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use signmotion_core::Error as C;
    use signmotion_model::Error as M;
    let core_is_user = |e: &C| {
        matches!(
            e,
            C::InvalidSkeleton(_)
                | C::DimensionMismatch(_)
                | C::InvalidCamera(_)
                | C::InvalidRegressor(_)
                | C::InvalidComponentCount { .. }
                | C::InvalidConfig(_)
                | C::Format(_)
                | C::VersionMismatch { .. }
                | C::Schema(_)
                | C::EmptyText
                | C::EmptyInput(_)
                | C::Io(_)
                | C::Json(_)
                | C::EmbeddingUnavailable(_)
                | C::DegenerateInput(_)
                | C::BehindCamera { .. }
        )
    };
    for cause in err.chain() {
        if cause.is::<UserError>() || cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<C>() {
            return if core_is_user(e) { 1 } else { 2 };
        }
        if let Some(e) = cause.downcast_ref::<M>() {
            return match e {
                M::Core(c) => {
                    if core_is_user(c) {
                        1
                    } else {
                        2
                    }
                }
                M::InvalidConfig(_) | M::InvalidSchedule(_) | M::TimestepOutOfRange { .. } | M::Checkpoint(_) | M::Io(_) | M::Json(_) => 1,
                M::Tensor(_) | M::TrainingInstability { .. } => 2,
            };
        }
    }
    2
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => bail!(UserError(format!("unknown split `{other}`; use train, val or test"))),
    }
}

fn load_data(dir: &Path) -> Result<(KinematicTree, Vec<MotionSample>)> {
    let samples = load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
    if samples.is_empty() {
        bail!(UserError(format!("corpus {} is empty", dir.display())));
    }
    Ok((load_skeleton(dir)?, samples))
}

fn split_or_fail(samples: &[MotionSample], split: Split) -> Result<Vec<&MotionSample>> {
    let chosen = by_split(samples, split);
    if chosen.is_empty() {
        bail!(UserError(format!("corpus has no {split:?} samples")));
    }
    Ok(chosen)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::FitPrior(args) => fit_prior(args),
        Command::Fit(args) => fit(args),
        Command::Train(args) => train_cmd(args),
        Command::Sample(args) => sample(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Ablate(args) => ablate(args),
    }
}

fn gen_data(args: GenData) -> Result<()> {
    let tree = KinematicTree::default_signer();
    let mut lexicon_config = LexiconConfig::default();
    if let Some(tokens) = args.tokens {
        lexicon_config.tokens = tokens;
    }
    let mut corpus_config = CorpusConfig::default();
    if let Some(n) = args.sentences {
        corpus_config.sentences = n;
    }
    let lexicon = Lexicon::generate(&tree, lexicon_config.clone(), args.seed)?;
    let samples = generate_corpus(&lexicon, &corpus_config, args.seed)?;
    save_corpus(&args.out, &samples, Some(&tree))?;
    write_json(
        &args.out.join(GENERATOR),
        &GeneratorInfo {
            seed: args.seed,
            lexicon: lexicon_config,
            corpus: corpus_config,
        },
    )?;
    log::info!("wrote {} sequences to {}", samples.len(), args.out.display());
    Ok(())
}

fn fit_prior(args: FitPrior) -> Result<()> {
    let (tree, samples) = load_data(&args.data)?;
    let train = split_or_fail(&samples, Split::Train)?;
    let poses: Vec<_> = train
        .iter()
        .flat_map(|s| (0..s.params.frames()).map(|f| s.params.joint_rotations(&tree, f)))
        .collect();
    let components = match args.d {
        Some(d) => ComponentCount::Fixed(d),
        None => ComponentCount::default(),
    };
    let priors = PriorSet::fit(&tree, &PriorGroup::defaults(&tree)?, &poses, components)?;
    priors.save_dir(&args.out)?;
    for p in &priors.priors {
        log::info!("prior {}: {} components", p.group.name, p.pca.component_count());
    }
    Ok(())
}

fn fit(args: Fit) -> Result<()> {
    let tree = match &args.skeleton {
        Some(path) => KinematicTree::load_json(path)?,
        None => KinematicTree::default_signer(),
    };
    let config: FitConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => FitConfig::default(),
    };
    let init = load_params(&args.init).with_context(|| format!("loading {}", args.init.display()))?;
    let detections = Detections::read(&args.detections).with_context(|| format!("loading {}", args.detections.display()))?;
    let camera = Camera::load_json(&args.camera).with_context(|| format!("loading {}", args.camera.display()))?;
    let priors = args.priors.as_ref().map(PriorSet::load_dir).transpose()?;
    let regressor = VertexRegressor::for_tree(&tree);
    let result = fit_sequence(&init, &detections, &camera, &tree, priors.as_ref(), &regressor, &config)?;
    save_params(&args.out, &result.params)?;
    fs::write(args.out.with_extension("trace.json"), result.trace_json()?)?;
    log::info!(
        "fit finished after {} iterations (converged: {})",
        result.trace.len(),
        result.converged
    );
    Ok(())
}

fn train_config(args: &Train) -> Result<TrainConfig> {
    let mut config: TrainConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => TrainConfig::default(),
    };
    if let Some(path) = &args.schedule {
        config.schedule = read_json::<ScheduleConfig>(path)?;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(b) = args.batch_size {
        config.batch_size = b;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(c) = args.checkpoint_every {
        config.checkpoint_every = c;
    }
    Ok(config)
}

fn model_config(path: Option<&PathBuf>) -> Result<ModelConfig> {
    Ok(match path {
        Some(path) => read_json(path)?,
        None => ModelConfig::small(),
    })
}

fn train_cmd(args: Train) -> Result<()> {
    let config = train_config(&args)?;
    let model = model_config(args.model_config.as_ref())?;
    let (tree, samples) = load_data(&args.data)?;
    let train_set = split_or_fail(&samples, Split::Train)?;
    let (trained, log) = train(&train_set, &tree, &model, &config, Some(&args.out))?;
    write_json(&args.out.join("train_log.json"), &log)?;
    write_json(&args.out.join("summary.json"), &trained.summary())?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        log::info!("training loss {:.4} -> {:.4}", first.mean_loss, last.mean_loss);
    }
    Ok(())
}

/// Per-frame joint positions for external viewers.
#[derive(Debug, Serialize)]
struct JointTrack {
    fps: f64,
    joint_names: Vec<String>,
    parents: Vec<Option<usize>>,
    /// frames x joints x xyz, metres.
    positions: Vec<Vec<[f64; 3]>>,
}

fn joint_track(tree: &KinematicTree, params: &ParamSequence) -> Result<JointTrack> {
    let track = forward_kinematics(tree, params)?;
    let (frames, joints, _) = track.dim();
    Ok(JointTrack {
        fps: params.fps,
        joint_names: (0..joints).map(|j| tree.name(j).to_string()).collect(),
        parents: (0..joints).map(|j| tree.parent(j)).collect(),
        positions: (0..frames)
            .map(|f| (0..joints).map(|j| [track[[f, j, 0]], track[[f, j, 1]], track[[f, j, 2]]]).collect())
            .collect(),
    })
}

fn sample(args: Sample) -> Result<()> {
    if args.frames == 0 {
        bail!(UserError("--frames must be at least 1".into()));
    }
    let model = TrainedModel::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let params = model
        .sample(&[args.text.as_str()], &[args.frames], args.seed)?
        .pop()
        .expect("one sequence per transcript");
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_params(&args.out, &params)?;
    write_json(&args.out.with_extension("joints.json"), &joint_track(&model.tree, &params)?)?;
    Ok(())
}

fn evaluate(args: Evaluate) -> Result<()> {
    let split = parse_split(&args.split)?;
    let (tree, samples) = load_data(&args.data)?;
    let chosen = split_or_fail(&samples, split)?;
    let report = match (&args.checkpoint, &args.generated) {
        (Some(checkpoint), _) => {
            let model = TrainedModel::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            evaluate_model(&model, &chosen, args.seed)?
        }
        (None, Some(dir)) => {
            let generated = load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
            let mut pairs = (Vec::new(), Vec::new());
            for s in &chosen {
                let g = generated
                    .iter()
                    .find(|g| g.id == s.id)
                    .ok_or_else(|| UserError(format!("no generated motion for `{}`", s.id)))?;
                pairs.0.push(g.params.clone());
                pairs.1.push(s.params.clone());
            }
            evaluate_pairs(&tree, &VertexRegressor::for_tree(&tree), &pairs.0, &pairs.1)?
        }
        (None, None) => bail!(UserError("pass --checkpoint or --generated".into())),
    };
    write_json(&args.report, &report)?;
    Ok(())
}

fn ablate(args: Ablate) -> Result<()> {
    let variant: Variant = args
        .variant
        .parse()
        .map_err(|e: signmotion_model::Error| UserError(e.to_string()))?;
    let mut config = TrainConfig {
        seed: args.seed,
        ..TrainConfig::default()
    };
    if let Some(path) = &args.schedule {
        config.schedule = read_json(path)?;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    let model = model_config(args.model_config.as_ref())?.with_variant(variant);
    let (tree, samples) = load_data(&args.data)?;
    let train_set = split_or_fail(&samples, Split::Train)?;
    let test_set = split_or_fail(&samples, Split::Test)?;
    let (trained, log) = train(&train_set, &tree, &model, &config, Some(&args.out))?;
    let final_loss = log.last().map(|l| l.mean_loss).unwrap_or(f64::NAN);
    let row = ablation_row(variant, &trained, &test_set, final_loss, args.seed)?;
    write_json(&args.out.join("train_log.json"), &log)?;
    write_json(&args.out.join("ablation_row.json"), &row)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_separate_user_and_internal_failures() {
        let user = anyhow::Error::from(signmotion_model::Error::Checkpoint("bad".into()));
        assert_eq!(exit_code(&user), 1);
        let io = anyhow::Error::from(std::io::Error::from(std::io::ErrorKind::NotFound)).context("loading");
        assert_eq!(exit_code(&io), 1);
        let unstable = anyhow::Error::from(signmotion_model::Error::TrainingInstability { step: 3 });
        assert_eq!(exit_code(&unstable), 2);
        let diverged = anyhow::Error::from(signmotion_core::Error::Divergence { iteration: 4 });
        assert_eq!(exit_code(&diverged), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("unexpected")), 2);
    }
}
