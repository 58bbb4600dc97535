use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use earforge::augment::{augment_landmark_corpus, AugmentSpec};
use earforge::container::{save_network, write_atomic};
use earforge::descriptors::DescriptorKind;
use earforge::evalkit::{Protocol, Side};
use earforge::imgcore::{encode_png, load_image};
use earforge::landmarks::LandmarkSet;
use earforge::manifest::{load_manifest, DatasetManifest};
use earforge::matchfuse::FusionRule;
use earforge::nn::{train_descriptor_net, train_landmark_net, train_side_net, DescriptorTraining, LandmarkTraining, SideTraining};
use earforge::normalizer::normalize_geometric;
use earforge::pipeline::{load_normalized, run_pipeline, stage_seed, training_entries, PipelineConfig, StageToggles};
use earforge::synth::{subject_dataset, write_fixture, Variation};
use earforge::{Error, Result};

#[derive(Parser)]
#[command(name = "earforge", version, about = "Ear recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON pipeline configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long = "descriptor")]
    descriptors: Vec<DescriptorKind>,
    #[arg(long)]
    rule: Option<FusionRule>,
    #[arg(long)]
    protocol: Option<Protocol>,
    #[arg(long)]
    allow_random_bsif: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    scale_factor: Option<usize>,
    #[arg(long)]
    input_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Geometric normalization with manifest or detected landmarks.
    Normalize(Common),
    /// Write augmented landmark-training crops and targets.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        stage: u8,
        #[arg(long, default_value_t = 96)]
        size: usize,
    },
    /// Train a landmark regressor on annotated manifest images.
    TrainLandmarks {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 1)]
        stage: u8,
    },
    /// Two-stage landmark detection.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        stage2: Option<PathBuf>,
    },
    /// Train the descriptor network on normalized training images.
    TrainDescriptor {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train the left/right classifier on side-labelled images.
    TrainSide {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Extract descriptors from normalized images.
    Extract(Common),
    /// All-vs-all score matrices per descriptor.
    Match(Common),
    /// Min-max normalization and score fusion.
    Fuse(Common),
    /// Evaluate the fused (or single) score matrix under a protocol.
    Evaluate(Common),
    /// Run the configured stages end to end.
    Pipeline(Common),
    /// Render a synthetic dataset with a manifest.
    Fixture {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        subjects: usize,
        #[arg(long, default_value_t = 5)]
        per_subject: usize,
        /// Subjects marked `train`; the rest are `test`.
        #[arg(long)]
        train_subjects: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        right_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn config_of(c: &Common) -> Result<PipelineConfig> {
    let mut config = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = c.seed {
        config.seed = s;
    }
    if let Some(d) = &c.out_dir {
        config.out_dir = d.clone();
    }
    if !c.descriptors.is_empty() {
        config.descriptors = c.descriptors.clone();
    }
    if let Some(r) = c.rule {
        config.rule = r;
    }
    if let Some(p) = c.protocol {
        config.protocol.protocol = p;
    }
    config.allow_random_bsif |= c.allow_random_bsif;
    Ok(config)
}

fn only(stage: &str) -> StageToggles {
    StageToggles {
        detect: stage == "detect",
        normalize: stage == "normalize",
        describe: stage == "describe",
        match_scores: stage == "match",
        fuse: stage == "fuse",
        evaluate: stage == "evaluate",
    }
}

fn run_stage(common: &Common, stage: &str, edit: impl FnOnce(&mut PipelineConfig)) -> Result<()> {
    let manifest = load_manifest(&common.manifest)?;
    let mut config = config_of(common)?;
    config.stages = only(stage);
    edit(&mut config);
    if let Some(report) = run_pipeline(&config, &manifest)? {
        print!("{}", report.to_json()?);
    }
    Ok(())
}

fn annotated(manifest: &DatasetManifest) -> Result<Vec<(String, earforge::imgcore::GrayImage, LandmarkSet)>> {
    manifest
        .entries
        .iter()
        .filter_map(|e| manifest.landmarks_path(e).map(|p| (e, p)))
        .map(|(e, p)| Ok((e.image_id.clone(), load_image(&manifest.image_path(e))?, LandmarkSet::load(&p)?)))
        .collect()
}

fn augment_spec(stage: u8) -> Result<AugmentSpec> {
    match stage {
        1 => Ok(AugmentSpec::stage1()),
        2 => Ok(AugmentSpec::stage2()),
        s => Err(Error::BadAugmentSpec(format!("stage must be 1 or 2, got {s}"))),
    }
}

fn augment(common: &Common, stage: u8, size: usize) -> Result<()> {
    let manifest = load_manifest(&common.manifest)?;
    let config = config_of(common)?;
    let items: Vec<_> = annotated(&manifest)?;
    let ids: Vec<String> = items.iter().map(|(id, _, _)| id.clone()).collect();
    let pairs: Vec<_> = items.into_iter().map(|(_, img, lm)| (img, lm)).collect();
    let spec = augment_spec(stage)?.with_out_size(size);
    let per = spec.rotations().len();
    let samples = augment_landmark_corpus(&pairs, &spec, stage_seed(config.seed, "augment"))?;
    let dir = config.out_dir.join("augment");
    std::fs::create_dir_all(&dir)?;
    let mut csv = String::from("image,source_id,rotation_deg,targets\n");
    for (k, s) in samples.iter().enumerate() {
        let name = format!("{:06}.png", k);
        write_atomic(&dir.join(&name), &encode_png(&s.image)?)?;
        let t: Vec<String> = s.targets.iter().map(|v| v.to_string()).collect();
        csv += &format!("{name},{},{},\"{}\"\n", ids[k / per], s.params.rotation_deg, t.join(" "));
    }
    write_atomic(&dir.join("samples.csv"), csv.as_bytes())?;
    println!("{} samples from {} images", samples.len(), pairs.len());
    Ok(())
}

fn train_landmarks(common: &Common, args: &TrainArgs, stage: u8) -> Result<()> {
    let manifest = load_manifest(&common.manifest)?;
    let config = config_of(common)?;
    let train_ids: Vec<&str> = training_entries(&manifest)?.iter().map(|e| e.image_id.as_str()).collect();
    let items: Vec<_> = annotated(&manifest)?
        .into_iter()
        .filter(|(id, _, _)| train_ids.contains(&id.as_str()))
        .map(|(_, img, lm)| (img, lm))
        .collect();
    let mut opts = LandmarkTraining {
        seed: stage_seed(config.seed, "landmarks"),
        ..LandmarkTraining::default()
    };
    opts.augment = augment_spec(stage)?;
    if let Some(e) = args.epochs {
        opts.epochs = e;
    }
    if let Some(s) = args.scale_factor {
        opts.scale_factor = s;
    }
    if let Some(s) = args.input_size {
        opts.input_size = s;
    }
    let (net, log) = train_landmark_net(&items, &opts)?;
    let path = config.out_dir.join("models").join(format!("landmarks_stage{stage}.earn"));
    save_network(&net.net, &path)?;
    write_atomic(&path.with_extension("csv"), log.to_csv().as_bytes())?;
    println!("{}", path.display());
    Ok(())
}

fn train_descriptor(common: &Common, args: &TrainArgs) -> Result<()> {
    let manifest = load_manifest(&common.manifest)?;
    let config = config_of(common)?;
    let train = training_entries(&manifest)?;
    let mut subjects: Vec<&str> = train.iter().map(|e| e.subject_id.as_str()).collect();
    subjects.sort_by(|a, b| earforge::evalkit::natural_cmp(a, b));
    subjects.dedup();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for e in &train {
        images.push(load_normalized(&config.out_dir, &e.image_id)?);
        labels.push(subjects.iter().position(|s| *s == e.subject_id).expect("listed"));
    }
    let mut opts: DescriptorTraining = config.cnn_training.clone();
    opts.seed = stage_seed(config.seed, "cnn");
    if let Some(e) = args.epochs {
        opts.epochs = e;
    }
    if let Some(s) = args.scale_factor {
        opts.scale_factor = s;
    }
    if let Some(s) = args.input_size {
        opts.input_size = s;
    }
    let (net, log) = train_descriptor_net(&images, &labels, &opts)?;
    let path = config.out_dir.join("models").join("cnn.earn");
    save_network(&net, &path)?;
    write_atomic(&config.out_dir.join("models").join("cnn_log.csv"), log.to_csv().as_bytes())?;
    println!("{}", path.display());
    Ok(())
}

fn train_side(common: &Common, args: &TrainArgs) -> Result<()> {
    let manifest = load_manifest(&common.manifest)?;
    let config = config_of(common)?;
    let mut items = Vec::new();
    for e in training_entries(&manifest)? {
        if e.side == Side::Unknown {
            continue;
        }
        let p = manifest.landmarks_path(e).ok_or_else(|| Error::MissingArtifact(format!("landmarks for `{}`", e.image_id)))?;
        let img = normalize_geometric(&load_image(&manifest.image_path(e))?, &LandmarkSet::load(&p)?)?;
        items.push((img, e.side));
    }
    let mut opts = SideTraining {
        seed: stage_seed(config.seed, "side"),
        ..SideTraining::default()
    };
    if let Some(e) = args.epochs {
        opts.epochs = e;
    }
    if let Some(s) = args.scale_factor {
        opts.scale_factor = s;
    }
    if let Some(s) = args.input_size {
        opts.input_size = s;
    }
    let (net, log) = train_side_net(&items, &opts)?;
    let path = config.out_dir.join("models").join("side.earn");
    save_network(&net, &path)?;
    write_atomic(&path.with_extension("csv"), log.to_csv().as_bytes())?;
    println!("{}", path.display());
    Ok(())
}

fn fixture(dir: &Path, subjects: usize, per_subject: usize, train: Option<usize>, right_fraction: f64, seed: u64) -> Result<()> {
    let variation = Variation {
        right_fraction,
        ..Variation::default()
    };
    let samples = subject_dataset(subjects, per_subject, &variation, seed)?;
    let manifest = write_fixture(dir, &samples, train)?;
    println!("{}", manifest.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Normalize(c) => run_stage(&c, "normalize", |_| {}),
        Command::Augment { common, stage, size } => augment(&common, stage, size),
        Command::TrainLandmarks { common, train, stage } => train_landmarks(&common, &train, stage),
        Command::Detect { common, stage1, stage2 } => run_stage(&common, "detect", |c| {
            if let (Some(a), Some(b)) = (stage1, stage2) {
                c.landmark_models = Some([a, b]);
            }
        }),
        Command::TrainDescriptor { common, train } => train_descriptor(&common, &train),
        Command::TrainSide { common, train } => train_side(&common, &train),
        Command::Extract(c) => run_stage(&c, "describe", |_| {}),
        Command::Match(c) => run_stage(&c, "match", |_| {}),
        Command::Fuse(c) => run_stage(&c, "fuse", |_| {}),
        Command::Evaluate(c) => run_stage(&c, "evaluate", |_| {}),
        Command::Pipeline(c) => {
            let manifest = load_manifest(&c.manifest)?;
            let config = config_of(&c)?;
            if let Some(report) = run_pipeline(&config, &manifest)? {
                print!("{}", report.to_json()?);
            }
            Ok(())
        }
        Command::Fixture {
            out_dir,
            subjects,
            per_subject,
            train_subjects,
            right_fraction,
            seed,
        } => fixture(&out_dir, subjects, per_subject, train_subjects, right_fraction, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("EARFORGE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
