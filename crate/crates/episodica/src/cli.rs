//! Command-line surface: `pretrain`, `embed`, `eval`, `pca`, `synth`,
//! and `augment-preview`.
//!
//! Every run prints its fully resolved configuration (defaults included)
//! before doing any work, as a reproducibility audit trail. The
//! `EPISODICA_SEED` environment variable overrides the configured seed.
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::augment::{augment_view, denormalize, BatchPosition, TransformPair};
use crate::config::RunConfig;
use crate::data::manifest::{DatasetManifest, Split};
use crate::data::ppm::{load_ppm_pgm, save_ppm_pgm};
use crate::data::synth::{write_synthetic, SyntheticSpec};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::eval::{run_protocol, Classifier, FeaturePool, TaskSpec};
use crate::pca::{pca_fit, pca_transform, PcaModel};
use crate::tensor::{read_eten1, write_eten1};
use crate::train::{embed_images, pretrain};

#[derive(Parser)]
#[command(
    name = "episodica",
    about = "Label-free few-shot learning: contrastive pre-training and episodic evaluation",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic grating dataset (PPM files + manifest)
    Synth(SynthArgs),
    /// Pre-train an encoder with the configured contrastive variant
    Pretrain(PretrainArgs),
    /// Embed a dataset split with a trained encoder
    Embed(EmbedArgs),
    /// Run the episodic N-way K-shot protocol on embeddings
    Eval(EvalArgs),
    /// Fit or apply a PCA dimensionality reduction
    #[command(subcommand)]
    Pca(PcaCommand),
    /// Render augmented views of one image for inspection
    AugmentPreview(AugmentPreviewArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// output directory for images and manifest.txt
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 15)]
    n_classes: usize,
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    image_size: usize,
    /// stddev of additive Gaussian pixel noise
    #[arg(long, default_value_t = 0.1)]
    noise: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    /// run configuration file (`key = value` lines); defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// dataset directory containing manifest.txt
    #[arg(long)]
    data: PathBuf,
    /// checkpoint output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    /// checkpoint directory from `pretrain`
    #[arg(long)]
    checkpoint: PathBuf,
    /// dataset directory containing manifest.txt
    #[arg(long)]
    data: PathBuf,
    /// which split to embed
    #[arg(long, default_value = "test")]
    split: String,
    /// output ETEN1 embedding file
    #[arg(long)]
    out: PathBuf,
    /// output label CSV (`index,class_id`)
    #[arg(long)]
    labels: PathBuf,
    /// run configuration file, for the normalization constants
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// ETEN1 embedding file
    #[arg(long)]
    embeddings: PathBuf,
    /// label CSV (`index,class_id`)
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    #[arg(long, default_value_t = 15)]
    n_query: usize,
    #[arg(long, default_value_t = 10000)]
    n_tasks: usize,
    /// 1nn, attn, 1nn-centroid, or attn-centroid
    #[arg(long, default_value = "attn")]
    classifier: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// L2-normalize embeddings before classification
    #[arg(long)]
    normalize: bool,
    /// include per-task accuracies in the JSON report
    #[arg(long)]
    per_task: bool,
    /// write the JSON report here as well as to stdout
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PcaCommand {
    /// Fit a PCA model on an embedding file
    Fit {
        /// ETEN1 embedding file to fit on
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out_dim: usize,
        /// model output directory
        #[arg(long)]
        model: PathBuf,
    },
    /// Project an embedding file with a fitted model
    Transform {
        /// fitted model directory
        #[arg(long)]
        model: PathBuf,
        /// input ETEN1 file
        #[arg(long)]
        input: PathBuf,
        /// output ETEN1 file
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct AugmentPreviewArgs {
    /// source PPM/PGM image
    #[arg(long)]
    image: PathBuf,
    /// output directory for the rendered views
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    n_views: usize,
    #[arg(long, default_value = "crop+distort")]
    transform_pair: String,
    #[arg(long, default_value_t = 16)]
    image_size: usize,
    #[arg(long, default_value_t = 1.0)]
    jitter_strength: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Apply the `EPISODICA_SEED` override, if set and parsable.
fn seed_override(seed: u64) -> Result<u64> {
    match std::env::var("EPISODICA_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("EPISODICA_SEED is not an integer: {v:?}"))),
        Err(_) => Ok(seed),
    }
}

fn print_resolved(pairs: &[(&str, String)]) {
    println!("# resolved configuration");
    for (k, v) in pairs {
        println!("{k} = {v}");
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::parse(&text)?;
    cfg.seed = seed_override(cfg.seed)?;
    cfg.augment.rng_seed = cfg.seed;
    Ok(cfg)
}

fn load_split_images(data: &Path, split: Split) -> Result<(Vec<crate::augment::Image>, Vec<usize>)> {
    let manifest = DatasetManifest::load(&data.join("manifest.txt"), data)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for entry in manifest.split(split) {
        images.push(load_ppm_pgm(&manifest.resolve(entry))?);
        labels.push(entry.class_id);
    }
    if images.is_empty() {
        return Err(Error::Data(format!("no {} images in {}", split.as_str(), data.display())));
    }
    Ok((images, labels))
}

fn write_label_csv(path: &Path, labels: &[usize]) -> Result<()> {
    let mut text = String::from("index,class_id\n");
    for (i, c) in labels.iter().enumerate() {
        text.push_str(&format!("{i},{c}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn read_label_csv(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "index,class_id")) => {}
        _ => {
            return Err(Error::Data(format!(
                "{}: expected header `index,class_id`",
                path.display()
            )))
        }
    }
    let mut labels = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (idx, class) = line.split_once(',').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected `index,class_id`", path.display(), lineno + 1))
        })?;
        let bad = |what: &str| {
            Error::Data(format!("{}:{}: {what}", path.display(), lineno + 1))
        };
        let idx: usize = idx.trim().parse().map_err(|_| bad("bad index"))?;
        if idx != labels.len() {
            return Err(bad("indices must be consecutive from 0"));
        }
        labels.push(class.trim().parse().map_err(|_| bad("bad class id"))?);
    }
    Ok(labels)
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut spec =
        SyntheticSpec::new(args.n_classes, args.per_class, args.image_size, args.seed);
    spec.noise = args.noise;
    spec.seed = seed_override(spec.seed)?;
    print_resolved(&[
        ("n_classes", spec.n_classes.to_string()),
        ("per_class", spec.per_class.to_string()),
        ("image_size", spec.image_size.to_string()),
        ("noise", spec.noise.to_string()),
        ("phase_jitter", spec.phase_jitter.to_string()),
        ("n_test_classes", spec.n_test_classes.to_string()),
        ("seed", spec.seed.to_string()),
    ]);
    let manifest = write_synthetic(&args.out, &spec)?;
    println!(
        "wrote {} images ({} train / {} test classes) to {}",
        manifest.entries().len(),
        spec.n_classes - spec.n_test_classes,
        spec.n_test_classes,
        args.out.display()
    );
    Ok(())
}

fn cmd_pretrain(args: &PretrainArgs) -> Result<()> {
    let cfg = load_run_config(args.config.as_deref())?;
    print!("# resolved configuration\n{}", cfg.serialize());
    let (images, _labels) = load_split_images(&args.data, Split::Train)?;
    println!("pretraining on {} images ({})", images.len(), cfg.variant.as_str());
    let outcome = pretrain(&cfg, &images, |epoch, loss| {
        println!("epoch {epoch:4}: mean loss {loss:.6}");
    })?;
    outcome.encoder.save(&args.out)?;
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn cmd_embed(args: &EmbedArgs) -> Result<()> {
    let cfg = load_run_config(args.config.as_deref())?;
    let split = Split::parse(&args.split)?;
    print_resolved(&[
        ("checkpoint", args.checkpoint.display().to_string()),
        ("split", split.as_str().into()),
        ("image_size", cfg.augment.image_size.to_string()),
    ]);
    let model = EncoderModel::load(&args.checkpoint)?;
    let (images, labels) = load_split_images(&args.data, split)?;
    let embeddings = embed_images(&model, &images, &cfg.augment)?;
    write_eten1(&args.out, &embeddings)?;
    write_label_csv(&args.labels, &labels)?;
    println!(
        "embedded {} images to {} ({} dims)",
        labels.len(),
        args.out.display(),
        embeddings.shape()[1]
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let seed = seed_override(args.seed)?;
    let classifier = Classifier::parse(&args.classifier)?;
    let spec = TaskSpec {
        n_way: args.n_way,
        k_shot: args.k_shot,
        n_query: args.n_query,
        n_tasks: args.n_tasks,
    };
    print_resolved(&[
        ("embeddings", args.embeddings.display().to_string()),
        ("classifier", classifier.as_str().into()),
        ("n_way", spec.n_way.to_string()),
        ("k_shot", spec.k_shot.to_string()),
        ("n_query", spec.n_query.to_string()),
        ("n_tasks", spec.n_tasks.to_string()),
        ("normalize", args.normalize.to_string()),
        ("seed", seed.to_string()),
    ]);
    let features = read_eten1(&args.embeddings)?;
    let labels = read_label_csv(&args.labels)?;
    let mut pool = FeaturePool::new(features, labels)?;
    if args.normalize {
        pool = pool.l2_normalized()?;
    }
    let mut report = run_protocol(&pool, &spec, classifier, seed)?;
    // mean and ci95 are the interesting outputs; per-task accuracies are
    // opt-in to keep reports small
    if !args.per_task {
        report.per_task_accuracy = None;
    }
    println!("accuracy: {}", report.summary());
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Data(format!("report serialization: {e}")))?;
    println!("{json}");
    if let Some(path) = &args.report {
        std::fs::write(path, &json)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_pca(cmd: &PcaCommand) -> Result<()> {
    match cmd {
        PcaCommand::Fit { embeddings, out_dim, model } => {
            print_resolved(&[
                ("embeddings", embeddings.display().to_string()),
                ("out_dim", out_dim.to_string()),
            ]);
            let x = read_eten1(embeddings)?;
            let fitted = pca_fit(&x, *out_dim)?;
            fitted.save(model)?;
            let explained: f32 = fitted.explained_variance.data().iter().sum();
            println!(
                "fitted {}->{} (total explained variance {explained:.4}), model in {}",
                fitted.in_dim(),
                fitted.out_dim(),
                model.display()
            );
        }
        PcaCommand::Transform { model, input, out } => {
            print_resolved(&[
                ("model", model.display().to_string()),
                ("input", input.display().to_string()),
            ]);
            let fitted = PcaModel::load(model)?;
            let x = read_eten1(input)?;
            let y = pca_transform(&fitted, &x)?;
            write_eten1(out, &y)?;
            println!("projected {:?} -> {:?} into {}", x.shape(), y.shape(), out.display());
        }
    }
    Ok(())
}

fn cmd_augment_preview(args: &AugmentPreviewArgs) -> Result<()> {
    let seed = seed_override(args.seed)?;
    let mut cfg = crate::augment::AugmentConfig::default();
    cfg.image_size = args.image_size;
    cfg.jitter_strength = args.jitter_strength;
    cfg.transform_pair = TransformPair::parse(&args.transform_pair)?;
    cfg.rng_seed = seed;
    print_resolved(&[
        ("image", args.image.display().to_string()),
        ("n_views", args.n_views.to_string()),
        ("transform_pair", cfg.transform_pair.as_str().into()),
        ("image_size", cfg.image_size.to_string()),
        ("jitter_strength", cfg.jitter_strength.to_string()),
        ("seed", seed.to_string()),
    ]);
    let img = load_ppm_pgm(&args.image)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::Data(format!("{}: {e}", args.out.display())))?;
    for view in 0..args.n_views {
        let augmented =
            augment_view(&img, &cfg, BatchPosition::default(), 0, view as u64)?;
        // undo normalization so the preview is a viewable image again
        let viewable = denormalize(&augmented, &cfg.image_mean, &cfg.image_std)?
            .map(|v| v.clamp(0.0, 1.0));
        let path = args.out.join(format!("view{view}.ppm"));
        save_ppm_pgm(&path, &viewable)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit code 0
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Embed(args) => cmd_embed(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Pca(cmd) => cmd_pca(cmd),
        Command::AugmentPreview(args) => cmd_augment_preview(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
