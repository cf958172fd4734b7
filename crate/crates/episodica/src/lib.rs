//! episodica: label-free few-shot learning at desk scale.
//!
//! The crate pre-trains small image encoders with contrastive
//! self-supervision (an in-batch NT-Xent variant and a momentum-encoder
//! queue variant) and evaluates them on N-way K-shot episodes using
//! similarity-only classifiers that never see labels.
//!
//! The guide in `book/` walks through each subsystem; the snippets there
//! are kept in sync with the doc-tests in this crate.
//!
//! # Quickstart
//!
//! Pre-train a tiny encoder on synthetic gratings, embed the held-out
//! novel classes, and evaluate 2-way 1-shot episodes:
//!
//! ```
//! use episodica::config::RunConfig;
//! use episodica::data::synth::{generate_synthetic, SyntheticSpec};
//! use episodica::data::Split;
//! use episodica::encoder::parse_arch;
//! use episodica::eval::{run_protocol, Classifier, FeaturePool, TaskSpec};
//! use episodica::train::{embed_images, pretrain};
//!
//! let mut cfg = RunConfig::default();
//! cfg.epochs = 2;
//! cfg.batch_size = 8;
//! cfg.augment.image_size = 8;
//! cfg.arch = parse_arch("conv3x3 3 4 2; relu; global_avg_pool; dense 4 8")?;
//! cfg.projection = parse_arch("dense 8 8")?;
//!
//! // 6 grating classes: 4 base (pre-training), 2 novel (evaluation)
//! let spec = SyntheticSpec::new(6, 8, 8, 1);
//! let labeled = generate_synthetic(&spec)?;
//! let train: Vec<_> = labeled
//!     .iter()
//!     .filter(|(_, c)| spec.split_of(*c) == Split::Train)
//!     .map(|(im, _)| im.clone())
//!     .collect();
//! let outcome = pretrain(&cfg, &train, |_epoch, _loss| {})?;
//!
//! let novel: Vec<_> =
//!     labeled.iter().filter(|(_, c)| spec.split_of(*c) == Split::Test).collect();
//! let images: Vec<_> = novel.iter().map(|(im, _)| im.clone()).collect();
//! let labels: Vec<usize> = novel.iter().map(|(_, c)| *c).collect();
//! let features = embed_images(&outcome.encoder, &images, &cfg.augment)?;
//! let pool = FeaturePool::new(features, labels)?;
//!
//! let task = TaskSpec { n_way: 2, k_shot: 1, n_query: 4, n_tasks: 20 };
//! let report = run_protocol(&pool, &task, Classifier::Attn, 0)?;
//! assert!(report.mean >= 0.0 && report.mean <= 1.0);
//! # Ok::<(), episodica::Error>(())
//! ```

pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod loss;
pub mod optim;
pub mod pca;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
