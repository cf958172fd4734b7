//! The pre-training loop: augment a minibatch into two views, encode,
//! apply the configured contrastive loss, and update parameters — plus
//! the momentum-encoder and queue bookkeeping for the moco variant.
//!
//! The projection head (when configured) is appended to the encoder for
//! the duration of pre-training and discarded afterwards: embeddings for
//! evaluation always come from the pre-projection encoder output.

use crate::augment::{bilinear_resize, make_pair, normalize, AugmentConfig, BatchPosition, Image, StreamKey};
use crate::config::{RunConfig, Variant};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::loss::{moco_loss, ntxent_simclr, KeyQueue, LossConfig, Similarity};
use crate::optim::{momentum_update, sgd_step, OptimState};
use crate::tensor::{Tape, Tensor};

/// Result of a pre-training run: the trained encoder (projection head
/// stripped) and the mean loss of every epoch.
pub struct PretrainOutcome {
    pub encoder: EncoderModel,
    pub per_epoch_loss: Vec<f64>,
}

/// Stack normalized CHW images into one `(n, c, h, w)` batch tensor.
fn stack(images: &[Image]) -> Result<Tensor> {
    let (c, h, w) = (images[0].channels(), images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels(), img.height(), img.width()) != (c, h, w) {
            return Err(Error::Shape("stack: images have mixed shapes".into()));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

fn l2_normalize_rows(t: &Tensor) -> Result<Tensor> {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = t.row(i);
        let norm: f64 = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric(format!("key row {i} has zero norm")));
        }
        data.extend(row.iter().map(|&x| (x as f64 / norm) as f32));
    }
    Tensor::new(vec![n, d], data)
}

/// Extract a parameter-congruent encoder-only model from a trained
/// encoder+projection model: the first `arch.len()` layers share their
/// names between both.
fn strip_projection(trained: &EncoderModel, cfg: &RunConfig) -> Result<EncoderModel> {
    let input = trained.input_shape();
    let mut encoder = EncoderModel::init(cfg.arch.clone(), input, cfg.seed)?;
    let names: Vec<String> = encoder.params().keys().cloned().collect();
    for name in names {
        let tensor = trained
            .param(&name)
            .ok_or_else(|| Error::Shape(format!("trained model missing {name}")))?;
        encoder.set_param(&name, tensor.clone())?;
    }
    Ok(encoder)
}

/// Run the full pre-training loop over unlabeled training images.
/// `on_epoch(epoch, mean_loss)` fires after each epoch for logging.
pub fn pretrain(
    cfg: &RunConfig,
    images: &[Image],
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Data("pretrain: no training images".into()));
    }
    let s = cfg.augment.image_size;
    let input_shape = (3, s, s);
    let mut train_arch = cfg.arch.clone();
    train_arch.extend(cfg.projection.iter().cloned());
    let mut model = EncoderModel::init(train_arch, input_shape, cfg.seed)?;
    let mut opt = OptimState::new(cfg.sgd, &model);
    let mut key_model = model.clone();
    let mut queue = KeyQueue::new(cfg.queue_capacity, model.embed_dim())?;

    let mut per_epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        // deterministic per-epoch shuffle on its own stream
        let mut order: Vec<usize> = (0..images.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = StreamKey {
                seed: cfg.seed,
                epoch: epoch as u64,
                batch: u64::MAX,
                image: u64::MAX,
                transform: 0,
            }
            .rng();
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0f64;
        let mut n_batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // a single-image batch has no in-batch negative structure
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<Image> = chunk.iter().map(|&i| images[i].clone()).collect();
            let pos = BatchPosition { epoch: epoch as u64, batch: batch_idx as u64 };
            let (query_views, key_views) = make_pair(&batch, &cfg.augment, pos)?;
            let mut step = || -> Result<f64> {
                let loss_value = match cfg.variant {
                    Variant::Simclr => {
                        simclr_step(&mut model, &mut opt, &cfg.loss, &query_views, &key_views)?
                    }
                    Variant::Moco => {
                        let v = moco_step(
                            &mut model,
                            &mut opt,
                            &mut queue,
                            &key_model,
                            &cfg.loss,
                            &query_views,
                            &key_views,
                        )?;
                        momentum_update(&mut key_model, &model, cfg.key_momentum)?;
                        v
                    }
                };
                if !loss_value.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss {loss_value}")));
                }
                Ok(loss_value)
            };
            let loss_value = step().map_err(|e| {
                Error::Data(format!("epoch {epoch}, batch {batch_idx}: {e}"))
            })?;
            epoch_loss += loss_value;
            n_batches += 1;
        }
        if n_batches == 0 {
            return Err(Error::Data("pretrain: batch size exceeds the dataset".into()));
        }
        let mean = epoch_loss / n_batches as f64;
        per_epoch_loss.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(PretrainOutcome { encoder: strip_projection(&model, cfg)?, per_epoch_loss })
}

/// One in-batch NT-Xent step: both views share the encoder; the batch is
/// laid out `[view-A rows; view-B rows]` so row i's partner is row i+N.
fn simclr_step(
    model: &mut EncoderModel,
    opt: &mut OptimState,
    loss_cfg: &LossConfig,
    query_views: &[Image],
    key_views: &[Image],
) -> Result<f64> {
    let mut all = query_views.to_vec();
    all.extend(key_views.iter().cloned());
    let batch = stack(&all)?;
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let input = tape.leaf(batch);
    let reps = model.forward_on(&tape, &bound, input)?;
    let loss = ntxent_simclr(&tape, reps, loss_cfg)?;
    let value = tape.value(loss).item() as f64;
    let grads = tape.backward(loss)?;
    let grad_map = bound.iter().map(|(k, &v)| (k.clone(), grads.wrt(v))).collect();
    sgd_step(model, &grad_map, opt)?;
    Ok(value)
}

/// One dictionary-lookup step: queries flow through the gradient encoder,
/// keys through the frozen momentum encoder; the queue supplies the
/// negatives. The first step seeds the empty queue with its own keys;
/// afterwards keys are enqueued after the loss so they only ever serve as
/// negatives for later batches.
fn moco_step(
    model: &mut EncoderModel,
    opt: &mut OptimState,
    queue: &mut KeyQueue,
    key_model: &EncoderModel,
    loss_cfg: &LossConfig,
    query_views: &[Image],
    key_views: &[Image],
) -> Result<f64> {
    if loss_cfg.similarity != Similarity::Dot {
        return Err(Error::Config("moco variant requires dot similarity".into()));
    }
    let keys = l2_normalize_rows(&key_model.forward(&stack(key_views)?)?)?;
    let warm_start = queue.is_empty();
    if warm_start {
        queue.push(&keys)?;
    }
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let input = tape.leaf(stack(query_views)?);
    let reps = model.forward_on(&tape, &bound, input)?;
    let q = tape.l2_normalize(reps)?;
    let loss = moco_loss(&tape, q, &keys, queue, loss_cfg)?;
    let value = tape.value(loss).item() as f64;
    let grads = tape.backward(loss)?;
    let grad_map = bound.iter().map(|(k, &v)| (k.clone(), grads.wrt(v))).collect();
    sgd_step(model, &grad_map, opt)?;
    if !warm_start {
        queue.push(&keys)?;
    }
    Ok(value)
}

/// Deterministically embed images for evaluation: resize to the
/// configured size if needed, normalize, and run the encoder. No
/// stochastic augmentation is applied.
pub fn embed_images(
    model: &EncoderModel,
    images: &[Image],
    aug: &AugmentConfig,
) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Data("embed: no images".into()));
    }
    let s = aug.image_size;
    let mut prepared = Vec::with_capacity(images.len());
    for img in images {
        let rgb = img.to_rgb();
        let sized = if (rgb.height(), rgb.width()) != (s, s) {
            bilinear_resize(&rgb, s, s)
        } else {
            rgb
        };
        prepared.push(normalize(&sized, &aug.image_mean, &aug.image_std)?);
    }
    model.forward(&stack(&prepared)?)
}
