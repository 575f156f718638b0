//! Optimization loop, validation and the training driver.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::eval::{aggregate, CerReport, EvalError};
use crate::exec::Execution;
use crate::imaging::{self, augment, derive_seed, AugmentPolicy, GrayImage, ImagingError, Preprocess, Sample};
use crate::model::{DecodeBlock, DecodeMode, Dropout, ModelError, Recognizer, RecognizerConfig};
use crate::plm::{plm_loss, sample_permutations, Permutation};
use crate::shaping::{GlyphVocabulary, ShapingError, EOS};
use crate::tensor::{Gradients, Graph, ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Shaping(#[from] ShapingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sample {id:?}: label has {len} glyphs, limit is {max}")]
    LabelTooLong { id: String, len: usize, max: usize },
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("non-finite loss or gradient at step {step}; batch: {}", batch_ids.join(", "))]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },
    #[error("checkpoint does not match the run: {0}")]
    CheckpointMismatch(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

const TAG_ORDER: u64 = 1;
const TAG_SAMPLE: u64 = 2;
const TAG_DROPOUT: u64 = 3;
const TAG_VAL: u64 = 4;

/// Independent random stream for a tuple of tags.
pub fn stream_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(derive_seed(seed, 0x5EED), |acc, &t| derive_seed(acc, t))
}

/// Preprocess and resize to the model's input geometry.
pub fn prepare_image(
    img: &GrayImage,
    config: &RecognizerConfig,
    preprocess: &Preprocess,
) -> Result<GrayImage, ImagingError> {
    let img = preprocess.apply(img)?;
    let fill = imaging::background_level(&img);
    Ok(imaging::resize(&img, config.image_width, config.image_height, fill))
}

/// Images at model geometry with their encoded targets (glyph ids + EOS).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    pub images: Vec<GrayImage>,
    pub targets: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn prepare(
        samples: Vec<Sample>,
        vocab: &GlyphVocabulary,
        config: &RecognizerConfig,
        preprocess: &Preprocess,
    ) -> Result<Self, TrainError> {
        let mut out = Dataset {
            ids: Vec::with_capacity(samples.len()),
            labels: Vec::with_capacity(samples.len()),
            images: Vec::with_capacity(samples.len()),
            targets: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            let mut ids = vocab.encode(&s.label)?;
            if ids.len() > config.max_label_len {
                return Err(TrainError::LabelTooLong {
                    id: s.id,
                    len: ids.len(),
                    max: config.max_label_len,
                });
            }
            ids.push(EOS);
            let img = prepare_image(&s.image, config, preprocess)?;
            out.ids.push(s.id);
            out.labels.push(s.label);
            out.images.push(img);
            out.targets.push(ids);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Hyperparameters of the optimizer and batching.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub grad_chunk: usize,
    pub augment: Option<AugmentPolicy>,
}

impl From<&RunConfig> for TrainOptions {
    fn from(c: &RunConfig) -> Self {
        Self {
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            momentum: c.momentum,
            clip_norm: c.clip_norm,
            grad_chunk: c.grad_chunk,
            augment: c.augment.clone(),
        }
    }
}

pub struct TrainState {
    pub step: usize,
    pub model: Recognizer,
    pub momentum: Vec<Vec<f64>>,
    pub seed: u64,
    pub best_cer: Option<f64>,
    pub loss_sum: f64,
    pub loss_steps: usize,
}

impl TrainState {
    pub fn new(config: RecognizerConfig, seed: u64) -> Result<Self, TrainError> {
        let model = Recognizer::new(config, seed)?;
        let momentum = model.params().iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Ok(Self {
            step: 0,
            model,
            momentum,
            seed,
            best_cer: None,
            loss_sum: 0.0,
            loss_steps: 0,
        })
    }

    pub fn to_checkpoint(&self, vocab: &GlyphVocabulary) -> Checkpoint {
        let mut momentum = ParamStore::new();
        for ((_, name, t), m) in self.model.params().iter().zip(&self.momentum) {
            let slot = Tensor::new(t.dims().to_vec(), m.clone()).expect("momentum matches parameter");
            momentum.insert(name, slot).expect("parameter names are unique");
        }
        Checkpoint {
            config: self.model.config().clone(),
            vocab: vocab.clone(),
            step: self.step,
            seed: self.seed,
            best_cer: self.best_cer,
            loss_sum: self.loss_sum,
            loss_steps: self.loss_steps,
            params: self.model.params().clone(),
            momentum: Some(momentum),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<(Self, GlyphVocabulary), TrainError> {
        let model = Recognizer::from_params(ck.config, ck.params)?;
        let momentum = match ck.momentum {
            Some(m) => model
                .params()
                .iter()
                .map(|(_, name, _)| {
                    let id = m.id(name).expect("checked when decoding");
                    m.get(id).data().to_vec()
                })
                .collect(),
            None => model.params().iter().map(|(_, _, t)| vec![0.0; t.len()]).collect(),
        };
        Ok((
            Self {
                step: ck.step,
                model,
                momentum,
                seed: ck.seed,
                best_cer: ck.best_cer,
                loss_sum: ck.loss_sum,
                loss_steps: ck.loss_steps,
            },
            ck.vocab,
        ))
    }
}

/// Dataset indices for `step`: consecutive slices of per-epoch shuffles.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch_size: usize) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch_size)
        .map(|j| {
            let p = step * batch_size + j;
            let epoch = p / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, &[TAG_ORDER, epoch as u64])));
                cached = Some((epoch, order));
            }
            cached.as_ref().expect("just filled").1[p % n]
        })
        .collect()
}

/// One training example with everything random already drawn.
pub struct PreparedSample {
    pub image: GrayImage,
    pub targets: Vec<usize>,
    pub perms: Vec<Permutation>,
}

/// Augment and sample permutations for every batch slot.
pub fn prepare_batch(
    state: &TrainState,
    data: &Dataset,
    opts: &TrainOptions,
    indices: &[usize],
) -> Vec<PreparedSample> {
    let c = state.model.config();
    indices
        .iter()
        .enumerate()
        .map(|(j, &idx)| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                state.seed,
                &[TAG_SAMPLE, state.step as u64, j as u64],
            ));
            let targets = data.targets[idx].clone();
            let perms = sample_permutations(targets.len(), c.permutations, &mut rng);
            let image = match &opts.augment {
                Some(policy) => augment(&data.images[idx], &mut rng, policy, c.image_width, c.image_height),
                None => data.images[idx].clone(),
            };
            PreparedSample { image, targets, perms }
        })
        .collect()
}

/// Summed loss gradient of a group of samples, each weighted by `weight`.
pub fn chunk_gradients(
    model: &Recognizer,
    samples: &[PreparedSample],
    weight: f64,
    drop: &mut Dropout,
) -> Result<(Gradients, f64), ModelError> {
    let mut g = Graph::with_params(model.params());
    let images: Vec<&GrayImage> = samples.iter().map(|s| &s.image).collect();
    let memory = model.encode_images(&mut g, &images, drop)?;
    let mut blocks = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for p in &s.perms {
            blocks.push(DecodeBlock::for_permutation(i, &s.targets, p));
        }
    }
    let logits = model.decode_blocks(&mut g, &memory, &blocks, drop)?;
    let mut losses = Vec::with_capacity(samples.len());
    let mut row = 0;
    for s in samples {
        let t = s.targets.len();
        let sets = (0..s.perms.len())
            .map(|k| g.slice_rows(logits, row + k * t, t))
            .collect::<Result<Vec<_>, _>>()?;
        row += s.perms.len() * t;
        losses.push(plm_loss(&mut g, &sets, &s.targets)?);
    }
    let mean = g.mean(&losses)?;
    let total = g.scale(mean, weight * losses.len() as f64);
    let loss = g.value(total).item();
    let mut grads = Gradients::for_store(model.params());
    g.backward(total).accumulate_into(&mut grads);
    Ok((grads, loss))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Mean batch loss and its gradient, computed chunk by chunk and summed in
/// a fixed order.
pub fn batch_gradients(
    state: &TrainState,
    batch: &[PreparedSample],
    opts: &TrainOptions,
    exec: Execution,
) -> Result<(Gradients, f64), ModelError> {
    let weight = 1.0 / batch.len() as f64;
    let chunks: Vec<(usize, &[PreparedSample])> = batch.chunks(opts.grad_chunk.max(1)).enumerate().collect();
    let p = state.model.config().dropout;
    let results = exec.map(&chunks, |&(ci, chunk)| {
        let mut drop = Dropout::new(
            p,
            stream_seed(state.seed, &[TAG_DROPOUT, state.step as u64, ci as u64]),
        );
        chunk_gradients(&state.model, chunk, weight, &mut drop)
    });
    let mut grads = Gradients::for_store(state.model.params());
    let mut loss = 0.0;
    for r in results {
        let (g, l) = r?;
        grads.merge(&g);
        loss += l;
    }
    Ok((grads, loss))
}

/// Clip to `max_norm` and apply SGD with momentum.
pub fn apply_update(state: &mut TrainState, grads: &mut Gradients, opts: &TrainOptions) -> (f64, bool) {
    let norm = grads.global_norm();
    let clipped = norm > opts.clip_norm;
    if clipped {
        grads.scale(opts.clip_norm / norm);
    }
    let ids: Vec<_> = state.model.params().iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let v = &mut state.momentum[id.0];
        match grads.get(id) {
            Some(g) => {
                for (vi, gi) in v.iter_mut().zip(g) {
                    *vi = opts.momentum * *vi + gi;
                }
            }
            None => v.iter_mut().for_each(|vi| *vi *= opts.momentum),
        }
        let p = state.model.params_mut().get_mut(id).data_mut();
        for (pi, vi) in p.iter_mut().zip(v.iter()) {
            *pi -= opts.learning_rate * vi;
        }
    }
    (norm, clipped)
}

/// One optimizer step on the batch chosen for `state.step`.
pub fn train_step(
    state: &mut TrainState,
    data: &Dataset,
    opts: &TrainOptions,
    exec: Execution,
) -> Result<StepStats, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    let indices = batch_indices(state.seed, state.step, data.len(), opts.batch_size);
    let batch = prepare_batch(state, data, opts, &indices);
    let (mut grads, loss) = batch_gradients(state, &batch, opts, exec)?;
    let norm = grads.global_norm();
    if !loss.is_finite() || !norm.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step: state.step,
            batch_ids: indices.iter().map(|&i| data.ids[i].clone()).collect(),
        });
    }
    let (grad_norm, clipped) = apply_update(state, &mut grads, opts);
    state.step += 1;
    state.loss_sum += loss;
    state.loss_steps += 1;
    Ok(StepStats {
        loss,
        grad_norm,
        clipped,
    })
}

/// Mean PLM loss with dropout off and fixed per-sample permutations.
pub fn validation_loss(model: &Recognizer, seed: u64, data: &Dataset, exec: Execution) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let k = model.config().permutations;
    let losses = exec.map(&idx, |&i| -> Result<f64, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &[TAG_VAL, i as u64]));
        let s = PreparedSample {
            image: data.images[i].clone(),
            targets: data.targets[i].clone(),
            perms: sample_permutations(data.targets[i].len(), k, &mut rng),
        };
        let mut g = Graph::with_params(model.params());
        let mut drop = Dropout::disabled();
        let memory = model.encode_images(&mut g, &[&s.image], &mut drop)?;
        let sets = model.decode_train(&mut g, &memory, 0, &s.targets, &s.perms, &mut drop)?;
        let loss = plm_loss(&mut g, &sets, &s.targets)?;
        Ok(g.value(loss).item())
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / data.len() as f64)
}

/// Decode every image and score against its label.
pub fn evaluate(
    model: &Recognizer,
    vocab: &GlyphVocabulary,
    data: &Dataset,
    mode: DecodeMode,
    exec: Execution,
) -> Result<CerReport, TrainError> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let preds = exec.map(&idx, |&i| -> Result<String, TrainError> {
        let ids = model.recognize(&data.images[i], mode)?;
        Ok(vocab.decode(&ids)?)
    });
    let mut triples = Vec::with_capacity(preds.len());
    for (i, p) in preds.into_iter().enumerate() {
        triples.push((data.ids[i].clone(), data.labels[i].clone(), p?));
    }
    Ok(aggregate(triples)?)
}

/// Result of one validation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub report: CerReport,
}

impl Validation {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.train_loss, self.val_loss, self.report.cer
        )
    }
}

pub const LAST_CHECKPOINT: &str = "last.ck";
pub const BEST_CHECKPOINT: &str = "best.ck";

/// Datasets and vocabulary for a run.
pub struct RunData {
    pub vocab: GlyphVocabulary,
    pub train: Dataset,
    pub val: Dataset,
}

/// Load the vocabulary (or build it from training labels) and both datasets.
pub fn load_run_data(cfg: &RunConfig) -> Result<RunData, TrainError> {
    let train_path = cfg
        .train_manifest
        .as_ref()
        .ok_or(ConfigError::Missing("train_manifest"))?;
    let val_path = cfg.val_manifest.as_ref().ok_or(ConfigError::Missing("val_manifest"))?;
    let train = imaging::load_manifest(train_path)?;
    let val = imaging::load_manifest(val_path)?;
    let vocab = match &cfg.vocab {
        Some(p) => {
            let f = fs::File::open(p).map_err(io_err(p))?;
            GlyphVocabulary::read_from(std::io::BufReader::new(f))?
        }
        None => GlyphVocabulary::build(train.iter().map(|s| s.label.as_str()))?,
    };
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.len();
    Ok(RunData {
        train: Dataset::prepare(train, &vocab, &model_cfg, &cfg.preprocess)?,
        val: Dataset::prepare(val, &vocab, &model_cfg, &cfg.preprocess)?,
        vocab,
    })
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub validations: Vec<Validation>,
}

/// Train to `cfg.max_steps`, validating every `val_interval` steps and at
/// the end. Writes the metrics log and `last.ck` / `best.ck`.
pub fn run_training(
    cfg: &RunConfig,
    data: &RunData,
    resume: Option<Checkpoint>,
    exec: Execution,
    mut progress: impl FnMut(&Validation),
) -> Result<TrainOutcome, TrainError> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = data.vocab.len();
    let mut state = match resume {
        Some(ck) => {
            let (state, vocab) = TrainState::from_checkpoint(ck)?;
            if vocab != data.vocab {
                return Err(TrainError::CheckpointMismatch("vocabulary differs".into()));
            }
            if *state.model.config() != model_cfg {
                return Err(TrainError::CheckpointMismatch("model configuration differs".into()));
            }
            state
        }
        None => {
            if cfg.metrics_log.exists() {
                fs::remove_file(&cfg.metrics_log).map_err(io_err(&cfg.metrics_log))?;
            }
            TrainState::new(model_cfg, cfg.seed)?
        }
    };
    fs::create_dir_all(&cfg.checkpoint_dir).map_err(io_err(&cfg.checkpoint_dir))?;
    if let Some(dir) = cfg.metrics_log.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let last_path = cfg.checkpoint_dir.join(LAST_CHECKPOINT);
    let best_path = cfg.checkpoint_dir.join(BEST_CHECKPOINT);
    let opts = TrainOptions::from(cfg);
    let mut validations = Vec::new();

    if state.step >= cfg.max_steps {
        state.to_checkpoint(&data.vocab).save(&last_path)?;
        return Ok(TrainOutcome { state, validations });
    }
    while state.step < cfg.max_steps {
        train_step(&mut state, &data.train, &opts, exec)?;
        if state.step % cfg.val_interval == 0 || state.step == cfg.max_steps {
            let v = Validation {
                step: state.step,
                train_loss: state.loss_sum / state.loss_steps.max(1) as f64,
                val_loss: validation_loss(&state.model, state.seed, &data.val, exec)?,
                report: evaluate(&state.model, &data.vocab, &data.val, cfg.decode_mode, exec)?,
            };
            let mut log = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&cfg.metrics_log)
                .map_err(io_err(&cfg.metrics_log))?;
            writeln!(log, "{}", v.log_line()).map_err(io_err(&cfg.metrics_log))?;
            log.flush().map_err(io_err(&cfg.metrics_log))?;
            state.loss_sum = 0.0;
            state.loss_steps = 0;
            let improved = state.best_cer.is_none_or(|b| v.report.cer < b);
            if improved {
                state.best_cer = Some(v.report.cer);
            }
            let ck = state.to_checkpoint(&data.vocab);
            if improved {
                ck.save(&best_path)?;
            }
            ck.save(&last_path)?;
            progress(&v);
            validations.push(v);
        }
    }
    Ok(TrainOutcome { state, validations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch() {
        let n = 10;
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(3, s, n, 2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, 7, n, 4), batch_indices(3, 7, n, 4));
        assert_ne!(batch_indices(3, 0, n, 10), batch_indices(4, 0, n, 10));
    }

    #[test]
    fn stream_seeds_differ() {
        assert_ne!(stream_seed(1, &[2, 3]), stream_seed(1, &[3, 2]));
        assert_ne!(stream_seed(1, &[2]), stream_seed(2, &[2]));
    }
}
