//! Cross-entropy training, self-critical sequence training and
//! checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig, XeTargets};
use crate::data::Sample;
use crate::decoder::{greedy_decode, DecodeOptions, StepScorer};
use crate::error::{GevstError, Result};
use crate::metrics::CiderD;
use crate::model::{Gevst, PreparedSample};
use crate::params::{Graph, ParamGrads, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::{Vocabulary, EOS, PAD};

/// Mean of `-log softmax(logits)[target]` over non-PAD targets, where row
/// `t` of `logits` predicts `targets[t]`.
pub fn xe_loss<'t>(logits: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(GevstError::Dimension(format!(
            "{} targets for logits of shape {s:?}",
            targets.len()
        )));
    }
    let count = targets.iter().filter(|&&t| t != PAD).count();
    if count == 0 {
        return Err(GevstError::Contract("every target is padding".into()));
    }
    let picked = logits.log_softmax().pick(targets)?;
    let picked = if count < targets.len() {
        let mask: Vec<f64> = targets
            .iter()
            .map(|&t| if t == PAD { 0.0 } else { 1.0 })
            .collect();
        picked.mul(logits.tape().constant(Tensor::vector(mask)))?
    } else {
        picked
    };
    Ok(picked.sum().scale(-1.0 / count as f64))
}

/// `scale · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`
pub fn noam_lr(step: usize, d_model: usize, warmup_steps: usize, scale: f64) -> Result<f64> {
    if warmup_steps == 0 {
        return Err(GevstError::Config("warmup_steps must be positive".into()));
    }
    if step == 0 {
        return Err(GevstError::Config(
            "optimizer steps are counted from 1".into(),
        ));
    }
    let (s, w) = (step as f64, warmup_steps as f64);
    Ok(scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .ids()
            .map(|id| vec![0.0; store.get(id).len()])
            .collect();
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Parameters without a gradient are left alone.
    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` to global norm `max_norm` when above it; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        log::debug!("clipping gradient norm {norm:.4} to {max_norm}");
        grads.scale(max_norm / norm);
    }
    norm
}

/// Vocabulary over the reference and dense-caption text of `samples`.
pub fn corpus_vocabulary(samples: &[Sample], min_count: usize) -> Vocabulary {
    let text = samples.iter().flat_map(|s| {
        s.gt_captions
            .iter()
            .map(String::as_str)
            .chain(s.dense_captions.iter().map(|d| d.text.as_str()))
    });
    Vocabulary::build(text, min_count)
}

/// Number of validation samples for a split of `n`.
pub fn validation_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1))
}

/// The last `fraction` of samples by index is held out.
pub fn split_train_val<T: Clone>(items: &[T], fraction: f64) -> (Vec<T>, Vec<T>) {
    let n_val = validation_count(items.len(), fraction);
    let cut = items.len() - n_val;
    (items[..cut].to_vec(), items[cut..].to_vec())
}

/// Loss, accuracy and gradients of one teacher-forced caption.
pub struct XeStep {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
    pub grads: Option<ParamGrads>,
}

pub fn xe_step(
    model: &Gevst,
    store: &ParamStore,
    s: &PreparedSample,
    target: &[usize],
    backward: bool,
) -> Result<XeStep> {
    let tape = Tape::new();
    let g = if backward {
        Graph::new(&tape, store)
    } else {
        Graph::frozen(&tape, store)
    };
    let input = &target[..target.len() - 1];
    let gold = &target[1..];
    let logits = model.logits(&g, s, input)?;
    let loss = xe_loss(logits, gold)?;
    let lv = logits.value();
    let v = lv.last_dim();
    let mut correct = 0;
    let mut total = 0;
    for (t, &y) in gold.iter().enumerate() {
        if y == PAD {
            continue;
        }
        total += 1;
        if crate::decoder::argmax(&lv.data()[t * v..(t + 1) * v]) == y {
            correct += 1;
        }
    }
    let loss_value = loss.value().item();
    let grads = if backward {
        Some(g.param_grads(&tape.backward(loss)?))
    } else {
        None
    };
    Ok(XeStep {
        loss: loss_value,
        correct,
        total,
        grads,
    })
}

/// `(sample index, caption index)` pairs used as XE examples.
pub fn xe_examples(samples: &[PreparedSample], targets: XeTargets) -> Vec<(usize, usize)> {
    samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            let n = match targets {
                XeTargets::Primary => 1,
                XeTargets::All => s.targets.len(),
            };
            (0..n).map(move |j| (i, j))
        })
        .collect()
}

/// Mean teacher-forced loss and token accuracy.
pub fn teacher_forcing_stats(
    model: &Gevst,
    store: &ParamStore,
    samples: &[PreparedSample],
    targets: XeTargets,
) -> Result<(f64, f64)> {
    let examples = xe_examples(samples, targets);
    let (mut loss, mut correct, mut total) = (0.0, 0, 0);
    for &(i, j) in &examples {
        let st = xe_step(model, store, &samples[i], &samples[i].targets[j], false)?;
        loss += st.loss;
        correct += st.correct;
        total += st.total;
    }
    Ok((loss / examples.len() as f64, correct as f64 / total as f64))
}

pub fn greedy_caption(model: &Gevst, store: &ParamStore, s: &PreparedSample) -> Result<Vec<usize>> {
    let enc = model.encode_frozen(store, s)?;
    let state = greedy_decode(&model.scorer(store, &enc), model.decode_options())?;
    Ok(state.words(EOS).to_vec())
}

/// Corpus CIDEr-D of greedy captions, document frequencies from the
/// samples' own references.
pub fn greedy_cider(model: &Gevst, store: &ParamStore, samples: &[PreparedSample]) -> Result<f64> {
    let refs: Vec<Vec<Vec<usize>>> = samples.iter().map(|s| s.references.clone()).collect();
    let cands = samples
        .iter()
        .map(|s| greedy_caption(model, store, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(CiderD::new(&refs).corpus(&cands, &refs).0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub val_cider: Option<f64>,
}

pub struct XeOutcome {
    pub epochs: Vec<EpochStats>,
    /// Epoch (from 1) whose parameters are in `best`.
    pub best_epoch: usize,
    pub best: ParamStore,
}

fn check_finite(loss: f64, what: impl FnOnce() -> String) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(GevstError::Divergence(format!(
            "non-finite loss {loss} at {}",
            what()
        )))
    }
}

/// Teacher-forced training with the warmup schedule. Keeps the parameters
/// of the epoch with the best validation CIDEr-D (greedy decoding), or of
/// the last epoch without a validation set.
pub fn train_xe(
    model: &Gevst,
    store: &mut ParamStore,
    train: &[PreparedSample],
    val: &[PreparedSample],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<XeOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(GevstError::Input("empty training set".into()));
    }
    let examples = xe_examples(train, cfg.xe_targets);
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let mut adam = Adam::new(store, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0;
    for epoch in 1..=cfg.xe_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order = examples.clone();
        shuffle(&mut order, &mut rng);
        let (mut loss_sum, mut correct, mut total) = (0.0, 0, 0);
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = ParamGrads::zeros_like(store);
            for &(i, j) in batch {
                let st = xe_step(model, store, &train[i], &train[i].targets[j], true)?;
                check_finite(st.loss, || format!("epoch {epoch}, sample {}", train[i].id))?;
                loss_sum += st.loss;
                correct += st.correct;
                total += st.total;
                acc.accumulate(st.grads.as_ref().expect("backward requested"));
            }
            acc.scale(1.0 / batch.len() as f64);
            if !acc.is_finite() {
                return Err(GevstError::Divergence(format!(
                    "non-finite gradient in epoch {epoch}"
                )));
            }
            clip_grad_norm(&mut acc, cfg.clip_norm);
            step += 1;
            lr = noam_lr(step, model.config.d_model, warmup, cfg.lr_scale)?;
            adam.update(store, &acc, lr);
        }
        let val_cider = if val.is_empty() {
            None
        } else {
            Some(greedy_cider(model, store, val)?)
        };
        let stats = EpochStats {
            epoch,
            loss: loss_sum / order.len() as f64,
            accuracy: correct as f64 / total as f64,
            lr,
            val_cider,
        };
        log::info!(
            "xe epoch {epoch}: loss {:.5} acc {:.4} lr {lr:.3e} val CIDEr-D {}",
            stats.loss,
            stats.accuracy,
            val_cider.map_or("-".into(), |c| format!("{c:.4}"))
        );
        on_epoch(&stats);
        let score = val_cider.unwrap_or(f64::NEG_INFINITY);
        if val.is_empty() || best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, store.clone()));
        }
        let stop = cfg.early_stop_loss.is_some_and(|t| stats.loss < t);
        epochs.push(stats);
        if stop {
            log::info!(
                "loss below {:?}, stopping after epoch {epoch}",
                cfg.early_stop_loss
            );
            break;
        }
    }
    let (_, best_epoch, best) = best.unwrap_or((0.0, 0, store.clone()));
    Ok(XeOutcome {
        epochs,
        best_epoch,
        best,
    })
}

/// Fisher-Yates with the given stream.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// A sequence policy as SCST sees it.
pub trait Policy {
    type Item;
    fn sample(
        &self,
        store: &ParamStore,
        item: &Self::Item,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>>;
    fn greedy(&self, store: &ParamStore, item: &Self::Item) -> Result<Vec<usize>>;
    /// `Σ log p(tokens[t] | tokens[..t])` over generated positions.
    fn log_prob<'t>(&self, g: &Graph<'t>, item: &Self::Item, tokens: &[usize]) -> Result<Var<'t>>;
}

/// Draws an index from a log-probability vector.
pub fn sample_index(log_probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

/// Multinomial decoding with the same stopping rule as greedy decoding.
pub fn sample_decode(
    scorer: &dyn StepScorer,
    opts: DecodeOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut tokens = vec![opts.bos];
    while tokens.len() - 1 < opts.max_len {
        let tok = sample_index(&scorer.log_probs(&tokens)?, rng);
        tokens.push(tok);
        if tok == opts.eos {
            break;
        }
    }
    Ok(tokens)
}

/// Outcome of one SCST update.
#[derive(Clone, Debug, PartialEq)]
pub struct ScstStats {
    pub sample_reward: f64,
    pub greedy_reward: f64,
    pub grad_norm: f64,
}

/// Loss `-(r(w_s) - r(ŵ))·log p(w_s)` averaged over the batch and the
/// `samples` draws per item. Draws equal to the greedy caption have zero
/// advantage and contribute nothing.
#[allow(clippy::too_many_arguments)]
pub fn scst_step<P: Policy>(
    policy: &P,
    store: &mut ParamStore,
    items: &[&P::Item],
    reward: &dyn Fn(&P::Item, &[usize]) -> f64,
    adam: &mut Adam,
    lr: f64,
    clip_norm: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ScstStats> {
    let mut acc = ParamGrads::zeros_like(store);
    let (mut rs, mut rg) = (0.0, 0.0);
    let scale = 1.0 / (items.len() * samples) as f64;
    for item in items {
        let greedy = policy.greedy(store, item)?;
        let base = reward(item, &greedy);
        rg += base;
        for _ in 0..samples {
            let drawn = policy.sample(store, item, rng)?;
            let r = reward(item, &drawn);
            rs += r;
            let advantage = r - base;
            if advantage == 0.0 {
                continue;
            }
            let tape = Tape::new();
            let g = Graph::new(&tape, store);
            let loss = policy.log_prob(&g, item, &drawn)?.scale(-advantage * scale);
            acc.accumulate(&g.param_grads(&tape.backward(loss)?));
        }
    }
    if !acc.is_finite() {
        return Err(GevstError::Divergence("non-finite SCST gradient".into()));
    }
    let grad_norm = clip_grad_norm(&mut acc, clip_norm);
    adam.update(store, &acc, lr);
    Ok(ScstStats {
        sample_reward: rs / (items.len() * samples) as f64,
        greedy_reward: rg / items.len() as f64,
        grad_norm,
    })
}

/// The captioner as an SCST policy.
pub struct CaptionPolicy<'a> {
    pub model: &'a Gevst,
}

impl Policy for CaptionPolicy<'_> {
    type Item = PreparedSample;

    fn sample(
        &self,
        store: &ParamStore,
        item: &PreparedSample,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        let enc = self.model.encode_frozen(store, item)?;
        sample_decode(
            &self.model.scorer(store, &enc),
            self.model.decode_options(),
            rng,
        )
    }

    fn greedy(&self, store: &ParamStore, item: &PreparedSample) -> Result<Vec<usize>> {
        let enc = self.model.encode_frozen(store, item)?;
        Ok(greedy_decode(&self.model.scorer(store, &enc), self.model.decode_options())?.tokens)
    }

    fn log_prob<'t>(
        &self,
        g: &Graph<'t>,
        item: &PreparedSample,
        tokens: &[usize],
    ) -> Result<Var<'t>> {
        let logits = self.model.logits(g, item, &tokens[..tokens.len() - 1])?;
        Ok(logits.log_softmax().pick(&tokens[1..])?.sum())
    }
}

/// Per-sentence CIDEr-D of a decoded id sequence (BOS/EOS stripped).
pub fn caption_reward(cider: &CiderD<usize>, item: &PreparedSample, tokens: &[usize]) -> f64 {
    let body: Vec<usize> = tokens
        .iter()
        .skip(1)
        .take_while(|&&t| t != EOS)
        .copied()
        .collect();
    cider.score(&body, &item.references)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScstEpoch {
    pub epoch: usize,
    pub sample_reward: f64,
    pub greedy_reward: f64,
}

/// Self-critical training with a constant learning rate.
pub fn train_scst(
    model: &Gevst,
    store: &mut ParamStore,
    train: &[PreparedSample],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&ScstEpoch),
) -> Result<Vec<ScstEpoch>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(GevstError::Input("empty training set".into()));
    }
    let refs: Vec<Vec<Vec<usize>>> = train.iter().map(|s| s.references.clone()).collect();
    let cider = CiderD::new(&refs);
    let reward = |item: &PreparedSample, toks: &[usize]| caption_reward(&cider, item, toks);
    let policy = CaptionPolicy { model };
    let mut adam = Adam::new(store, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut out = Vec::new();
    for epoch in 1..=cfg.scst_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5c57);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle(&mut order, &mut rng);
        let (mut rs, mut rg) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<&PreparedSample> = batch.iter().map(|&i| &train[i]).collect();
            let st = scst_step(
                &policy,
                store,
                &items,
                &reward,
                &mut adam,
                cfg.scst_lr,
                cfg.clip_norm,
                cfg.scst_samples,
                &mut rng,
            )?;
            if st.grad_norm > cfg.clip_norm {
                log::info!(
                    "SCST gradient norm {:.3} clipped to {}",
                    st.grad_norm,
                    cfg.clip_norm
                );
            }
            rs += st.sample_reward * batch.len() as f64;
            rg += st.greedy_reward * batch.len() as f64;
        }
        let e = ScstEpoch {
            epoch,
            sample_reward: rs / train.len() as f64,
            greedy_reward: rg / train.len() as f64,
        };
        if e.sample_reward == 0.0 && e.greedy_reward == 0.0 {
            log::warn!("SCST epoch {epoch}: reward is zero for every sample");
        }
        log::info!(
            "scst epoch {epoch}: sample reward {:.4} greedy reward {:.4}",
            e.sample_reward,
            e.greedy_reward
        );
        on_epoch(&e);
        out.push(e);
    }
    Ok(out)
}

pub const CHECKPOINT_FORMAT: &str = "gevst-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section that follows the header line.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub params: Vec<ParamEntry>,
}

/// One JSON header line, then every parameter as little-endian f64 in
/// manifest order.
pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    vocab: &Vocabulary,
    store: &ParamStore,
) -> Result<()> {
    let mut offset = 0;
    let params = store
        .ids()
        .map(|id| {
            let t = store.get(id);
            let e = ParamEntry {
                name: store.name(id).to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len() * 8;
            e
        })
        .collect();
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        vocab: vocab.words().to_vec(),
        params,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for id in store.ids() {
        for v in store.get(id).data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct Checkpoint {
    pub model: Gevst,
    pub store: ParamStore,
    pub vocab: Vocabulary,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| GevstError::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| GevstError::Checkpoint(format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(GevstError::Checkpoint(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let vocab = Vocabulary::from_words(header.vocab.clone())?;
    let (model, mut store) = Gevst::new(&header.config, vocab.len(), 0)?;
    let data = &bytes[nl + 1..];
    if header.params.len() != store.len() {
        return Err(GevstError::Checkpoint(format!(
            "{} parameters in file, model has {}",
            header.params.len(),
            store.len()
        )));
    }
    let mut end = 0;
    let ids: Vec<_> = store.ids().collect();
    for (id, e) in ids.into_iter().zip(&header.params) {
        if store.name(id) != e.name || store.get(id).shape() != e.shape.as_slice() {
            return Err(GevstError::Checkpoint(format!(
                "parameter {} {:?} does not match model's {} {:?}",
                e.name,
                e.shape,
                store.name(id),
                store.get(id).shape()
            )));
        }
        let n = store.get(id).len();
        let chunk = data
            .get(e.offset..e.offset + n * 8)
            .ok_or_else(|| GevstError::Checkpoint(format!("data for {} is truncated", e.name)))?;
        let values = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        store.set(id, Tensor::new(e.shape.clone(), values)?)?;
        end = end.max(e.offset + n * 8);
    }
    if end != data.len() {
        return Err(GevstError::Checkpoint(format!(
            "{} trailing bytes after parameter data",
            data.len() - end
        )));
    }
    Ok(Checkpoint {
        model,
        store,
        vocab,
    })
}
