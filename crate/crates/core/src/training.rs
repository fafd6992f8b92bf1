//! Losses and training loops for the Siamese embedder and the generator.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusItem;
use crate::dsp::MelSpectrogram;
use crate::embedding::{cosine_grad_u, cosine_similarity, Siamese};
use crate::error::{Error, Result};
use crate::generator::{round_tau, Generator};
use crate::nn::{Adam, AdamConfig};
use crate::problem::{
    apply_mask, build_mask, compute_context_window, context_frames_for, frame_phoneme_labels, MaskVector,
    PhonemeInventory, WindowSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_attract: f64,
    pub lambda_contrast: f64,
    /// Reference instances drawn per example for the embedding losses.
    pub n_refs: usize,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    /// Stop as soon as a full-batch step reports a masked-region L1 below this.
    pub target_masked_l1: Option<f64>,
    /// Window length; derived from the training data when absent.
    pub tau: Option<usize>,
    /// Siamese pair sampling.
    pub pairs_per_epoch: usize,
    pub validation_pairs: usize,
    pub margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 450,
            batch_size: 100,
            learning_rate: 1e-4,
            lr_decay: 1.0,
            patience: 20,
            seed: 0,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda_attract: 0.1,
            lambda_contrast: 0.1,
            n_refs: 4,
            max_steps: None,
            target_masked_l1: None,
            tau: None,
            pairs_per_epoch: 1000,
            validation_pairs: 200,
            margin: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.patience == 0 || self.n_refs == 0 {
            return bad("batch_size, patience and n_refs must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        let lambdas = [self.lambda1, self.lambda2, self.lambda_attract, self.lambda_contrast];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("loss weights must be finite and non-negative");
        }
        if self.pairs_per_epoch == 0 {
            return bad("pairs_per_epoch must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub masked_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub best_epoch: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
    pub stop_reason: String,
}

impl TrainReport {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.epochs[e].val_loss)
    }
}

fn log_epoch(log: &mut Option<&mut dyn Write>, record: &EpochRecord) -> Result<()> {
    if let Some(w) = log.as_mut() {
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        let mut line = serde_json::to_value(record)?;
        line["timestamp"] = serde_json::json!(ts);
        writeln!(w, "{line}")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Losses

/// `λ1 · mean|y − x|` over the masked frames plus `λ2 · mean|y − x|` over the
/// context frames; each mean uses its own region's element count.
pub fn reconstruction_loss(y: &MelSpectrogram, x: &MelSpectrogram, mask: &MaskVector, lambda1: f64, lambda2: f64) -> Result<f64> {
    Ok(reconstruction_terms(y, x, mask, lambda1, lambda2, false)?.0)
}

/// Loss and its gradient with respect to `y` (sign subgradient, 0 at ties).
pub fn reconstruction_loss_grad(
    y: &MelSpectrogram,
    x: &MelSpectrogram,
    mask: &MaskVector,
    lambda1: f64,
    lambda2: f64,
) -> Result<(f64, MelSpectrogram)> {
    let (loss, grad) = reconstruction_terms(y, x, mask, lambda1, lambda2, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

/// Mean absolute error over the masked frames only.
pub fn masked_l1(y: &MelSpectrogram, x: &MelSpectrogram, mask: &MaskVector) -> Result<f64> {
    reconstruction_loss(y, x, mask, 1.0, 0.0)
}

fn reconstruction_terms(
    y: &MelSpectrogram,
    x: &MelSpectrogram,
    mask: &MaskVector,
    lambda1: f64,
    lambda2: f64,
    want_grad: bool,
) -> Result<(f64, Option<MelSpectrogram>)> {
    y.same_shape(x)?;
    if mask.len() != y.n_frames {
        return Err(Error::shape(format!("mask of {} frames", y.n_frames), mask.len()));
    }
    let d = y.n_mels;
    let n_masked = mask.masked_count() * d;
    let n_context = mask.sum() * d;
    let w_masked = if n_masked > 0 { lambda1 / n_masked as f64 } else { 0.0 };
    let w_context = if n_context > 0 { lambda2 / n_context as f64 } else { 0.0 };
    let (mut masked, mut context) = (0.0, 0.0);
    let mut grad = want_grad.then(|| MelSpectrogram::filled(y.n_frames, d, 0.0));
    for (t, &m) in mask.values().iter().enumerate() {
        let w = if m == 0 { w_masked } else { w_context };
        let acc = if m == 0 { &mut masked } else { &mut context };
        for (b, (a, c)) in y.frame(t).iter().zip(x.frame(t)).enumerate() {
            let diff = a - c;
            *acc += diff.abs();
            if let Some(g) = grad.as_mut() {
                g.frame_mut(t)[b] = w * sign(diff);
            }
        }
    }
    Ok((w_masked * masked + w_context * context, grad))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn masked_slice(gen_window: &MelSpectrogram, window: &WindowSpec) -> Result<MelSpectrogram> {
    if gen_window.n_frames != window.length {
        return Err(Error::shape(format!("{} frames", window.length), gen_window.n_frames));
    }
    if window.masked_frames() == 0 {
        return Err(Error::EmptySegment);
    }
    Ok(gen_window.slice_frames(window.mask_lo, window.mask_hi))
}

/// Mean over references of `1 − cos(embed(generated masked slice), embed(ref))`.
pub fn embedding_attract_loss(
    siamese: &Siamese,
    gen_window: &MelSpectrogram,
    window: &WindowSpec,
    refs: &[MelSpectrogram],
) -> Result<f64> {
    let refs = refs.iter().map(|r| siamese.embed(r)).collect::<Result<Vec<_>>>()?;
    let ref_slices: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
    Ok(attract_loss_grad(siamese, gen_window, window, &ref_slices, false)?.0)
}

/// Attract loss against precomputed reference embeddings, optionally with
/// its gradient with respect to the whole generated window.
pub fn attract_loss_grad(
    siamese: &Siamese,
    gen_window: &MelSpectrogram,
    window: &WindowSpec,
    ref_embeddings: &[&[f64]],
    want_grad: bool,
) -> Result<(f64, Option<MelSpectrogram>)> {
    if ref_embeddings.is_empty() {
        return Err(Error::InvalidConfig("attract loss needs at least one reference".into()));
    }
    let slice = masked_slice(gen_window, window)?;
    let p = &siamese.params.values;
    let (e, cache) = siamese.embed_with(p, &slice)?;
    let n = ref_embeddings.len() as f64;
    let mut loss = 0.0;
    let mut d_emb = vec![0.0; e.len()];
    for r in ref_embeddings {
        loss += 1.0 - cosine_similarity(&e, r).value;
        if want_grad {
            for (d, g) in d_emb.iter_mut().zip(cosine_grad_u(&e, r)) {
                *d -= g / n;
            }
        }
    }
    loss /= n;
    if !want_grad {
        return Ok((loss, None));
    }
    // the Siamese is frozen: its parameter gradients go to a scratch buffer
    let mut scratch = siamese.params.zeros_like();
    let d_slice = siamese.backward(p, &mut scratch, &cache, &d_emb);
    let mut grad = MelSpectrogram::filled(gen_window.n_frames, gen_window.n_mels, 0.0);
    for t in 0..d_slice.n_frames {
        grad.frame_mut(window.mask_lo + t).copy_from_slice(d_slice.frame(t));
    }
    Ok((loss, Some(grad)))
}

/// One training window: an occurrence of a target phoneme with its context.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowExample {
    pub item_id: String,
    pub k: usize,
    pub phoneme: usize,
    pub window: WindowSpec,
    pub target: MelSpectrogram,
    pub masked: MelSpectrogram,
    pub mask: MaskVector,
    pub labels: Vec<usize>,
}

impl WindowExample {
    pub fn new(item: &CorpusItem, inventory: &PhonemeInventory, k: usize, tau: usize) -> Result<Self> {
        let seg = &item.segmentation;
        let window = compute_context_window(seg, k, tau)?;
        let phoneme = seg.phoneme(k);
        let target = item.mel().slice_frames(window.utterance_start, window.utterance_end());
        let mask = build_mask(&window);
        let masked = apply_mask(&target, &mask)?;
        let labels = frame_phoneme_labels(seg, inventory, &window, k, phoneme)?.labels;
        Ok(Self {
            item_id: item.id.clone(),
            k,
            phoneme,
            window,
            target,
            masked,
            mask,
            labels,
        })
    }

    /// Labels with the masked frames set to `q`.
    pub fn labels_with(&self, q: usize) -> Vec<usize> {
        let mut labels = self.labels.clone();
        labels[self.window.mask_lo..self.window.mask_hi].fill(q);
        labels
    }
}

/// Generates with the masked frames relabelled to `q` and measures the
/// attract loss of the result against `refs_q`.
pub fn contrastive_generation_loss(
    generator: &Generator,
    example: &WindowExample,
    q: usize,
    siamese: &Siamese,
    refs_q: &[MelSpectrogram],
) -> Result<f64> {
    if q == example.phoneme {
        return Err(Error::SamePhoneme(generator.config.inventory.symbol(q).to_string()));
    }
    let (y, _) = generator.forward(&generator.params.values, &example.masked, &example.labels_with(q));
    embedding_attract_loss(siamese, &y, &example.window, refs_q)
}

/// Per-example loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    pub reconstruction: f64,
    pub attract: f64,
    pub contrastive: f64,
    pub masked_l1: f64,
}

/// Everything the full objective needs beyond the example itself.
pub struct ObjectiveRefs<'a> {
    pub siamese: &'a Siamese,
    pub refs_p: Vec<&'a [f64]>,
    /// Contrastive phoneme and its references.
    pub contrast: Option<(usize, Vec<&'a [f64]>)>,
}

/// Full generator objective for one example under parameters `p`. When
/// `grads` is given, the parameter gradient is accumulated into it scaled by
/// `scale`.
pub fn generator_objective(
    generator: &Generator,
    p: &[f64],
    example: &WindowExample,
    cfg: &TrainConfig,
    refs: Option<&ObjectiveRefs>,
    grads: Option<(&mut [f64], f64)>,
) -> Result<LossTerms> {
    let want = grads.is_some();
    let (y, cache) = generator.forward(p, &example.masked, &example.labels);
    let (rec, mut d_out) = reconstruction_terms(&y, &example.target, &example.mask, cfg.lambda1, cfg.lambda2, want)?;
    let mut terms = LossTerms {
        reconstruction: rec,
        masked_l1: masked_l1(&y, &example.target, &example.mask)?,
        ..LossTerms::default()
    };
    let mut second = None;
    if let Some(r) = refs {
        if cfg.lambda_attract > 0.0 {
            let (a, g) = attract_loss_grad(r.siamese, &y, &example.window, &r.refs_p, want)?;
            terms.attract = a;
            if let (Some(d), Some(g)) = (d_out.as_mut(), g) {
                d.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += cfg.lambda_attract * y);
            }
        }
        if let (Some((q, refs_q)), true) = (&r.contrast, cfg.lambda_contrast > 0.0) {
            if *q == example.phoneme {
                return Err(Error::SamePhoneme(generator.config.inventory.symbol(*q).to_string()));
            }
            let (yq, cache_q) = generator.forward(p, &example.masked, &example.labels_with(*q));
            let (c, g) = attract_loss_grad(r.siamese, &yq, &example.window, refs_q, want)?;
            terms.contrastive = c;
            second = g.map(|mut g| {
                g.data.iter_mut().for_each(|v| *v *= cfg.lambda_contrast);
                (g, cache_q)
            });
        }
    }
    terms.total = rec + cfg.lambda_attract * terms.attract + cfg.lambda_contrast * terms.contrastive;
    if let Some((grads, scale)) = grads {
        let mut d_out = d_out.expect("gradient requested");
        d_out.data.iter_mut().for_each(|v| *v *= scale);
        generator.backward(p, grads, &cache, &d_out);
        if let Some((mut g, cache_q)) = second {
            g.data.iter_mut().for_each(|v| *v *= scale);
            generator.backward(p, grads, &cache_q, &g);
        }
    }
    Ok(terms)
}

// ---------------------------------------------------------------------------
// Data helpers

/// Counts occurrences of each target phoneme and fails on any seen fewer
/// than twice.
pub fn check_target_counts(items: &[&CorpusItem], inventory: &PhonemeInventory, targets: &[usize]) -> Result<()> {
    for &p in targets {
        let count: usize = items.iter().map(|i| i.segmentation.occurrences(p).count()).sum();
        if count < 2 {
            return Err(Error::PhonemeTooRare {
                symbol: inventory.symbol(p).to_string(),
                count,
            });
        }
    }
    Ok(())
}

/// Window length for a set of target phonemes: 30% above their longest
/// occurrence, rounded up to the generator's stride multiple.
pub fn derive_tau(items: &[&CorpusItem], targets: &[usize]) -> usize {
    let longest = items
        .iter()
        .flat_map(|item| {
            targets
                .iter()
                .flat_map(move |&p| item.segmentation.occurrences(p))
                .map(move |k| item.segmentation.duration(k).unwrap_or(0))
        })
        .max()
        .unwrap_or(1);
    round_tau(context_frames_for(longest))
}

/// Windows around every target occurrence whose utterance can hold `tau`
/// frames; returns the examples and the number skipped.
pub fn build_examples(
    items: &[&CorpusItem],
    inventory: &PhonemeInventory,
    targets: &[usize],
    tau: usize,
) -> Result<(Vec<WindowExample>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for item in items {
        for k in 0..item.segmentation.len() {
            if !targets.contains(&item.segmentation.phoneme(k)) {
                continue;
            }
            match WindowExample::new(item, inventory, k, tau) {
                Ok(ex) => out.push(ex),
                Err(Error::WindowTooLong { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok((out, skipped))
}

/// Embeddings of every occurrence of each phoneme in `phonemes`.
pub fn reference_embeddings(
    siamese: &Siamese,
    items: &[&CorpusItem],
    phonemes: &[usize],
) -> Result<HashMap<usize, Vec<Vec<f64>>>> {
    let mut out: HashMap<usize, Vec<Vec<f64>>> = HashMap::new();
    for &p in phonemes {
        let entry = out.entry(p).or_default();
        for item in items {
            for k in item.segmentation.occurrences(p) {
                entry.push(siamese.embed(&item.segment_mel(k)?)?);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Generator training

struct Sampler<'a> {
    refs: &'a HashMap<usize, Vec<Vec<f64>>>,
    targets: &'a [usize],
    n_refs: usize,
}

impl<'a> Sampler<'a> {
    fn pick<R: Rng>(&self, p: usize, rng: &mut R) -> Vec<&'a [f64]> {
        let pool = &self.refs[&p];
        (0..self.n_refs)
            .map(|_| pool[rng.gen_range(0..pool.len())].as_slice())
            .collect()
    }

    fn objective_refs<R: Rng>(&self, siamese: &'a Siamese, p: usize, cfg: &TrainConfig, rng: &mut R) -> ObjectiveRefs<'a> {
        let refs_p = if cfg.lambda_attract > 0.0 {
            self.pick(p, rng)
        } else {
            Vec::new()
        };
        let contrast = (cfg.lambda_contrast > 0.0).then(|| {
            let others: Vec<usize> = self.targets.iter().copied().filter(|&t| t != p).collect();
            let q = others[rng.gen_range(0..others.len())];
            (q, self.pick(q, rng))
        });
        ObjectiveRefs {
            siamese,
            refs_p,
            contrast,
        }
    }
}

const VALIDATION_STREAM: u64 = 0x5eed_0f_7a11;

/// Trains the generator on windows around `targets` occurrences in
/// `train`. `siamese` is only read. Returns the parameters of the epoch
/// with the lowest validation loss (the training loss when `val` is empty).
pub fn train_generator(
    mut generator: Generator,
    siamese: &Siamese,
    train: &[&CorpusItem],
    val: &[&CorpusItem],
    cfg: &TrainConfig,
    targets: &[usize],
    mut log: Option<&mut dyn Write>,
) -> Result<(Generator, TrainReport)> {
    cfg.validate()?;
    let inventory = generator.config.inventory.clone();
    let mut targets = targets.to_vec();
    targets.sort_unstable();
    targets.dedup();
    if targets.is_empty() {
        return Err(Error::InvalidConfig("no target phonemes".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&p| p >= inventory.len()) {
        return Err(Error::InvalidPhoneme(format!("index {bad}")));
    }
    check_target_counts(train, &inventory, &targets)?;
    if cfg.lambda_contrast > 0.0 && targets.len() < 2 {
        return Err(Error::InvalidConfig("contrastive loss needs at least two target phonemes".into()));
    }
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        report.stop_reason = "no epochs requested".into();
        return Ok((generator, report));
    }
    let tau = generator.tau();
    let (train_ex, _) = build_examples(train, &inventory, &targets, tau)?;
    let (val_ex, _) = build_examples(val, &inventory, &targets, tau)?;
    if train_ex.is_empty() {
        return Err(Error::UtteranceTooShort {
            frames: train.iter().map(|i| i.n_frames()).max().unwrap_or(0),
            tau,
        });
    }
    let uses_refs = cfg.lambda_attract > 0.0 || cfg.lambda_contrast > 0.0;
    let refs = if uses_refs {
        reference_embeddings(siamese, train, &targets)?
    } else {
        HashMap::new()
    };
    let sampler = Sampler {
        refs: &refs,
        targets: &targets,
        n_refs: cfg.n_refs,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), generator.params.len());
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut since_best = 0;
    let mut step = 0usize;
    let full_batch = cfg.batch_size >= train_ex.len();
    report.stop_reason = "epoch budget exhausted".into();

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_l1 = 0.0;
        let mut seen = 0usize;
        let mut hit_target = false;
        let mut out_of_steps = false;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                out_of_steps = true;
                break;
            }
            let mut grads = generator.params.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            let (mut loss, mut l1) = (0.0, 0.0);
            for &i in batch {
                let ex = &train_ex[i];
                let r = uses_refs.then(|| sampler.objective_refs(siamese, ex.phoneme, cfg, &mut rng));
                let terms = generator_objective(
                    &generator,
                    &generator.params.values,
                    ex,
                    cfg,
                    r.as_ref(),
                    Some((&mut grads, scale)),
                )?;
                loss += terms.total * scale;
                l1 += terms.masked_l1 * scale;
            }
            report.steps.push(StepRecord {
                step,
                loss,
                masked_l1: l1,
            });
            epoch_loss += loss * batch.len() as f64;
            epoch_l1 += l1 * batch.len() as f64;
            seen += batch.len();
            if full_batch && cfg.target_masked_l1.is_some_and(|t| l1 < t) {
                hit_target = true;
                break;
            }
            adam.step(&mut generator.params.values, &grads);
            step += 1;
        }
        if seen == 0 {
            report.stop_reason = "step budget exhausted".into();
            break 'epochs;
        }
        let train_loss = epoch_loss / seen as f64;
        let train_l1 = epoch_l1 / seen as f64;
        let (val_loss, val_l1) = if val_ex.is_empty() {
            (train_loss, train_l1)
        } else {
            evaluate_examples(&generator, siamese, &val_ex, cfg, &sampler)?
        };
        let mut metrics = BTreeMap::new();
        metrics.insert("train_masked_l1".to_string(), train_l1);
        metrics.insert("val_masked_l1".to_string(), val_l1);
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            metrics,
        };
        log_epoch(&mut log, &record)?;
        report.epochs.push(record);
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, generator.params.values.clone()));
            report.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if hit_target {
            report.stop_reason = "masked L1 target reached".into();
            // the reported step is the current parameters: keep them
            best = Some((val_loss, generator.params.values.clone()));
            report.best_epoch = Some(epoch);
            break;
        }
        if out_of_steps {
            report.stop_reason = "step budget exhausted".into();
            break;
        }
        if since_best >= cfg.patience {
            report.stop_reason = format!("no validation improvement for {} epochs", cfg.patience);
            break;
        }
        adam.set_learning_rate(adam.learning_rate() * cfg.lr_decay);
    }
    if let Some((_, values)) = best {
        generator.params.values = values;
    }
    Ok((generator, report))
}

fn evaluate_examples(
    generator: &Generator,
    siamese: &Siamese,
    examples: &[WindowExample],
    cfg: &TrainConfig,
    sampler: &Sampler,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VALIDATION_STREAM);
    let uses_refs = cfg.lambda_attract > 0.0 || cfg.lambda_contrast > 0.0;
    let (mut loss, mut l1) = (0.0, 0.0);
    for ex in examples {
        let r = uses_refs.then(|| sampler.objective_refs(siamese, ex.phoneme, cfg, &mut rng));
        let t = generator_objective(generator, &generator.params.values, ex, cfg, r.as_ref(), None)?;
        loss += t.total;
        l1 += t.masked_l1;
    }
    let n = examples.len() as f64;
    Ok((loss / n, l1 / n))
}

// ---------------------------------------------------------------------------
// Siamese training

/// Ground-truth segment of one phoneme occurrence.
#[derive(Debug, Clone)]
pub struct LabelledSegment {
    pub phoneme: usize,
    pub mel: MelSpectrogram,
}

/// All non-silence phoneme segments of `items`, grouped by phoneme.
pub fn segments_by_phoneme(items: &[&CorpusItem], inventory: &PhonemeInventory) -> Result<BTreeMap<usize, Vec<MelSpectrogram>>> {
    let mut out: BTreeMap<usize, Vec<MelSpectrogram>> = BTreeMap::new();
    for item in items {
        for k in 0..item.segmentation.len() {
            let p = item.segmentation.phoneme(k);
            if p != inventory.silence_index() {
                out.entry(p).or_default().push(item.segment_mel(k)?);
            }
        }
    }
    Ok(out)
}

/// A pair of segment references `(class, index)` and whether they share a phoneme.
pub type Pair = ((usize, usize), (usize, usize), bool);

/// Draws `n` pairs, half same-phoneme and half different-phoneme.
pub fn sample_pairs<R: Rng>(pools: &BTreeMap<usize, Vec<MelSpectrogram>>, n: usize, rng: &mut R) -> Vec<Pair> {
    let classes: Vec<usize> = pools.keys().copied().collect();
    (0..n)
        .map(|i| {
            let same = i % 2 == 0;
            let a = classes[rng.gen_range(0..classes.len())];
            let b = if same {
                a
            } else {
                let mut b = classes[rng.gen_range(0..classes.len() - 1)];
                if b >= a {
                    b = classes[classes.iter().position(|&c| c == b).unwrap() + 1];
                }
                b
            };
            let ia = rng.gen_range(0..pools[&a].len());
            let mut ib = rng.gen_range(0..pools[&b].len());
            if same && pools[&a].len() > 1 {
                while ib == ia {
                    ib = rng.gen_range(0..pools[&b].len());
                }
            }
            ((a, ia), (b, ib), same)
        })
        .collect()
}

/// `1 − sim` for a same-phoneme pair, `max(0, sim − margin)` otherwise.
pub fn pair_loss(sim: f64, same: bool, margin: f64) -> f64 {
    if same {
        1.0 - sim
    } else {
        (sim - margin).max(0.0)
    }
}

/// Mean same-phoneme and cross-phoneme cosine similarity over `pairs`.
pub fn pair_similarity_gap(
    siamese: &Siamese,
    pools: &BTreeMap<usize, Vec<MelSpectrogram>>,
    pairs: &[Pair],
) -> Result<(f64, f64)> {
    let (mut same, mut cross, mut ns, mut nc) = (0.0, 0.0, 0usize, 0usize);
    for &((a, ia), (b, ib), is_same) in pairs {
        let s = cosine_similarity(&siamese.embed(&pools[&a][ia])?, &siamese.embed(&pools[&b][ib])?).value;
        if is_same {
            same += s;
            ns += 1;
        } else {
            cross += s;
            nc += 1;
        }
    }
    Ok((same / ns.max(1) as f64, cross / nc.max(1) as f64))
}

fn pair_objective(
    siamese: &Siamese,
    pools: &BTreeMap<usize, Vec<MelSpectrogram>>,
    pair: &Pair,
    margin: f64,
    grads: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    let &((a, ia), (b, ib), same) = pair;
    let p = &siamese.params.values;
    let (ea, ca) = siamese.embed_with(p, &pools[&a][ia])?;
    let (eb, cb) = siamese.embed_with(p, &pools[&b][ib])?;
    let sim = cosine_similarity(&ea, &eb).value;
    let loss = pair_loss(sim, same, margin);
    if let Some((grads, scale)) = grads {
        let dsim = if same {
            -1.0
        } else if sim > margin {
            1.0
        } else {
            0.0
        };
        if dsim != 0.0 {
            let da: Vec<f64> = cosine_grad_u(&ea, &eb).iter().map(|g| g * dsim * scale).collect();
            let db: Vec<f64> = cosine_grad_u(&eb, &ea).iter().map(|g| g * dsim * scale).collect();
            siamese.backward(p, grads, &ca, &da);
            siamese.backward(p, grads, &cb, &db);
        }
    }
    Ok(loss)
}

/// Trains the embedder on ground-truth segment pairs with early stopping on
/// a fixed set of validation pairs.
pub fn train_siamese(
    mut siamese: Siamese,
    train: &[&CorpusItem],
    val: &[&CorpusItem],
    inventory: &PhonemeInventory,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(Siamese, TrainReport)> {
    cfg.validate()?;
    let pools = segments_by_phoneme(train, inventory)?;
    if pools.len() < 2 {
        return Err(Error::TooFewClasses(pools.len()));
    }
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        report.stop_reason = "no epochs requested".into();
        return Ok((siamese, report));
    }
    let mut val_pools = segments_by_phoneme(val, inventory)?;
    if val_pools.len() < 2 {
        val_pools = pools.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VALIDATION_STREAM);
    let val_pairs = sample_pairs(&val_pools, cfg.validation_pairs.max(2), &mut val_rng);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), siamese.params.len());
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut since_best = 0;
    let mut step = 0;
    report.stop_reason = "epoch budget exhausted".into();
    for epoch in 0..cfg.epochs {
        let mut pairs = sample_pairs(&pools, cfg.pairs_per_epoch, &mut rng);
        pairs.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in pairs.chunks(cfg.batch_size) {
            let mut grads = siamese.params.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for pair in batch {
                loss += scale * pair_objective(&siamese, &pools, pair, cfg.margin, Some((&mut grads, scale)))?;
            }
            report.steps.push(StepRecord {
                step,
                loss,
                masked_l1: f64::NAN,
            });
            epoch_loss += loss * batch.len() as f64;
            adam.step(&mut siamese.params.values, &grads);
            step += 1;
        }
        let val_loss = val_pairs
            .iter()
            .map(|pair| pair_objective(&siamese, &val_pools, pair, cfg.margin, None))
            .sum::<Result<f64>>()?
            / val_pairs.len() as f64;
        let (same, cross) = pair_similarity_gap(&siamese, &val_pools, &val_pairs)?;
        let mut metrics = BTreeMap::new();
        metrics.insert("val_same_similarity".to_string(), same);
        metrics.insert("val_cross_similarity".to_string(), cross);
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / pairs.len() as f64,
            val_loss,
            metrics,
        };
        log_epoch(&mut log, &record)?;
        report.epochs.push(record);
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, siamese.params.values.clone()));
            report.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                report.stop_reason = format!("no validation improvement for {} epochs", cfg.patience);
                break;
            }
        }
        adam.set_learning_rate(adam.learning_rate() * cfg.lr_decay);
    }
    if let Some((_, values)) = best {
        siamese.params.values = values;
    }
    Ok((siamese, report))
}
