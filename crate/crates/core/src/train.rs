//! Episodic training, fold evaluation and the cross-domain protocol.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::Graph;
use crate::backbone::{assert_frozen, BACKBONE_PREFIX};
use crate::episode::{Episode, EpisodeSampler, EpisodeSource, FoldSpec, Split};
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::loss::{mask_loss, LossKind};
use crate::metrics::{Domain, IouAccumulator, MetricsReport};
use crate::model::VceNet;
use crate::ops::Upsample;
use crate::optim::{OptimConfig, Optimizer};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub n_iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub fold: FoldSpec,
    pub loss: LossKind,
    /// Iterations between checkpoint boundaries; 0 disables them.
    pub checkpoint_every: u64,
    pub optim: OptimConfig,
}

impl TrainConfig {
    pub fn new(fold: FoldSpec) -> Self {
        TrainConfig {
            n_iterations: 1000,
            batch_size: 4,
            seed: 0,
            fold,
            loss: LossKind::BalancedBce,
            checkpoint_every: 0,
            optim: OptimConfig::default(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.optim.learning_rate
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        self.optim.validate()
    }
}

/// One sampled training episode, kept for the post-hoc split audit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditRecord {
    pub iteration: u64,
    pub class_id: u32,
    pub image_id: String,
}

/// Fails if any audited episode targeted a class outside the fold's train split.
pub fn audit_train_classes(audit: &[AuditRecord], fold: &FoldSpec) -> Result<()> {
    let leaked: BTreeSet<u32> =
        audit.iter().map(|r| r.class_id).filter(|c| !fold.train_classes.contains(c)).collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("training saw non-train classes {leaked:?}")))
    }
}

/// Medians of the loss over the first and last fifth of the run.
pub fn loss_window_medians(losses: &[f64]) -> Option<(f64, f64)> {
    let t = losses.len();
    let head = t.div_ceil(5);
    let tail = (4 * t) / 5;
    if t < 5 || head == 0 || tail >= t {
        return None;
    }
    let median = |w: &[f64]| {
        let mut w = w.to_vec();
        w.sort_by(f64::total_cmp);
        let n = w.len();
        if n % 2 == 1 { w[n / 2] } else { 0.5 * (w[n / 2 - 1] + w[n / 2]) }
    };
    Some((median(&losses[..head]), median(&losses[tail..])))
}

/// Gradient of every parameter reached by the backward pass.
pub type ParamGrads<T> = Vec<(ParamId, Tensor<T>)>;

/// Loss and parameter gradients of a single episode. The probabilities are
/// upsampled to the input size before the loss, as in prediction.
pub fn episode_gradients<T: Scalar>(
    net: &VceNet,
    store: &ParamStore<T>,
    episode: &Episode,
    kind: LossKind,
) -> Result<(f64, ParamGrads<T>)> {
    let image: Tensor<T> = episode.query_image.cast();
    let (_, h, w) = image.dims3()?;
    let mut g = Graph::new();
    let out = net.forward(&mut g, store, &image)?;
    let probs = g.foreground_prob(out.logits)?;
    let probs = g.resize(probs, h, w, Upsample::Bilinear)?;
    let loss = mask_loss(&mut g, probs, &episode.gt_mask, kind)?;
    let value = g.value(loss).data()[0].as_f64();
    let grads = g.backward(loss)?;
    Ok((value, grads.params().map(|(id, t)| (id, t.clone())).collect()))
}

/// One optimizer update on the mean loss of `episodes`, each run through its
/// own forward pass. Returns the mean loss.
pub fn train_step<T: Scalar>(
    net: &VceNet,
    store: &mut ParamStore<T>,
    optimizer: &mut Optimizer<T>,
    episodes: &[Episode],
    kind: LossKind,
    learning_rate: f64,
    iteration: u64,
) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let mut total = 0.0;
    let mut sums: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
    for ep in episodes {
        let (loss, grads) = episode_gradients(net, store, ep, kind)?;
        total += loss;
        for (id, gr) in grads {
            match sums.get_mut(&id) {
                Some(acc) => acc.add_assign(&gr),
                None => {
                    sums.insert(id, gr);
                }
            }
        }
    }
    let mean = total / episodes.len() as f64;
    let finite_grads = sums.values().all(|t| t.all_finite());
    if !mean.is_finite() || !finite_grads {
        return Err(Error::NonFiniteLoss {
            iteration,
            episodes: episodes.iter().map(|e| format!("{}:class{}", e.image_id, e.target_class_id)).collect(),
        });
    }
    let inv = T::lit(1.0 / episodes.len() as f64);
    for t in sums.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = *v * inv);
    }
    optimizer.apply(store, sums.iter().map(|(&id, t)| (id, t)), learning_rate)?;
    Ok(mean)
}

/// Per-iteration sampler seed; independent of how many iterations ran before,
/// so a resumed run draws the same episodes as an uninterrupted one.
fn iteration_seed(seed: u64, iteration: u64) -> u64 {
    let mut z = seed ^ iteration.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Training loop state for one fold.
pub struct Trainer<'a, S: EpisodeSource + ?Sized> {
    pub net: &'a VceNet,
    pub source: &'a S,
    pub config: TrainConfig,
    pub store: ParamStore<f32>,
    pub optimizer: Optimizer<f32>,
    pub iteration: u64,
    pub losses: Vec<f64>,
    pub audit: Vec<AuditRecord>,
    frozen: BTreeMap<String, Tensor<f32>>,
}

impl<'a, S: EpisodeSource + ?Sized> Trainer<'a, S> {
    pub fn new(net: &'a VceNet, source: &'a S, store: ParamStore<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if source.n_classes() != config.fold.n_total_classes {
            return Err(Error::config(format!(
                "fold covers {} classes but the dataset has {}",
                config.fold.n_total_classes,
                source.n_classes()
            )));
        }
        // fail early if the train split cannot be sampled
        EpisodeSampler::for_fold(source, &config.fold, Split::Train, config.seed)?;
        let frozen = store.snapshot(BACKBONE_PREFIX);
        let optimizer = Optimizer::new(config.optim);
        Ok(Trainer { net, source, config, store, optimizer, iteration: 0, losses: Vec::new(), audit: Vec::new(), frozen })
    }

    /// Continues from a restored iteration counter and optimizer state.
    pub fn resume(&mut self, iteration: u64, buffers: BTreeMap<String, Tensor<f32>>) {
        self.iteration = iteration;
        self.optimizer.step = iteration;
        self.optimizer.buffers = buffers;
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.n_iterations
    }

    pub fn sample_batch(&self, iteration: u64) -> Result<Vec<Episode>> {
        let seed = iteration_seed(self.config.seed, iteration);
        let mut sampler = EpisodeSampler::for_fold(self.source, &self.config.fold, Split::Train, seed)?;
        (0..self.config.batch_size).map(|_| sampler.next_episode()).collect()
    }

    /// Runs one iteration; returns its mean loss.
    pub fn step(&mut self) -> Result<f64> {
        let it = self.iteration;
        let batch = self.sample_batch(it)?;
        self.audit.extend(batch.iter().map(|e| AuditRecord {
            iteration: it,
            class_id: e.target_class_id,
            image_id: e.image_id.clone(),
        }));
        let lr = self.config.optim.rate_at(it, self.config.n_iterations);
        let loss = train_step(self.net, &mut self.store, &mut self.optimizer, &batch, self.config.loss, lr, it)?;
        self.losses.push(loss);
        self.iteration += 1;
        Ok(loss)
    }

    pub fn at_checkpoint_boundary(&self) -> bool {
        let every = self.config.checkpoint_every;
        (every > 0 && self.iteration % every == 0) || self.is_done()
    }

    /// Verifies that no backbone parameter moved since construction.
    pub fn check_frozen(&self) -> Result<()> {
        if assert_frozen(&self.frozen, &self.store.snapshot(BACKBONE_PREFIX))? {
            Ok(())
        } else {
            Err(Error::Contract(format!("backbone parameters changed by iteration {}", self.iteration)))
        }
    }

    /// Trains to completion, calling `on_checkpoint` at every checkpoint boundary
    /// after the frozen-backbone check.
    pub fn run(&mut self, mut on_checkpoint: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            self.step()?;
            if self.at_checkpoint_boundary() {
                self.check_frozen()?;
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }
}

/// Anything that maps an episode to a binary mask at the image resolution.
pub trait Segmenter {
    fn segment(&self, episode: &Episode) -> Result<Mask>;
}

pub struct ModelSegmenter<'a, T> {
    pub net: &'a VceNet,
    pub store: &'a ParamStore<T>,
}

impl<T: Scalar> Segmenter for ModelSegmenter<'_, T> {
    fn segment(&self, episode: &Episode) -> Result<Mask> {
        let p = self.net.predict(self.store, &episode.query_image.cast())?;
        Ok(Mask { width: p.width, height: p.height, data: p.mask })
    }
}

/// Predicts every pixel as foreground (`true`) or background (`false`).
pub struct ConstantSegmenter(pub bool);

impl Segmenter for ConstantSegmenter {
    fn segment(&self, e: &Episode) -> Result<Mask> {
        let m = &e.gt_mask;
        Ok(Mask { width: m.width, height: m.height, data: alloc::vec![u8::from(self.0); m.data.len()] })
    }
}

/// Returns the ground truth.
pub struct OracleSegmenter;

impl Segmenter for OracleSegmenter {
    fn segment(&self, e: &Episode) -> Result<Mask> {
        Ok(e.gt_mask.clone())
    }
}

/// Intersection and union sums over `n_episodes` episodes drawn from `classes`.
/// `report_key` maps a drawn class id to the id the report is keyed by.
pub fn accumulate<M: Segmenter + ?Sized, S: EpisodeSource + ?Sized>(
    model: &M,
    source: &S,
    classes: &BTreeSet<u32>,
    split: Split,
    n_episodes: usize,
    seed: u64,
    report_key: impl Fn(u32) -> u32,
) -> Result<IouAccumulator> {
    let mut sampler = EpisodeSampler::new(source, classes, split, seed)?;
    let mut acc = IouAccumulator::default();
    for _ in 0..n_episodes {
        let ep = sampler.next_episode()?;
        let pred = model.segment(&ep)?;
        acc.add(report_key(ep.target_class_id), &pred, &ep.gt_mask)?;
    }
    Ok(acc)
}

/// Evaluates `n_episodes` episodes of `split`, deterministic in `seed`.
pub fn evaluate_fold<M: Segmenter + ?Sized, S: EpisodeSource + ?Sized>(
    model: &M,
    source: &S,
    fold: &FoldSpec,
    split: Split,
    n_episodes: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let acc = accumulate(model, source, fold.classes(split), split, n_episodes, seed, |c| c)?;
    Ok(acc.report(fold.fold_index, split, Domain::Source))
}

/// Source class id to target class id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassMap {
    pub map: BTreeMap<u32, u32>,
}

impl ClassMap {
    pub fn identity(n_classes: u32) -> Self {
        ClassMap { map: (1..=n_classes).map(|c| (c, c)).collect() }
    }

    /// Checks ids against both datasets, injectivity, and that every test class
    /// of `fold` is mapped.
    pub fn validate(&self, source_classes: u32, target_classes: u32, fold: &FoldSpec) -> Result<()> {
        for (&s, &t) in &self.map {
            if s == 0 || s > source_classes {
                return Err(Error::config(format!("class map: unknown source class {s}")));
            }
            if t == 0 || t > target_classes {
                return Err(Error::config(format!("class map: unknown target class {t} (for source {s})")));
            }
        }
        let targets: BTreeSet<u32> = self.map.values().copied().collect();
        if targets.len() != self.map.len() {
            return Err(Error::config("class map sends two source classes to the same target class"));
        }
        if let Some(c) = fold.test_classes.iter().find(|c| !self.map.contains_key(c)) {
            return Err(Error::config(format!("class map has no entry for test class {c}")));
        }
        Ok(())
    }
}

/// Source-test and target-test reports for an already trained model. The target
/// report is keyed by source class id so the two share a class set.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_domains<M: Segmenter + ?Sized, S: EpisodeSource + ?Sized, D: EpisodeSource + ?Sized>(
    model: &M,
    source: &S,
    target: &D,
    fold: &FoldSpec,
    class_map: &ClassMap,
    n_episodes: usize,
    seed: u64,
) -> Result<[MetricsReport; 2]> {
    class_map.validate(source.n_classes(), target.n_classes(), fold)?;
    let src = evaluate_fold(model, source, fold, Split::Test, n_episodes, seed)?;
    let target_classes: BTreeSet<u32> = fold.test_classes.iter().map(|c| class_map.map[c]).collect();
    let back: BTreeMap<u32, u32> = class_map.map.iter().map(|(&s, &t)| (t, s)).collect();
    let acc = accumulate(model, target, &target_classes, Split::Test, n_episodes, seed, |t| back[&t])?;
    Ok([src, acc.report(fold.fold_index, Split::Test, Domain::Target)])
}

/// Trains on the source dataset only, then reports on both domains.
pub fn run_domain_adaptation<S: EpisodeSource + ?Sized, D: EpisodeSource + ?Sized>(
    net: &VceNet,
    store: ParamStore<f32>,
    source: &S,
    target: &D,
    class_map: &ClassMap,
    config: &TrainConfig,
    n_eval_episodes: usize,
) -> Result<(ParamStore<f32>, [MetricsReport; 2])> {
    class_map.validate(source.n_classes(), target.n_classes(), &config.fold)?;
    let mut trainer = Trainer::new(net, source, store, config.clone())?;
    trainer.run(|_| Ok(()))?;
    audit_train_classes(&trainer.audit, &config.fold)?;
    let store = trainer.store;
    let seg = ModelSegmenter { net, store: &store };
    let reports = evaluate_domains(&seg, source, target, &config.fold, class_map, n_eval_episodes, config.seed)?;
    Ok((store, reports))
}
