//! The work behind each command, callable without the argument parser.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{debug, info};

use vcenet_core::backbone::{BackboneVariant, BACKBONE_PREFIX};
use vcenet_core::checkpoint::Checkpoint;
use vcenet_core::episode::{build_fold_spec, EpisodeSource, FoldSpec, Split};
use vcenet_core::metrics::MetricsReport;
use vcenet_core::model::VceNet;
use vcenet_core::params::ParamStore;
use vcenet_core::synth::SynthSpec;
use vcenet_core::train::{
    audit_train_classes, evaluate_domains, evaluate_fold, AuditRecord, ModelSegmenter, TrainConfig, Trainer,
};

use crate::config::Config;
use crate::dataset::{self, DirDataset};
use crate::error::{CliError, CliResult};
use crate::io::{self, MetricsLine};

/// `git describe`-style version of this build.
pub fn version() -> &'static str {
    env!("VCENET_VERSION")
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const LOSS_FILE: &str = "losses.txt";

/// Builds the network. The pretrained backbone reads its weights from a
/// checkpoint-format file whose `backbone.*` tensors use torchvision names.
pub fn build_model(cfg: &Config) -> CliResult<(VceNet, ParamStore<f32>)> {
    let model_cfg = cfg.model_config();
    let (net, mut store) = VceNet::new::<f32>(&model_cfg)?;
    if model_cfg.backbone.variant == BackboneVariant::PretrainedResnet50 {
        model_cfg.backbone.validate()?;
        let path = PathBuf::from(model_cfg.backbone.weights_path.as_deref().unwrap_or_default());
        let weights = io::load_checkpoint(&path)?;
        let named: Vec<_> = weights
            .params
            .iter()
            .filter(|r| r.name.starts_with(BACKBONE_PREFIX))
            .map(|r| (r.name.clone(), r.value.clone()))
            .collect();
        store.load_named(BACKBONE_PREFIX, &named)?;
        info!("loaded {} backbone tensors from {}", named.len(), path.display());
    }
    Ok((net, store))
}

/// Builds the network from the configuration embedded in a checkpoint and
/// restores its parameters.
pub fn model_from_checkpoint(ck: &Checkpoint) -> CliResult<(Config, VceNet, ParamStore<f32>)> {
    let cfg = Config::parse(&ck.config_text, &[])
        .map_err(|e| CliError::user(format!("checkpoint configuration: {e}")))?;
    if cfg.hash() != ck.config_hash {
        return Err(CliError::user("checkpoint configuration does not match its recorded hash"));
    }
    let (net, mut store) = VceNet::new::<f32>(&cfg.model_config())?;
    ck.restore(&mut store)?;
    Ok((cfg, net, store))
}

/// Restores `ck` into a model built from `cfg`; shapes must agree.
pub fn restore_into(cfg: &Config, ck: &Checkpoint) -> CliResult<(VceNet, ParamStore<f32>)> {
    let (net, mut store) = VceNet::new::<f32>(&cfg.model_config())?;
    ck.restore(&mut store)?;
    Ok((net, store))
}

pub fn open_dataset(root: Option<PathBuf>, cfg: &Config) -> CliResult<DirDataset> {
    let root = root.ok_or_else(|| CliError::user("data.root is not set"))?;
    DirDataset::open(&root, cfg.image_size())
}

pub fn resolve_fold(cfg: &Config, n_classes: u32) -> CliResult<FoldSpec> {
    Ok(match cfg.fold_file() {
        Some(path) => dataset::read_fold_file(&path, n_classes)?,
        None => build_fold_spec(cfg.fold_index(), n_classes, cfg.classes_per_fold())?,
    })
}

pub fn train_config(cfg: &Config, fold: FoldSpec) -> TrainConfig {
    TrainConfig {
        n_iterations: cfg.iterations(),
        batch_size: cfg.batch_size(),
        seed: cfg.seed(),
        fold,
        loss: cfg.loss(),
        checkpoint_every: cfg.checkpoint_every(),
        optim: cfg.optim_config(),
    }
}

/// Logs what identifies a run: version, seed, configuration hash and the
/// parameter counts per top-level module.
pub fn log_run_header(cfg: &Config, store: &ParamStore<f32>) {
    info!("vcenet {}", version());
    info!("seed {}", cfg.seed());
    info!("config hash {}", cfg.hash_hex());
    let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (_, p) in store.iter() {
        let group = p.name.split('.').next().unwrap_or_default().to_string();
        let e = groups.entry(group).or_default();
        if p.trainable {
            e.0 += p.value.len();
        } else {
            e.1 += p.value.len();
        }
        debug!("param {} {:?} {}", p.name, p.value.shape(), if p.trainable { "trainable" } else { "frozen" });
    }
    for (g, (t, f)) in &groups {
        info!("params {g}: {t} trainable, {f} frozen");
    }
    info!("params total: {} trainable, {} frozen", store.count_elements(true), store.count_elements(false));
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub audit: Vec<AuditRecord>,
    pub reports: Vec<MetricsReport>,
    pub metrics: Vec<MetricsLine>,
    pub checkpoint: PathBuf,
    pub store: ParamStore<f32>,
}

fn audit_json(r: &AuditRecord) -> String {
    serde_json::json!({"iteration": r.iteration, "class_id": r.class_id, "image_id": r.image_id}).to_string()
}

/// Trains on the configured fold, checkpointing into `out_dir`, then evaluates
/// the train and test splits.
pub fn train(cfg: &Config, resume: Option<&Path>) -> CliResult<TrainOutcome> {
    let data = open_dataset(cfg.data_root(), cfg)?;
    let fold = resolve_fold(cfg, data.n_classes())?;
    let (net, mut store) = build_model(cfg)?;
    let out = cfg.out_dir();
    let ck_path = out.join(CHECKPOINT_FILE);
    let resumed = match resume {
        Some(path) => {
            let ck = io::load_checkpoint(path)?;
            if ck.config_hash != cfg.hash() {
                return Err(CliError::user(format!("{} was written under a different configuration", path.display())));
            }
            ck.restore(&mut store)?;
            Some(ck)
        }
        None => None,
    };
    log_run_header(cfg, &store);
    info!("fold {}: train {:?}, test {:?}", fold.fold_index, fold.train_classes, fold.test_classes);

    let mut trainer = Trainer::new(&net, &data, store, train_config(cfg, fold.clone()))?;
    if let Some(ck) = &resumed {
        trainer.resume(ck.iteration, ck.optimizer_buffers());
        info!("resumed at iteration {}", ck.iteration);
    }
    let hash = cfg.hash();
    let text = cfg.canonical();
    let total = cfg.iterations();
    let log_every = (total / 20).max(1);
    while !trainer.is_done() {
        let loss = trainer.step()?;
        if trainer.iteration % log_every == 0 || trainer.iteration == 1 {
            info!("iteration {}/{} loss {loss:.5}", trainer.iteration, total);
        }
        if trainer.at_checkpoint_boundary() {
            trainer.check_frozen()?;
            let ck = Checkpoint::capture(hash, &text, trainer.iteration, &trainer.store, Some(&trainer.optimizer));
            io::save_checkpoint(&ck_path, &ck)?;
            debug!("checkpoint at iteration {}", trainer.iteration);
        }
    }
    audit_train_classes(&trainer.audit, &fold)?;
    let audit: Vec<String> = trainer.audit.iter().map(audit_json).collect();
    io::atomic_write(&out.join(AUDIT_FILE), (audit.join("\n") + "\n").as_bytes())?;
    let losses: String = trainer.losses.iter().map(|l| format!("{l:e}\n")).collect();
    io::atomic_write(&out.join(LOSS_FILE), losses.as_bytes())?;

    let seg = ModelSegmenter { net: &net, store: &trainer.store };
    let mut reports = Vec::new();
    for split in [Split::Train, Split::Test] {
        reports.push(evaluate_fold(&seg, &data, &fold, split, cfg.eval_episodes(), cfg.seed())?);
    }
    let metrics = emit_metrics(cfg, &reports)?;
    Ok(TrainOutcome {
        losses: trainer.losses,
        audit: trainer.audit,
        reports,
        metrics,
        checkpoint: ck_path,
        store: trainer.store,
    })
}

fn emit_metrics(cfg: &Config, reports: &[MetricsReport]) -> CliResult<Vec<MetricsLine>> {
    let hash = cfg.hash_hex();
    let lines: Vec<MetricsLine> = reports.iter().map(|r| MetricsLine::new(r, cfg.seed(), &hash)).collect();
    for l in &lines {
        info!("{} {} fold {} miou {:.4} over {} episodes", l.domain, l.split, l.fold, l.miou, l.n_episodes);
    }
    let json: Vec<String> = lines.iter().map(MetricsLine::to_json).collect();
    io::append_lines(&cfg.out_dir().join(METRICS_FILE), &json)?;
    Ok(lines)
}

/// Test-split metrics of a checkpoint on the configured fold.
pub fn eval(cfg: &Config, checkpoint: &Path) -> CliResult<Vec<MetricsLine>> {
    let ck = io::load_checkpoint(checkpoint)?;
    let (net, store) = restore_into(cfg, &ck)?;
    let data = open_dataset(cfg.data_root(), cfg)?;
    let fold = resolve_fold(cfg, data.n_classes())?;
    log_run_header(cfg, &store);
    let seg = ModelSegmenter { net: &net, store: &store };
    let report = evaluate_fold(&seg, &data, &fold, Split::Test, cfg.eval_episodes(), cfg.seed())?;
    emit_metrics(cfg, &[report])
}

/// Source and target test-split metrics; the target dataset is only read here.
pub fn domain_eval(cfg: &Config, checkpoint: &Path, target_root: &Path, class_map: &Path) -> CliResult<Vec<MetricsLine>> {
    let ck = io::load_checkpoint(checkpoint)?;
    let (net, store) = restore_into(cfg, &ck)?;
    let source = open_dataset(cfg.data_root(), cfg)?;
    let target = DirDataset::open(target_root, cfg.image_size())?;
    let fold = resolve_fold(cfg, source.n_classes())?;
    let map = dataset::read_class_map(class_map)?;
    log_run_header(cfg, &store);
    let seg = ModelSegmenter { net: &net, store: &store };
    let reports = evaluate_domains(&seg, &source, &target, &fold, &map, cfg.eval_episodes(), cfg.seed())?;
    emit_metrics(cfg, &reports)
}

/// Segments one image with a checkpoint and writes a 0/255 mask of the same size.
pub fn predict(image: &Path, checkpoint: &Path, out: &Path) -> CliResult<()> {
    let ck = io::load_checkpoint(checkpoint)?;
    let (cfg, net, store) = model_from_checkpoint(&ck)?;
    debug!("checkpoint config hash {}", cfg.hash_hex());
    let img = io::read_rgb(image)?;
    let pred = net.predict(&store, &img.to_tensor())?;
    let mask = vcenet_core::image::Mask { width: pred.width, height: pred.height, data: pred.mask };
    io::write_mask(out, &mask)
}

pub fn synth(out: &Path, spec: &SynthSpec) -> CliResult<()> {
    dataset::write_synthetic(out, spec)?;
    info!("wrote {} images of {} classes to {}", spec.n_images, spec.n_classes, out.display());
    Ok(())
}
