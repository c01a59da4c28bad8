//! The optimization loop: seeded shuffling, train-time mirroring,
//! per-group learning rates, per-iteration curves and exact checkpoints.
//!
//! Epochs are one pass over the (possibly augmented) training set. The
//! checkpoint returned is the one with the highest validation accuracy,
//! ties resolved to the earliest epoch; with no validation items the
//! final-epoch checkpoint is returned. Runs are bit-reproducible for a
//! fixed (config, data, seed).

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::models::{LRMultiplierScheme, ModelConfig, TensorArchive};
use crate::nn::{loss, Mode, Network};
use crate::optim::{GroupLr, Optimizer, OptimizerKind};
use crate::raster::Raster;

/// One training/eval item: a square grayscale patch and its label.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub pixels: Raster,
    pub label: Label,
}

/// Optimizer preset, seeds and schedule for one run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub mirror_at_train: bool,
    pub multipliers: Option<LRMultiplierScheme>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::Train("base_lr must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Train("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// The per-architecture training presets.
pub fn preset(name: &str) -> Result<TrainConfig> {
    let cfg = match name {
        "baseline" => TrainConfig {
            optimizer: OptimizerKind::Adam,
            base_lr: 1e-3,
            batch_size: 64,
            dropout_rate: 0.0,
            max_epochs: 35,
            seed: 0,
            mirror_at_train: true,
            multipliers: None,
        },
        "alexnet_ft" => TrainConfig {
            optimizer: OptimizerKind::Adam,
            base_lr: 1e-3,
            batch_size: 64,
            dropout_rate: 0.5,
            max_epochs: 30,
            seed: 0,
            mirror_at_train: true,
            multipliers: Some(crate::models::multiplier_scheme(crate::models::Arch::Alexnet)?),
        },
        "googlenet_ft" => TrainConfig {
            optimizer: OptimizerKind::VanillaSgd,
            base_lr: 1e-2,
            batch_size: 64,
            dropout_rate: 0.2,
            max_epochs: 30,
            seed: 0,
            mirror_at_train: true,
            multipliers: Some(crate::models::multiplier_scheme(crate::models::Arch::Googlenet)?),
        },
        other => return Err(Error::Train(format!("unknown preset {other:?}"))),
    };
    Ok(cfg)
}

/// One recorded training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
}

/// Loss/accuracy series: per-iteration train records plus one validation
/// accuracy per completed epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingCurve {
    pub iterations: Vec<IterRecord>,
    pub val: Vec<(usize, f64)>,
    pub group_lrs: Vec<GroupLr>,
}

impl TrainingCurve {
    /// Mean train-batch accuracy over the final epoch.
    pub fn final_epoch_train_accuracy(&self) -> Option<f64> {
        let last_epoch = self.iterations.last()?.epoch;
        let records: Vec<&IterRecord> = self
            .iterations
            .iter()
            .filter(|r| r.epoch == last_epoch)
            .collect();
        Some(records.iter().map(|r| r.train_acc).sum::<f64>() / records.len() as f64)
    }

    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.val.last().map(|(_, acc)| *acc)
    }
}

/// Serialized weights, optimizer state and run metadata. Reloading and
/// evaluating reproduces the recorded validation accuracy exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub arch: crate::models::Arch,
    pub input_side: usize,
    pub dropout_rate: f64,
    pub epoch: usize,
    pub val_accuracy: Option<f64>,
    pub config_fingerprint: String,
    pub channel_means: [f64; 3],
    pub tensors: TensorArchive,
    pub optim_state: Vec<(String, Vec<f64>)>,
    pub optim_steps: u64,
}

impl Checkpoint {
    fn snapshot(
        net: &Network,
        optimizer: &Optimizer,
        epoch: usize,
        val_accuracy: Option<f64>,
        fingerprint: &str,
    ) -> Self {
        Checkpoint {
            arch: net.arch_name.parse().expect("network arch is canonical"),
            input_side: net.input_side,
            dropout_rate: dropout_rate_of(net),
            epoch,
            val_accuracy,
            config_fingerprint: fingerprint.to_string(),
            channel_means: net.channel_means,
            tensors: TensorArchive::from_network(net),
            optim_state: optimizer.state_tensors(),
            optim_steps: optimizer.step_count(),
        }
    }

    /// Rebuilds the architecture and loads the stored tensors into it.
    pub fn restore_network(&self) -> Result<Network> {
        let cfg = ModelConfig {
            arch: self.arch,
            dropout_rate: self.dropout_rate,
            input_side: self.input_side,
            ..ModelConfig::new(self.arch)
        };
        let mut net = cfg.build(0)?;
        net.load_tensors(&self.tensors.tensors)?;
        net.channel_means = self.channel_means;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut archive = self.tensors.clone();
        for (name, data) in &self.optim_state {
            archive.tensors.insert(
                name.clone(),
                ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[data.len()]), data.clone())
                    .unwrap(),
            );
        }
        archive.meta.insert("arch".into(), self.arch.to_string());
        archive
            .meta
            .insert("input_side".into(), self.input_side.to_string());
        archive
            .meta
            .insert("dropout_rate".into(), format!("{}", self.dropout_rate));
        archive.meta.insert("epoch".into(), self.epoch.to_string());
        if let Some(acc) = self.val_accuracy {
            archive.meta.insert("val_accuracy".into(), format!("{acc:.17e}"));
        }
        archive
            .meta
            .insert("fingerprint".into(), self.config_fingerprint.clone());
        archive.meta.insert(
            "channel_means".into(),
            format!(
                "{:.17e},{:.17e},{:.17e}",
                self.channel_means[0], self.channel_means[1], self.channel_means[2]
            ),
        );
        archive
            .meta
            .insert("optim_steps".into(), self.optim_steps.to_string());
        crate::models::save_archive(&archive, path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let archive = crate::models::load_archive(path)?;
        let meta = |key: &str| -> Result<&String> {
            archive
                .meta
                .get(key)
                .ok_or_else(|| Error::parse("checkpoint", format!("missing meta key {key}")))
        };
        let arch: crate::models::Arch = meta("arch")?.parse()?;
        let input_side = meta("input_side")?
            .parse()
            .map_err(|e| Error::parse("checkpoint", format!("input_side: {e}")))?;
        let dropout_rate = meta("dropout_rate")?
            .parse()
            .map_err(|e| Error::parse("checkpoint", format!("dropout_rate: {e}")))?;
        let epoch = meta("epoch")?
            .parse()
            .map_err(|e| Error::parse("checkpoint", format!("epoch: {e}")))?;
        let val_accuracy = match archive.meta.get("val_accuracy") {
            Some(v) => Some(
                v.parse()
                    .map_err(|e| Error::parse("checkpoint", format!("val_accuracy: {e}")))?,
            ),
            None => None,
        };
        let fingerprint = archive.meta.get("fingerprint").cloned().unwrap_or_default();
        let channel_means = {
            let raw = meta("channel_means")?;
            let parts: Vec<f64> = raw
                .split(',')
                .map(|v| v.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse("checkpoint", format!("channel_means: {e}")))?;
            if parts.len() != 3 {
                return Err(Error::parse("checkpoint", "channel_means needs 3 values"));
            }
            [parts[0], parts[1], parts[2]]
        };
        let optim_steps = archive
            .meta
            .get("optim_steps")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        let mut tensors = TensorArchive::default();
        let mut optim_state = Vec::new();
        for (name, t) in archive.tensors {
            if name.starts_with("optim.") {
                optim_state.push((name, t.iter().cloned().collect()));
            } else {
                tensors.tensors.insert(name, t);
            }
        }
        optim_state.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Checkpoint {
            arch,
            input_side,
            dropout_rate,
            epoch,
            val_accuracy,
            config_fingerprint: fingerprint,
            channel_means,
            tensors,
            optim_state,
            optim_steps,
        })
    }
}

fn dropout_rate_of(net: &Network) -> f64 {
    net.layers()
        .iter()
        .find_map(|l| match l {
            crate::nn::Layer::Dropout(d) => Some(d.rate),
            _ => None,
        })
        .unwrap_or(0.0)
}

/// Append-only plain-text run log with UTC ISO-8601 timestamps.
pub struct RunLog {
    file: Option<std::fs::File>,
}

impl RunLog {
    pub fn to_file(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(RunLog { file: Some(file) })
    }

    pub fn quiet() -> Self {
        RunLog { file: None }
    }

    pub fn line(&mut self, msg: &str) {
        log::info!("{msg}");
        if let Some(f) = &mut self.file {
            let stamp = Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true);
            let _ = writeln!(f, "{stamp} {msg}");
        }
    }
}

/// Assembles a batch tensor: the single grayscale channel replicated to
/// three, optional per-item horizontal mirroring drawn in batch order.
fn assemble_batch(
    items: &[&TrainItem],
    side: usize,
    mirror_rng: Option<&mut ChaCha12Rng>,
) -> (Array4<f64>, Vec<usize>, Vec<String>) {
    let mut x = Array4::zeros((items.len(), 3, side, side));
    let mut labels = Vec::with_capacity(items.len());
    let mut ids = Vec::with_capacity(items.len());
    let mut mirror_flags = vec![false; items.len()];
    if let Some(rng) = mirror_rng {
        for flag in mirror_flags.iter_mut() {
            let v: f64 = rng.random();
            *flag = v < 0.5;
        }
    }
    for (i, item) in items.iter().enumerate() {
        assert_eq!(item.pixels.width(), side, "patch side mismatch for {}", item.id);
        labels.push(item.label.class_index());
        ids.push(item.id.clone());
        let w = item.pixels.width();
        for y in 0..side {
            for xx in 0..side {
                let sx = if mirror_flags[i] { w - 1 - xx } else { xx };
                let v = item.pixels.get(sx, y);
                x[(i, 0, y, xx)] = v;
                x[(i, 1, y, xx)] = v;
                x[(i, 2, y, xx)] = v;
            }
        }
    }
    (x, labels, ids)
}

/// Eval-mode accuracy over items, batched; ties predict malignant.
pub fn evaluate_accuracy(net: &mut Network, items: &[TrainItem], batch_size: usize) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let side = net.input_side;
    let mut correct = 0usize;
    let refs: Vec<&TrainItem> = items.iter().collect();
    for batch in refs.chunks(batch_size.max(1)) {
        let (x, labels, _) = assemble_batch(batch, side, None);
        let (_, probs) = net.forward(&x, Mode::Eval, None, false);
        for (row, &label) in probs.axis_iter(ndarray::Axis(0)).zip(&labels) {
            let pred = if row[1] >= row[0] { 1 } else { 0 };
            if pred == label {
                correct += 1;
            }
        }
    }
    correct as f64 / items.len() as f64
}

/// Training set mean intensity, used as the scratch-model input mean.
fn mean_intensity(items: &[TrainItem]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for item in items {
        sum += item.pixels.data().iter().sum::<f64>();
        count += item.pixels.data().len();
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Runs the loop and returns (best checkpoint, last checkpoint, curve).
///
/// Mirroring applies to train batches only. Train batches smaller than
/// two items are skipped (batch statistics need at least two values).
/// A non-finite loss aborts with the iteration, learning rate and batch
/// ids in the error.
pub fn train(
    net: &mut Network,
    train_items: &[TrainItem],
    val_items: &[TrainItem],
    config: &TrainConfig,
    fingerprint: &str,
    log: &mut RunLog,
) -> Result<(Checkpoint, Checkpoint, TrainingCurve)> {
    config.validate()?;
    if train_items.is_empty() {
        return Err(Error::Train("training set is empty".into()));
    }
    let side = net.input_side;

    // the scratch-model input mean comes from the training set; loaded
    // (pretrained) means are left untouched
    if net.channel_means == [0.0; 3] {
        let m = mean_intensity(train_items);
        net.channel_means = [m, m, m];
        log.line(&format!("input mean set from training set: {m:.6}"));
    }

    let mut optimizer = Optimizer::new(
        config.optimizer,
        config.base_lr,
        net,
        config.multipliers.as_ref(),
    )?;
    let mut curve = TrainingCurve {
        group_lrs: optimizer.group_lrs().to_vec(),
        ..TrainingCurve::default()
    };
    for glr in optimizer.group_lrs() {
        log.line(&format!(
            "group {} multiplier {} effective_lr {}",
            glr.group, glr.multiplier, glr.effective_lr
        ));
    }

    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha12Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(2);
    let mut mirror_rng = ChaCha12Rng::seed_from_u64(config.seed);
    mirror_rng.set_stream(3);

    let mut best: Option<Checkpoint> = None;
    let mut iteration = 0u64;

    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch_idx in order.chunks(config.batch_size) {
            let batch: Vec<&TrainItem> = batch_idx.iter().map(|&i| &train_items[i]).collect();
            if batch.len() < 2 {
                log.line(&format!(
                    "epoch {epoch}: skipping a {}-item batch (batch statistics need >= 2)",
                    batch.len()
                ));
                continue;
            }
            iteration += 1;
            let mirror = if config.mirror_at_train {
                Some(&mut mirror_rng)
            } else {
                None
            };
            let (x, labels, ids) = assemble_batch(&batch, side, mirror);
            let (logits, probs) = net.forward(&x, Mode::Train, Some(&mut dropout_rng), true);
            let loss_value = loss::cross_entropy(&logits, &labels);
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration,
                    lr: config.base_lr,
                    batch_ids: ids,
                });
            }
            let acc = loss::batch_accuracy(&probs, &labels);
            net.zero_grads();
            let dlogits = loss::cross_entropy_grad(&logits, &labels);
            net.backward(dlogits);
            optimizer.step(net);
            epoch_loss += loss_value;
            batches += 1;
            curve.iterations.push(IterRecord {
                iteration,
                epoch,
                train_loss: loss_value,
                train_acc: acc,
            });
        }
        if !val_items.is_empty() {
            let val_acc = evaluate_accuracy(net, val_items, config.batch_size);
            curve.val.push((epoch, val_acc));
            let improved = match &best {
                Some(b) => val_acc > b.val_accuracy.unwrap_or(f64::NEG_INFINITY),
                None => true,
            };
            if improved {
                best = Some(Checkpoint::snapshot(
                    net,
                    &optimizer,
                    epoch,
                    Some(val_acc),
                    fingerprint,
                ));
            }
            log.line(&format!(
                "epoch {epoch}: mean_loss {:.6} val_acc {val_acc:.4}",
                epoch_loss / batches.max(1) as f64
            ));
        } else {
            log.line(&format!(
                "epoch {epoch}: mean_loss {:.6}",
                epoch_loss / batches.max(1) as f64
            ));
        }
    }

    let last = Checkpoint::snapshot(
        net,
        &optimizer,
        config.max_epochs.saturating_sub(1),
        curve.val.last().map(|(_, a)| *a),
        fingerprint,
    );
    let best = best.unwrap_or_else(|| last.clone());
    Ok((best, last, curve))
}

// ---------------------------------------------------------------------------
// Run directory
// ---------------------------------------------------------------------------

/// RUNDIR layout written after a training run: `config.snapshot`,
/// `curve.csv`, `val.csv`, `checkpoints/best`, `checkpoints/last`,
/// `model_summary.txt` (`log.txt` accretes during the run).
pub fn write_run_dir(
    dir: &Path,
    snapshot: &str,
    summary: &str,
    best: &Checkpoint,
    last: &Checkpoint,
    curve: &TrainingCurve,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
    std::fs::write(dir.join("config.snapshot"), snapshot)
        .map_err(|e| Error::io(dir.join("config.snapshot"), e))?;
    std::fs::write(dir.join("model_summary.txt"), summary)
        .map_err(|e| Error::io(dir.join("model_summary.txt"), e))?;
    let mut curve_csv = String::from("iter,epoch,train_loss,train_acc\n");
    for r in &curve.iterations {
        curve_csv.push_str(&format!(
            "{},{},{:.9},{:.6}\n",
            r.iteration, r.epoch, r.train_loss, r.train_acc
        ));
    }
    std::fs::write(dir.join("curve.csv"), curve_csv)
        .map_err(|e| Error::io(dir.join("curve.csv"), e))?;
    let mut val_csv = String::from("epoch,val_acc\n");
    for (epoch, acc) in &curve.val {
        val_csv.push_str(&format!("{epoch},{acc:.6}\n"));
    }
    std::fs::write(dir.join("val.csv"), val_csv).map_err(|e| Error::io(dir.join("val.csv"), e))?;
    let best_path = dir.join("checkpoints").join("best");
    best.save(&best_path)?;
    last.save(&dir.join("checkpoints").join("last"))?;
    Ok(best_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_baseline;

    fn constant_item(id: &str, side: usize, value: f64, label: Label) -> TrainItem {
        TrainItem {
            id: id.into(),
            pixels: Raster::from_data(side, side, vec![value; side * side]),
            label,
        }
    }

    fn textured_items(side: usize, n: usize, seed: u64) -> Vec<TrainItem> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Benign } else { Label::Malignant };
                let bias = if label == Label::Malignant { 0.65 } else { 0.35 };
                let data: Vec<f64> = (0..side * side)
                    .map(|_| (bias + rng.random_range(-0.25..0.25f64)).clamp(0.0, 1.0))
                    .collect();
                TrainItem {
                    id: format!("item{i}"),
                    pixels: Raster::from_data(side, side, data),
                    label,
                }
            })
            .collect()
    }

    #[test]
    fn presets_match_the_published_settings() {
        let baseline = preset("baseline").unwrap();
        assert_eq!(baseline.optimizer, OptimizerKind::Adam);
        assert_eq!(baseline.base_lr, 1e-3);
        assert_eq!(baseline.batch_size, 64);
        assert_eq!(baseline.dropout_rate, 0.0);
        assert_eq!(baseline.max_epochs, 35);

        let alexnet = preset("alexnet_ft").unwrap();
        assert_eq!(alexnet.optimizer, OptimizerKind::Adam);
        assert_eq!(alexnet.base_lr, 1e-3);
        assert_eq!(alexnet.dropout_rate, 0.5);
        assert_eq!(alexnet.max_epochs, 30);
        assert!(alexnet.multipliers.is_some());

        let googlenet = preset("googlenet_ft").unwrap();
        assert_eq!(googlenet.optimizer, OptimizerKind::VanillaSgd);
        assert_eq!(googlenet.base_lr, 1e-2);
        assert_eq!(googlenet.dropout_rate, 0.2);
        assert_eq!(googlenet.max_epochs, 30);

        assert!(preset("resnet").is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_weights_and_empty_curve() {
        let mut net = build_baseline(16, 3);
        let mut initial = Vec::new();
        net.visit_params(&mut |p| initial.push(p.values.clone()));
        let items = textured_items(16, 6, 1);
        let config = TrainConfig {
            optimizer: OptimizerKind::Adam,
            base_lr: 1e-3,
            batch_size: 4,
            dropout_rate: 0.0,
            max_epochs: 0,
            seed: 5,
            mirror_at_train: true,
            multipliers: None,
        };
        let (best, _, curve) =
            train(&mut net, &items[..4], &items[4..], &config, "fp", &mut RunLog::quiet()).unwrap();
        assert!(curve.iterations.is_empty());
        assert!(curve.val.is_empty());
        let restored = best.restore_network().unwrap();
        let mut i = 0;
        restored.visit_params(&mut |p| {
            assert_eq!(p.values, initial[i], "weights must be the initial ones");
            i += 1;
        });
    }

    #[test]
    fn training_is_reproducible() {
        let items = textured_items(16, 12, 2);
        let config = TrainConfig {
            optimizer: OptimizerKind::Adam,
            base_lr: 1e-3,
            batch_size: 4,
            dropout_rate: 0.0,
            max_epochs: 2,
            seed: 11,
            mirror_at_train: true,
            multipliers: None,
        };
        let run = || {
            let mut net = build_baseline(16, 7);
            let (_, _, curve) = train(
                &mut net,
                &items[..8],
                &items[8..],
                &config,
                "fp",
                &mut RunLog::quiet(),
            )
            .unwrap();
            curve
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical config/data/seed must give identical curves");
    }

    #[test]
    fn curve_iterations_strictly_increase_and_one_val_per_epoch() {
        let items = textured_items(16, 10, 3);
        let config = TrainConfig {
            optimizer: OptimizerKind::VanillaSgd,
            base_lr: 1e-2,
            batch_size: 4,
            dropout_rate: 0.0,
            max_epochs: 3,
            seed: 2,
            mirror_at_train: false,
            multipliers: None,
        };
        let mut net = build_baseline(16, 1);
        let (_, _, curve) = train(
            &mut net,
            &items[..8],
            &items[8..],
            &config,
            "fp",
            &mut RunLog::quiet(),
        )
        .unwrap();
        for pair in curve.iterations.windows(2) {
            assert!(pair[1].iteration > pair[0].iteration);
        }
        assert_eq!(curve.val.len(), 3);
        let epochs: Vec<usize> = curve.val.iter().map(|(e, _)| *e).collect();
        assert_eq!(epochs, vec![0, 1, 2]);
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_val_accuracy_exactly() {
        let items = textured_items(16, 14, 4);
        let (train_items, val_items) = items.split_at(10);
        let config = TrainConfig {
            optimizer: OptimizerKind::Adam,
            base_lr: 1e-3,
            batch_size: 4,
            dropout_rate: 0.0,
            max_epochs: 3,
            seed: 21,
            mirror_at_train: true,
            multipliers: None,
        };
        let mut net = build_baseline(16, 9);
        let (best, _, _) = train(
            &mut net,
            train_items,
            val_items,
            &config,
            "fp",
            &mut RunLog::quiet(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        best.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let mut restored = loaded.restore_network().unwrap();
        let recomputed = evaluate_accuracy(&mut restored, val_items, config.batch_size);
        assert_eq!(Some(recomputed), loaded.val_accuracy, "exact reproduction");
    }

    #[test]
    fn empty_val_set_returns_final_epoch_checkpoint() {
        let items = textured_items(16, 8, 5);
        let config = TrainConfig {
            optimizer: OptimizerKind::Adam,
            base_lr: 1e-3,
            batch_size: 4,
            dropout_rate: 0.0,
            max_epochs: 2,
            seed: 3,
            mirror_at_train: false,
            multipliers: None,
        };
        let mut net = build_baseline(16, 2);
        let (best, last, curve) =
            train(&mut net, &items, &[], &config, "fp", &mut RunLog::quiet()).unwrap();
        assert!(curve.val.is_empty());
        assert_eq!(best.epoch, last.epoch);
        assert!(best.val_accuracy.is_none());
    }

    #[test]
    fn single_item_batches_are_skipped() {
        // 5 items, batch 4: the trailing single-item batch is skipped
        let items = textured_items(16, 5, 6);
        let config = TrainConfig {
            optimizer: OptimizerKind::Adam,
            base_lr: 1e-3,
            batch_size: 4,
            dropout_rate: 0.0,
            max_epochs: 1,
            seed: 4,
            mirror_at_train: false,
            multipliers: None,
        };
        let mut net = build_baseline(16, 3);
        let (_, _, curve) =
            train(&mut net, &items, &[], &config, "fp", &mut RunLog::quiet()).unwrap();
        assert_eq!(curve.iterations.len(), 1);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let items = textured_items(16, 4, 7);
        let config = TrainConfig {
            optimizer: OptimizerKind::Adam,
            base_lr: 1e-3,
            batch_size: 4,
            dropout_rate: 0.0,
            max_epochs: 1,
            seed: 0,
            mirror_at_train: false,
            multipliers: None,
        };
        let mut net = build_baseline(16, 4);
        // a diverged run leaves non-finite parameters behind; the first
        // loss evaluation must abort with diagnostics
        net.visit_params_mut(&mut |p| {
            if p.name == "fc3.bias" {
                p.values.fill(f64::INFINITY);
            }
        });
        let err = train(&mut net, &items, &[], &config, "fp", &mut RunLog::quiet()).unwrap_err();
        match err {
            Error::NonFiniteLoss { iteration, lr, batch_ids } => {
                assert_eq!(iteration, 1);
                assert_eq!(lr, 1e-3);
                assert_eq!(batch_ids.len(), 4);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn mirroring_applies_only_when_enabled() {
        // with a horizontally asymmetric patch, disabling mirroring keeps
        // batches identical across epochs for SGD at lr 0 equivalent; we
        // check determinism differs between the two settings instead
        let mut left = constant_item("a", 16, 0.2, Label::Benign);
        for y in 0..16 {
            left.pixels.set(0, y, 1.0);
        }
        let items = vec![left, constant_item("b", 16, 0.4, Label::Malignant)];
        let run = |mirror: bool| {
            let mut net = build_baseline(16, 8);
            let config = TrainConfig {
                optimizer: OptimizerKind::VanillaSgd,
                base_lr: 1e-2,
                batch_size: 2,
                dropout_rate: 0.0,
                max_epochs: 4,
                seed: 13,
                mirror_at_train: mirror,
                multipliers: None,
            };
            let (_, _, curve) =
                train(&mut net, &items, &[], &config, "fp", &mut RunLog::quiet()).unwrap();
            curve
        };
        let with_mirror = run(true);
        let without = run(false);
        assert_ne!(
            with_mirror.iterations, without.iterations,
            "mirroring must affect training"
        );
    }
}
