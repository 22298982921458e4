//! The training loop: seeded minibatch shuffling, Adam updates, full-set
//! eval-mode validation after every epoch, and early stopping that returns
//! the last best model.

use super::{adam_step, AdamParams, AdamState, Checkpoint, LossKind, Result, SplitPlan, TrainConfig, TrainError};
use crate::nets::{Network, Task};
use crate::tensor::{Mode, Tape, Tensor, TensorId};
use crate::volume::{preprocess_volume, read_nifti, CohortManifest};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// One subject ready for batching: preprocessed voxels plus its label
/// (sex 0/1 or age in years, by task).
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub subject_id: String,
    pub extent: usize,
    pub data: Vec<f32>,
    pub label: f64,
}

/// Read every manifest volume, apply preprocessing, attach task labels.
pub fn load_dataset(
    manifest: &CohortManifest,
    manifest_path: &Path,
    crop: Option<(usize, usize, usize)>,
    znormalize: bool,
    task: Task,
) -> Result<Vec<TrainItem>> {
    let mut items = Vec::with_capacity(manifest.len());
    for row in &manifest.rows {
        let vol = read_nifti(manifest.resolve_path(manifest_path, row))?;
        let vol = preprocess_volume(&vol, crop, znormalize)?;
        let (d, h, w) = vol.dims;
        if d != h || h != w {
            return Err(TrainError::Config(format!(
                "{}: network input must be cubic, got {:?} (use the crop setting)",
                row.subject_id, vol.dims
            )));
        }
        let label = match task {
            Task::Sex | Task::BinaryGeneric => row.sex as f64,
            Task::Age => row.age,
        };
        items.push(TrainItem { subject_id: row.subject_id.clone(), extent: d, data: vol.data, label });
    }
    Ok(items)
}

fn batch_tensor(items: &[&TrainItem]) -> Tensor<f32> {
    let e = items[0].extent;
    let mut data = Vec::with_capacity(items.len() * e * e * e);
    for item in items {
        data.extend_from_slice(&item.data);
    }
    Tensor::from_vec(vec![items.len(), 1, e, e, e], data).expect("batch dims")
}

fn loss_for(task: Task, requested: Option<LossKind>) -> Result<LossKind> {
    let derived = if task.is_classification() { LossKind::Bce } else { LossKind::Mae };
    match requested {
        None => Ok(derived),
        Some(k) if k == derived => Ok(k),
        Some(k) => Err(TrainError::Config(format!(
            "loss {k:?} is inconsistent with task {task:?} (expected {derived:?})"
        ))),
    }
}

fn loss_node(tape: &mut Tape<f32>, kind: LossKind, out: TensorId, labels: &[f32]) -> crate::tensor::Result<TensorId> {
    match kind {
        LossKind::Bce => tape.bce_with_logits(out, labels),
        LossKind::Mae => tape.mae_loss(out, labels),
    }
}

/// Strict-improvement early stopping.
#[derive(Debug, Clone)]
pub(crate) struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    epochs_since_best: usize,
}

#[derive(Debug, PartialEq, Eq)]
pub(crate) enum StopDecision {
    NewBest,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, epochs_since_best: 0 }
    }

    pub fn observe(&mut self, val_loss: f64) -> StopDecision {
        match self.best {
            Some(best) if val_loss.partial_cmp(&best) != Some(std::cmp::Ordering::Less) => {
                self.epochs_since_best += 1;
                if self.epochs_since_best >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some(val_loss);
                self.epochs_since_best = 0;
                StopDecision::NewBest
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Loss-log CSV: `epoch,train_loss,val_loss`, one row per completed epoch.
pub fn write_loss_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for row in log {
        out.push_str(&format!("{},{:.6},{:.6}\n", row.epoch, row.train_loss, row.val_loss));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Picks up training from a loaded checkpoint, continuing epoch numbering.
#[derive(Debug, Clone)]
pub struct ResumeState {
    pub optimizer: AdamState,
    pub start_epoch: u64,
    pub best_val_loss: f64,
}

pub fn train(
    net: &mut Network<f32>,
    items: &[TrainItem],
    split: &SplitPlan,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_resume(net, items, split, cfg, None)
}

pub fn train_with_resume(
    net: &mut Network<f32>,
    items: &[TrainItem],
    split: &SplitPlan,
    cfg: &TrainConfig,
    resume: Option<ResumeState>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let kind = loss_for(net.config.task(), cfg.loss)?;
    let by_id: BTreeMap<&str, &TrainItem> = items.iter().map(|it| (it.subject_id.as_str(), it)).collect();
    let lookup = |ids: &[String]| -> Result<Vec<&TrainItem>> {
        ids.iter()
            .map(|id| {
                by_id.get(id.as_str()).copied().ok_or_else(|| TrainError::Config(format!("split id {id} not in dataset")))
            })
            .collect()
    };
    let train_items = lookup(&split.train)?;
    let val_items = lookup(&split.val)?;
    if train_items.is_empty() || val_items.is_empty() {
        return Err(TrainError::Config("both split sides must be non-empty".into()));
    }

    let (start_epoch, mut optimizer, prior_best) = match resume {
        Some(r) => (r.start_epoch, r.optimizer, Some(r.best_val_loss)),
        None => (0, AdamState::default(), None),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169);
    let mut stopper = EarlyStopping::new(cfg.patience);
    if let Some(b) = prior_best {
        stopper.observe(b);
    }
    let mut best: Option<(Checkpoint, u64)> = None;
    let mut log = Vec::new();
    let mut stopped_early = false;

    for epoch in start_epoch + 1..=start_epoch + cfg.max_epochs as u64 {
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut rng);
        let mut train_loss_sum = 0.0f64;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| train_items[i]).collect();
            let labels: Vec<f32> = batch.iter().map(|it| it.label as f32).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(batch_tensor(&batch), false);
            let pass = net.forward(&mut tape, x, Mode::Train, &mut rng)?;
            let loss_id = loss_node(&mut tape, kind, pass.output, &labels)?;
            let loss = tape.value(loss_id).as_slice()[0] as f64;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: epoch as usize,
                    batch: batch_idx,
                    context: format!("subjects {:?}", batch.iter().map(|b| &b.subject_id).collect::<Vec<_>>()),
                });
            }
            train_loss_sum += loss * batch.len() as f64;
            let grads_by_id = tape.backward(loss_id)?;
            let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
            for (name, &id) in &pass.param_ids {
                if let Some(g) = grads_by_id.get(id) {
                    grads.insert(name.clone(), g.to_vec());
                }
            }
            drop(tape);
            adam_step(&mut net.params, &grads, &mut optimizer, cfg.learning_rate, AdamParams::default());
        }
        let train_loss = train_loss_sum / train_items.len() as f64;
        let val_loss = eval_loss(net, &val_items, kind, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: epoch as usize,
                batch: usize::MAX,
                context: "validation pass".into(),
            });
        }
        log.push(EpochLog { epoch, train_loss, val_loss });
        match stopper.observe(val_loss) {
            StopDecision::NewBest => {
                best = Some((Checkpoint::from_network(net, epoch, val_loss, Some(optimizer.clone())), epoch));
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    let (checkpoint, _) = best.ok_or_else(|| {
        TrainError::Config("no epoch improved on the resumed best validation loss".into())
    })?;
    Ok(TrainOutcome { checkpoint, log, stopped_early })
}

fn eval_loss(net: &mut Network<f32>, items: &[&TrainItem], kind: LossKind, batch_size: usize) -> Result<f64> {
    let mut sum = 0.0f64;
    for chunk in items.chunks(batch_size) {
        let labels: Vec<f32> = chunk.iter().map(|it| it.label as f32).collect();
        let mut tape = Tape::no_grad();
        let x = tape.leaf(batch_tensor(chunk), false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = net.forward(&mut tape, x, Mode::Eval, &mut rng)?;
        let loss_id = loss_node(&mut tape, kind, pass.output, &labels)?;
        sum += tape.value(loss_id).as_slice()[0] as f64 * chunk.len() as f64;
    }
    Ok(sum / items.len() as f64)
}

/// Eval-mode raw head outputs for every item, in item order.
pub fn predict_outputs(net: &mut Network<f32>, items: &[TrainItem], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainItem> = chunk.iter().collect();
        let mut tape = Tape::no_grad();
        let x = tape.leaf(batch_tensor(&refs), false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = net.forward(&mut tape, x, Mode::Eval, &mut rng)?;
        out.extend(tape.value(pass.output).as_slice().iter().map(|&v| v as f64));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NetConfig;
    use rand::Rng;

    #[test]
    fn early_stopping_examples() {
        // strictly decreasing for 30 epochs with patience 10: never stops
        let mut s = EarlyStopping::new(10);
        for e in 0..30 {
            assert_eq!(s.observe(100.0 - e as f64), StopDecision::NewBest);
        }
        // [5, 4, 4, 4] with patience 2: stops at the fourth observation,
        // best was the second
        let mut s = EarlyStopping::new(2);
        assert_eq!(s.observe(5.0), StopDecision::NewBest);
        assert_eq!(s.observe(4.0), StopDecision::NewBest);
        assert_eq!(s.observe(4.0), StopDecision::Continue);
        assert_eq!(s.observe(4.0), StopDecision::Stop);
    }

    fn tiny_dataset(n: usize, extent: usize, seed: u64) -> Vec<TrainItem> {
        // separable toy volumes: label-1 subjects have a brighter center
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = (i % 2) as f64;
                let data: Vec<f32> = (0..extent * extent * extent)
                    .map(|k| {
                        let center = k == extent * extent * extent / 2;
                        let base: f32 = rng.random_range(-0.2..0.2);
                        base + if center && label > 0.5 { 2.0 } else { 0.0 }
                    })
                    .collect();
                TrainItem { subject_id: format!("s{i:03}"), extent, data, label }
            })
            .collect()
    }

    fn micro_config() -> NetConfig {
        NetConfig::Sfcn { input_extent: 8, channels: vec![2, 3], task: Task::Sex, dropout_p: 0.0 }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let items = tiny_dataset(12, 8, 5);
        let ids: Vec<String> = items.iter().map(|it| it.subject_id.clone()).collect();
        let split = super::super::split_dataset(&ids, 42).unwrap();
        let cfg = TrainConfig { batch_size: 4, learning_rate: 1e-3, max_epochs: 3, patience: 10, loss: None, seed: 42 };
        let run = || {
            let mut net = Network::<f32>::build(micro_config(), 1).unwrap();
            train(&mut net, &items, &split, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn checkpoint_epoch_is_argmin_of_val_series() {
        let items = tiny_dataset(12, 8, 6);
        let ids: Vec<String> = items.iter().map(|it| it.subject_id.clone()).collect();
        let split = super::super::split_dataset(&ids, 1).unwrap();
        let cfg = TrainConfig { batch_size: 4, learning_rate: 1e-3, max_epochs: 6, patience: 3, loss: None, seed: 9 };
        let mut net = Network::<f32>::build(micro_config(), 2).unwrap();
        let out = train(&mut net, &items, &split, &cfg).unwrap();
        let best = out
            .log
            .iter()
            .min_by(|a, b| a.val_loss.partial_cmp(&b.val_loss).unwrap())
            .unwrap();
        assert_eq!(out.checkpoint.epoch, best.epoch);
        assert!((out.checkpoint.best_val_loss - best.val_loss).abs() < 1e-12);
    }

    #[test]
    fn wrong_loss_for_task_rejected() {
        let items = tiny_dataset(6, 8, 7);
        let ids: Vec<String> = items.iter().map(|it| it.subject_id.clone()).collect();
        let split = super::super::split_dataset(&ids, 1).unwrap();
        let cfg = TrainConfig { loss: Some(LossKind::Mae), ..TrainConfig::default() };
        let mut net = Network::<f32>::build(micro_config(), 3).unwrap();
        assert!(matches!(train(&mut net, &items, &split, &cfg), Err(TrainError::Config(_))));
    }

    #[test]
    fn single_step_decreases_single_example_loss() {
        // at lr = 1e-6 a step on one example must not increase its loss;
        // flat subgradient ties allow at most one failure in twenty
        let items = tiny_dataset(20, 8, 11);
        let mut failures = 0;
        for item in &items {
            let mut net = Network::<f32>::build(micro_config(), 31).unwrap();
            let refs = [item];
            let labels = [item.label as f32];
            let loss_before = {
                let mut tape = Tape::new();
                let x = tape.leaf(batch_tensor(&refs), false);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let buffers = net.buffers.clone();
                let pass = net.forward(&mut tape, x, Mode::Train, &mut rng).unwrap();
                let loss_id = tape.bce_with_logits(pass.output, &labels).unwrap();
                let grads_by_id = tape.backward(loss_id).unwrap();
                let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
                for (name, &id) in &pass.param_ids {
                    if let Some(g) = grads_by_id.get(id) {
                        grads.insert(name.clone(), g.to_vec());
                    }
                }
                let before = tape.value(loss_id).as_slice()[0];
                net.buffers = buffers;
                let mut state = AdamState::default();
                adam_step(&mut net.params, &grads, &mut state, 1e-6, AdamParams::default());
                before
            };
            let loss_after = {
                let mut tape = Tape::no_grad();
                let x = tape.leaf(batch_tensor(&refs), false);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let buffers = net.buffers.clone();
                let pass = net.forward(&mut tape, x, Mode::Train, &mut rng).unwrap();
                let loss_id = tape.bce_with_logits(pass.output, &labels).unwrap();
                net.buffers = buffers;
                tape.value(loss_id).as_slice()[0]
            };
            if loss_after >= loss_before {
                failures += 1;
            }
        }
        assert!(failures <= 1, "{failures} of 20 single steps failed to decrease the loss");
    }

    #[test]
    fn resume_continues_epoch_numbering() {
        let items = tiny_dataset(12, 8, 8);
        let ids: Vec<String> = items.iter().map(|it| it.subject_id.clone()).collect();
        let split = super::super::split_dataset(&ids, 3).unwrap();
        let cfg = TrainConfig { batch_size: 4, learning_rate: 1e-3, max_epochs: 2, patience: 10, loss: None, seed: 4 };
        let mut net = Network::<f32>::build(micro_config(), 5).unwrap();
        let first = train(&mut net, &items, &split, &cfg).unwrap();
        let mut resumed_net = first.checkpoint.restore_network(None).unwrap();
        let resume = ResumeState {
            optimizer: first.checkpoint.optimizer.clone().unwrap(),
            start_epoch: first.checkpoint.epoch,
            best_val_loss: first.checkpoint.best_val_loss,
        };
        let second = train_with_resume(&mut resumed_net, &items, &split, &cfg, Some(resume));
        if let Ok(second) = second {
            assert_eq!(second.log[0].epoch, first.checkpoint.epoch + 1);
        }
    }

    #[test]
    fn loss_log_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_log(
            &[
                EpochLog { epoch: 1, train_loss: 0.75, val_loss: 0.8 },
                EpochLog { epoch: 2, train_loss: 0.5, val_loss: 0.6 },
            ],
            &path,
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,train_loss,val_loss\n1,0.750000,0.800000\n2,0.500000,0.600000\n");
    }
}
