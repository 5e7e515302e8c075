//! Passive batch injection: after every `g`-th active mini-batch of an epoch,
//! train on one passive mini-batch. Active steps update the trunk and active
//! head; passive steps update the trunk and passive head. The other head is
//! excluded from the step entirely.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode};
use crate::data::{adapt_dataset, augment_batch, AugmentConfig, BatchIterator, LabeledDataset, Normalization};
use crate::error::{Error, Result};
use crate::metrics::{argmax, evaluate, EvalResult, GapRecord};
use crate::model::{DualHeadNetwork, HeadSpec, ParamId, Partition, StrippedModel, TrunkSpec};
use crate::optim::{LrSchedule, Sgd, SgdConfig};
use crate::rng;
use crate::tensor::Tensor;

/// Losses above this are treated as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e4;

/// Active mini-batches per passive mini-batch. `Never` is the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Injection {
    Every(usize),
    Never,
}

impl Injection {
    pub fn every(g: usize) -> Result<Self> {
        if g == 0 {
            return Err(Error::Config("policy.g must be >= 1 (or inf)".into()));
        }
        Ok(Injection::Every(g))
    }

    /// Whether a passive step follows active batch `i` (1-based).
    pub fn fires_after(self, i: usize) -> bool {
        match self {
            Injection::Every(g) => i > 0 && i % g == 0,
            Injection::Never => false,
        }
    }
}

impl fmt::Display for Injection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Injection::Every(g) => write!(f, "{g}"),
            Injection::Never => f.write_str("inf"),
        }
    }
}

impl FromStr for Injection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "never" | "none" => Ok(Injection::Never),
            t => {
                let g: usize = t
                    .parse()
                    .map_err(|_| Error::Config(format!("policy.g: expected a positive integer or inf, got {t:?}")))?;
                Injection::every(g)
            }
        }
    }
}

impl From<Injection> for String {
    fn from(g: Injection) -> String {
        g.to_string()
    }
}

impl TryFrom<String> for Injection {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionPolicy {
    pub g: Injection,
    pub active_batch: usize,
    pub passive_batch: usize,
}

impl Default for InjectionPolicy {
    fn default() -> Self {
        InjectionPolicy {
            g: Injection::Every(100),
            active_batch: 128,
            passive_batch: 128,
        }
    }
}

impl InjectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if let Injection::Every(0) = self.g {
            return Err(Error::Config("policy.g must be >= 1 (or inf)".into()));
        }
        if self.active_batch == 0 || self.passive_batch == 0 {
            return Err(Error::Config("policy batch sizes must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// 1-based index of the active batch within the epoch.
    Active(usize),
    /// 1-based index of the passive batch within the epoch.
    Passive(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPlan {
    pub steps: Vec<Step>,
}

impl StepPlan {
    pub fn active_count(&self) -> usize {
        self.steps.iter().filter(|s| matches!(s, Step::Active(_))).count()
    }

    pub fn passive_count(&self) -> usize {
        self.steps.len() - self.active_count()
    }
}

/// One epoch of steps. The counter restarts every epoch and a passive step
/// follows active batch `i` exactly when `i % g == 0`.
pub fn plan_epoch(num_active_batches: usize, g: Injection) -> StepPlan {
    let mut steps = Vec::with_capacity(num_active_batches + num_active_batches / 2);
    let mut j = 0;
    for i in 1..=num_active_batches {
        steps.push(Step::Active(i));
        if g.fires_after(i) {
            j += 1;
            steps.push(Step::Passive(j));
        }
    }
    StepPlan { steps }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

fn step_on(
    net: &mut DualHeadNetwork<f32>,
    batch: &Tensor<f32>,
    labels: &[usize],
    opt: &mut Sgd<f32>,
    lr: f64,
    head: Partition,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let logits = match head {
        Partition::Active => net.forward_active(&mut g, batch, Mode::Train)?,
        Partition::Passive => net.forward_passive(&mut g, batch, Mode::Train)?,
        Partition::Trunk => return Err(Error::Usage("steps run on a head".into())),
    };
    let loss_var = g.softmax_cross_entropy(logits, labels)?;
    let loss = g.scalar(loss_var) as f64;
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(Error::Diverged { epoch: 0, step: 0, loss });
    }
    let k = g.shape(logits)[1];
    let correct = g
        .value(logits)
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    let grads = g.backward(loss_var)?;
    net.params_mut().accumulate(&grads);
    let subset: Vec<ParamId> = net.params().ids_in(&[Partition::Trunk, head]);
    opt.step(net.params_mut(), &subset, lr)?;
    Ok(StepStats {
        loss,
        correct,
        count: labels.len(),
    })
}

/// Forward/backward on an active batch, then SGD over trunk and active head.
/// The passive head and its momentum buffers are not touched.
pub fn train_step_active(
    net: &mut DualHeadNetwork<f32>,
    batch: &Tensor<f32>,
    labels: &[usize],
    opt: &mut Sgd<f32>,
    lr: f64,
) -> Result<StepStats> {
    step_on(net, batch, labels, opt, lr, Partition::Active)
}

/// Forward/backward on a passive batch, then SGD over trunk and passive head.
/// The active head is not touched; trunk BN running statistics are updated.
pub fn train_step_passive(
    net: &mut DualHeadNetwork<f32>,
    batch: &Tensor<f32>,
    labels: &[usize],
    opt: &mut Sgd<f32>,
    lr: f64,
) -> Result<StepStats> {
    step_on(net, batch, labels, opt, lr, Partition::Passive)
}

/// Everything about a training run except the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub trunk_widths: Vec<usize>,
    pub active_hidden: Vec<usize>,
    pub passive_hidden: Vec<usize>,
    pub policy: InjectionPolicy,
    pub sgd: SgdConfig,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub passive_augment: bool,
    pub passive_bn_update: bool,
    pub eval_batch: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            trunk_widths: vec![32, 64, 128, 128],
            active_hidden: Vec::new(),
            passive_hidden: Vec::new(),
            policy: InjectionPolicy::default(),
            sgd: SgdConfig::default(),
            schedule: LrSchedule::default(),
            epochs: 250,
            seed: 1,
            augment: AugmentConfig::default(),
            passive_augment: true,
            passive_bn_update: true,
            eval_batch: 256,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.schedule.validate()?;
        if self.trunk_widths.is_empty() || self.trunk_widths.contains(&0) {
            return Err(Error::Config("model.trunk_widths must be non-empty and positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if !(self.sgd.momentum >= 0.0 && self.sgd.momentum < 1.0) {
            return Err(Error::Config(format!("optimizer.momentum must be in [0, 1), got {}", self.sgd.momentum)));
        }
        if !(self.sgd.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer.weight_decay must be >= 0".into()));
        }
        if self.policy.active_batch < 2 || self.policy.passive_batch < 2 {
            return Err(Error::Config("policy batch sizes must be >= 2 (batch norm needs batch statistics)".into()));
        }
        Ok(())
    }

    pub fn trunk(&self, input: [usize; 3]) -> TrunkSpec {
        TrunkSpec::with_widths(input, &self.trunk_widths)
    }
}

/// Datasets ready for training: passive images resized to the active shape
/// and one normalization, fitted on the active training split, for all of
/// them.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub active_train: LabeledDataset,
    pub active_test: LabeledDataset,
    pub passive: Option<LabeledDataset>,
    pub norm: Normalization,
}

impl PreparedData {
    pub fn new(
        active_train: LabeledDataset,
        active_test: LabeledDataset,
        passive: Option<LabeledDataset>,
    ) -> Result<Self> {
        if active_train.image_shape() != active_test.image_shape() {
            return Err(Error::dim(
                "active train/test images",
                &active_train.image_shape(),
                &active_test.image_shape(),
            ));
        }
        if active_train.classes != active_test.classes {
            return Err(Error::Config(format!(
                "active train has {} classes but test has {}",
                active_train.classes, active_test.classes
            )));
        }
        let target = active_train.image_shape();
        let passive = passive.map(|p| adapt_dataset(&p, target)).transpose()?;
        let norm = Normalization::fit(&active_train.images);
        Ok(PreparedData {
            active_train,
            active_test,
            passive,
            norm,
        })
    }
}

/// One line of the history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub active_steps: usize,
    pub passive_steps: usize,
    pub train_loss: f64,
    /// Running accuracy on the (augmented) training batches of this epoch.
    pub train_acc: f64,
    pub test_acc: f64,
    pub test_loss: f64,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub seed: u64,
    pub g: Injection,
    pub active_batches_per_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    /// Clean eval-mode accuracies of the final model.
    pub final_gap: Option<GapRecord>,
}

pub const HISTORY_FORMAT: &str = "pbitt-history";
pub const HISTORY_VERSION: u32 = 1;

#[derive(Serialize)]
struct HistoryHeader<'a> {
    format: &'a str,
    version: u32,
    seed: u64,
    g: Injection,
    active_batches_per_epoch: usize,
}

#[derive(Serialize)]
struct HistoryFooter {
    total_active_steps: usize,
    total_passive_steps: usize,
    final_train_acc: f64,
    final_test_acc: f64,
    final_gap: f64,
}

impl TrainHistory {
    pub fn total_active_steps(&self) -> usize {
        self.epochs.iter().map(|e| e.active_steps).sum()
    }

    pub fn total_passive_steps(&self) -> usize {
        self.epochs.iter().map(|e| e.passive_steps).sum()
    }

    /// Line-delimited JSON: a header line, one line per epoch, and a footer
    /// line once the run completed. Wall-clock times are excluded so reruns
    /// produce identical bytes.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = HistoryHeader {
            format: HISTORY_FORMAT,
            version: HISTORY_VERSION,
            seed: self.seed,
            g: self.g,
            active_batches_per_epoch: self.active_batches_per_epoch,
        };
        out.push_str(&serde_json::to_string(&header).expect("serializable"));
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("serializable"));
            out.push('\n');
        }
        if let Some(gap) = self.final_gap {
            let footer = HistoryFooter {
                total_active_steps: self.total_active_steps(),
                total_passive_steps: self.total_passive_steps(),
                final_train_acc: gap.train_acc,
                final_test_acc: gap.test_acc,
                final_gap: gap.gap,
            };
            out.push_str(&serde_json::to_string(&footer).expect("serializable"));
            out.push('\n');
        }
        out
    }

    /// Parses the output of [`TrainHistory::to_jsonl`].
    pub fn from_jsonl(text: &str) -> std::result::Result<Self, String> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
            seed: u64,
            g: Injection,
            active_batches_per_epoch: usize,
        }
        #[derive(Deserialize)]
        struct Footer {
            final_train_acc: f64,
            final_test_acc: f64,
        }
        let mut lines = text.lines().filter(|l| !l.trim().is_empty()).enumerate();
        let (_, first) = lines.next().ok_or("empty history")?;
        let h: Header = serde_json::from_str(first).map_err(|e| format!("line 1: {e}"))?;
        if h.format != HISTORY_FORMAT || h.version != HISTORY_VERSION {
            return Err(format!("unsupported history {} v{}", h.format, h.version));
        }
        let mut history = TrainHistory {
            seed: h.seed,
            g: h.g,
            active_batches_per_epoch: h.active_batches_per_epoch,
            epochs: Vec::new(),
            final_gap: None,
        };
        for (i, line) in lines {
            if history.final_gap.is_some() {
                return Err(format!("line {}: content after the final record", i + 1));
            }
            if let Ok(e) = serde_json::from_str::<EpochRecord>(line) {
                history.epochs.push(e);
            } else {
                let f: Footer = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
                history.final_gap = Some(GapRecord::new(f.final_train_acc, f.final_test_acc));
            }
        }
        Ok(history)
    }

    /// Per-epoch wall-clock seconds, one JSON object per line.
    pub fn timings_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| format!("{{\"epoch\":{},\"wall_clock_secs\":{}}}\n", e.epoch, e.wall_clock_secs))
            .collect()
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: StrippedModel<f32>,
    pub history: TrainHistory,
    pub final_test: EvalResult,
    pub final_train: EvalResult,
}

/// A failed run together with everything recorded before the failure.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub history: Option<TrainHistory>,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        TrainFailure { error, history: None }
    }
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Reported to observers after each executed step.
#[derive(Debug, Clone, Copy)]
pub struct StepEvent {
    pub epoch: usize,
    pub index: usize,
    pub step: Step,
    pub stats: StepStats,
}

/// Stateful driver for one training run.
pub struct Trainer<'d> {
    settings: TrainSettings,
    data: &'d PreparedData,
    net: DualHeadNetwork<f32>,
    opt: Sgd<f32>,
    active_iter: BatchIterator,
    active_aug: ChaCha8Rng,
    passive_iter: Option<BatchIterator>,
    passive_aug: ChaCha8Rng,
    history: TrainHistory,
    global_step: usize,
}

impl<'d> Trainer<'d> {
    /// Builds the network (dual-head when passive data is present, otherwise
    /// the single-head baseline) and all random streams.
    pub fn new(settings: TrainSettings, data: &'d PreparedData) -> Result<Self> {
        settings.validate()?;
        if settings.policy.g != Injection::Never && data.passive.is_none() {
            return Err(Error::Config("policy.g is finite but no passive dataset is configured".into()));
        }
        let input = data.active_train.image_shape();
        settings.augment.validate(input[1], input[2])?;
        let trunk = settings.trunk(input);
        let active = HeadSpec {
            hidden: settings.active_hidden.clone(),
            classes: data.active_train.classes,
        };
        let net = match &data.passive {
            Some(p) => {
                let passive = HeadSpec {
                    hidden: settings.passive_hidden.clone(),
                    classes: p.classes,
                };
                DualHeadNetwork::build(&trunk, &active, &passive, settings.seed)?
            }
            None => DualHeadNetwork::single_head(&trunk, &active, settings.seed)?,
        };
        let seed = settings.seed;
        let active_iter = BatchIterator::new(
            data.active_train.len(),
            settings.policy.active_batch,
            true,
            rng::stream(seed, rng::ACTIVE_SHUFFLE),
        )?;
        if active_iter.batches_per_epoch() == 0 {
            return Err(Error::Config(format!(
                "active batch size {} exceeds the {} training samples",
                settings.policy.active_batch,
                data.active_train.len()
            )));
        }
        let passive_iter = data
            .passive
            .as_ref()
            .map(|p| {
                BatchIterator::new(
                    p.len(),
                    settings.policy.passive_batch,
                    false,
                    rng::stream(seed, rng::PASSIVE_SHUFFLE),
                )
            })
            .transpose()?;
        let history = TrainHistory {
            seed,
            g: settings.policy.g,
            active_batches_per_epoch: active_iter.batches_per_epoch(),
            epochs: Vec::new(),
            final_gap: None,
        };
        Ok(Trainer {
            opt: Sgd::new(settings.sgd),
            settings,
            data,
            net,
            active_iter,
            active_aug: rng::stream(seed, rng::ACTIVE_AUGMENT),
            passive_iter,
            passive_aug: rng::stream(seed, rng::PASSIVE_AUGMENT),
            history,
            global_step: 0,
        })
    }

    pub fn net(&self) -> &DualHeadNetwork<f32> {
        &self.net
    }

    pub fn optimizer(&self) -> &Sgd<f32> {
        &self.opt
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn settings(&self) -> &TrainSettings {
        &self.settings
    }

    pub fn epochs_done(&self) -> usize {
        self.history.epochs.len()
    }

    fn batch(
        ds: &LabeledDataset,
        indices: &[usize],
        augment: Option<(&AugmentConfig, &mut ChaCha8Rng)>,
        norm: &Normalization,
    ) -> Result<(Tensor<f32>, Vec<usize>)> {
        let (x, labels) = ds.gather(indices);
        let mut x = match augment {
            Some((cfg, r)) => augment_batch(&x, cfg, r)?,
            None => x,
        };
        norm.apply(&mut x);
        Ok((x, labels))
    }

    fn passive_step(&mut self, lr: f64) -> Result<StepStats> {
        let ds = self.data.passive.as_ref().expect("passive steps need passive data");
        let indices = self
            .passive_iter
            .as_mut()
            .expect("passive iterator exists with passive data")
            .next_cyclic();
        let augment = self.settings.passive_augment.then_some((&self.settings.augment, &mut self.passive_aug));
        let (x, labels) = Self::batch(ds, &indices, augment, &self.data.norm)?;
        let saved_bn = (!self.settings.passive_bn_update).then(|| self.net.bn_states().to_vec());
        let stats = train_step_passive(&mut self.net, &x, &labels, &mut self.opt, lr)?;
        if let Some(saved) = saved_bn {
            self.net.restore_bn_states(saved);
        }
        Ok(stats)
    }

    /// Runs the next epoch, calling `observer` after every step.
    pub fn run_epoch(&mut self, observer: &mut dyn FnMut(&StepEvent, &Trainer<'_>)) -> Result<&EpochRecord> {
        let start = Instant::now();
        let epoch = self.history.epochs.len();
        let lr = self.settings.schedule.lr_at(epoch);
        let batches = self.active_iter.epoch();
        let plan = plan_epoch(batches.len(), self.settings.policy.g);
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for (index, &step) in plan.steps.iter().enumerate() {
            let result = match step {
                Step::Active(i) => {
                    let augment = Some((&self.settings.augment, &mut self.active_aug));
                    Self::batch(&self.data.active_train, &batches[i - 1], augment, &self.data.norm)
                        .and_then(|(x, labels)| train_step_active(&mut self.net, &x, &labels, &mut self.opt, lr))
                }
                Step::Passive(_) => self.passive_step(lr),
            };
            self.global_step += 1;
            let stats = result.map_err(|e| match e {
                Error::Diverged { loss, .. } => Error::Diverged {
                    epoch,
                    step: self.global_step,
                    loss,
                },
                other => other,
            })?;
            if let Step::Active(_) = step {
                loss_sum += stats.loss;
                correct += stats.correct;
                seen += stats.count;
            }
            observer(
                &StepEvent {
                    epoch,
                    index,
                    step,
                    stats,
                },
                self,
            );
        }
        let test = evaluate(&self.net, &self.data.active_test, &self.data.norm, self.settings.eval_batch)?;
        let active_steps = plan.active_count();
        self.history.epochs.push(EpochRecord {
            epoch,
            lr,
            active_steps,
            passive_steps: plan.passive_count(),
            train_loss: loss_sum / active_steps as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc: test.top1,
            test_loss: test.mean_loss,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: lr {lr:.4} loss {:.4} train {:.4} test {:.4}",
            loss_sum / active_steps as f64,
            correct as f64 / seen as f64,
            test.top1
        );
        Ok(self.history.epochs.last().expect("just pushed"))
    }

    /// Clean accuracies on the training and test splits, then strips the
    /// passive head.
    pub fn finish(mut self) -> Result<TrainOutcome> {
        let eb = self.settings.eval_batch;
        let final_train = evaluate(&self.net, &self.data.active_train, &self.data.norm, eb)?;
        let final_test = evaluate(&self.net, &self.data.active_test, &self.data.norm, eb)?;
        self.history.final_gap = Some(GapRecord::new(final_train.top1, final_test.top1));
        Ok(TrainOutcome {
            model: self.net.strip_passive_head(),
            history: self.history,
            final_test,
            final_train,
        })
    }
}

/// Runs every epoch and strips the passive head. A diverged run comes back
/// with the history recorded up to the failing epoch.
pub fn train_prepared(settings: &TrainSettings, data: &PreparedData) -> Result<TrainOutcome, TrainFailure> {
    train_observed(settings, data, &mut |_, _| {})
}

pub fn train_observed(
    settings: &TrainSettings,
    data: &PreparedData,
    observer: &mut dyn FnMut(&StepEvent, &Trainer<'_>),
) -> Result<TrainOutcome, TrainFailure> {
    let mut trainer = Trainer::new(settings.clone(), data)?;
    for _ in 0..settings.epochs {
        if let Err(error) = trainer.run_epoch(observer) {
            return Err(TrainFailure {
                error,
                history: Some(trainer.history.clone()),
            });
        }
    }
    Ok(trainer.finish()?)
}
