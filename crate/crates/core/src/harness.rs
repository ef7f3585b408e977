//! Optimization, scheduling, metrics, training and the evaluation protocol.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::data::{stack_batch, Dataset, Label, Sample};
use crate::error::{Error, Result};
use crate::fusion::{Model, Task};
use crate::params::{Forward, ParamStore};
use crate::rng::{label, Rng};
use crate::robustness::{apply_mode, apply_test_setting, assign_modes, DropoutPolicy, DropoutVariant, TestSetting};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// SGD with momentum and coupled weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self, index: usize) -> Option<&[f64]> {
        self.velocity.get(index)?.as_deref()
    }

    /// One update of every trainable entry. `grads` is indexed like the
    /// store; a missing gradient counts as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape("sgd_step", &[grads.len()], &[store.len()]));
        }
        for ((_, p), g) in store.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != p.value.numel() {
                    return Err(Error::shape("sgd_step", &[g.len()], p.value.shape()));
                }
            }
        }
        self.velocity.resize(store.len(), None);
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let i = id.index();
            let w = store.get_mut(id).data_mut();
            let v = self.velocity[i].get_or_insert_with(|| vec![0.0; w.len()]);
            let g = grads[i].as_deref();
            for j in 0..w.len() {
                let gj = g.map_or(0.0, |g| g[j]) + self.weight_decay * w[j];
                v[j] = self.momentum * v[j] + gj;
                w[j] -= self.lr * v[j];
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlateauMode {
    /// Higher metric is better.
    Max,
    Min,
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub mode: PlateauMode,
    pub patience: usize,
    pub factor: f64,
    /// Absolute margin a metric must beat the best by to count as progress.
    pub tol: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(mode: PlateauMode, patience: usize, factor: f64, tol: f64) -> Self {
        Plateau {
            mode,
            patience,
            factor,
            tol,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn bad_epochs(&self) -> usize {
        self.bad_epochs
    }

    /// Feeds one epoch's metric and returns the learning rate to use next.
    pub fn step(&mut self, metric: f64, lr: f64) -> f64 {
        let improved = match (self.best, self.mode) {
            (None, _) => true,
            (Some(b), PlateauMode::Max) => metric > b + self.tol,
            (Some(b), PlateauMode::Min) => metric < b - self.tol,
        };
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            return lr * self.factor;
        }
        lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MetricKind {
    Accuracy,
    /// Sign agreement, zero labels excluded.
    BinaryAccuracy,
    Mae,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "acc",
            MetricKind::BinaryAccuracy => "acc2",
            MetricKind::Mae => "mae",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [MetricKind::Accuracy, MetricKind::BinaryAccuracy, MetricKind::Mae]
            .into_iter()
            .find(|k| k.name() == s)
    }

    pub fn higher_is_better(self) -> bool {
        self != MetricKind::Mae
    }

    pub fn for_task(task: Task) -> &'static [MetricKind] {
        match task {
            Task::Classification { .. } => &[MetricKind::Accuracy],
            Task::Regression => &[MetricKind::BinaryAccuracy, MetricKind::Mae],
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `logits: [B, C]` whose first maximal entry is the label.
pub fn categorical_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("categorical_accuracy", s, &[labels.len()]));
    }
    if labels.is_empty() {
        return Err(Error::Empty("categorical_accuracy"));
    }
    let hits = logits
        .data()
        .chunks(s[1])
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

fn check_lengths(op: &'static str, preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::shape(op, &[preds.len()], &[labels.len()]));
    }
    if preds.is_empty() {
        return Err(Error::Empty(op));
    }
    Ok(())
}

/// Positive-versus-negative agreement, with `pred > 0` read as positive.
/// Returns the accuracy and the number of non-zero labels it was computed on.
pub fn binary_accuracy(preds: &[f64], labels: &[f64]) -> Result<(f64, usize)> {
    check_lengths("binary_accuracy", preds, labels)?;
    let mut n = 0;
    let mut hits = 0;
    for (&p, &y) in preds.iter().zip(labels) {
        if y == 0.0 {
            continue;
        }
        n += 1;
        if (p > 0.0) == (y > 0.0) {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("binary_accuracy: every label is zero"));
    }
    Ok((hits as f64 / n as f64, n))
}

pub fn mean_absolute_error(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths("mean_absolute_error", preds, labels)?;
    Ok(preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / preds.len() as f64)
}

/// Arithmetic mean of three setting values, the `M` column.
pub fn mean3(a: f64, b: f64, c: f64) -> f64 {
    (a + b + c) / 3.0
}

/// One metric evaluated under several test settings.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub name: String,
    pub kind: MetricKind,
    pub values: Vec<(TestSetting, f64)>,
}

impl EvalReport {
    pub fn get(&self, setting: TestSetting) -> Option<f64> {
        self.values.iter().find(|(s, _)| *s == setting).map(|&(_, v)| v)
    }

    fn mean_of(&self, s: [TestSetting; 3]) -> Option<f64> {
        Some(mean3(self.get(s[0])?, self.get(s[1])?, self.get(s[2])?))
    }

    /// Mean over AV, A and V.
    pub fn m(&self) -> Option<f64> {
        self.mean_of([TestSetting::AV, TestSetting::A, TestSetting::V])
    }

    /// Mean over AV, NoiseA and NoiseV.
    pub fn m_noise(&self) -> Option<f64> {
        self.mean_of([TestSetting::AV, TestSetting::NoiseA, TestSetting::NoiseV])
    }
}

const CSV_COLUMNS: [&str; 9] = ["name", "metric", "AV", "A", "V", "M", "NA", "NV", "M_noise"];

fn row_cells(r: &EvalReport) -> [Option<f64>; 7] {
    [
        r.get(TestSetting::AV),
        r.get(TestSetting::A),
        r.get(TestSetting::V),
        r.m(),
        r.get(TestSetting::NoiseA),
        r.get(TestSetting::NoiseV),
        r.m_noise(),
    ]
}

/// Reports rendered for display and for machines.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    /// Aligned columns, values rounded to two decimals.
    pub text: String,
    /// Full-precision CSV with a fixed header.
    pub csv: String,
}

pub fn report_table(reports: &[EvalReport]) -> Result<ReportTable> {
    if reports.is_empty() {
        return Err(Error::Empty("report_table"));
    }
    let rows: Vec<[Option<f64>; 7]> = reports.iter().map(row_cells).collect();
    let mut csv = String::new();
    csv.push_str(&CSV_COLUMNS.join(","));
    csv.push('\n');
    for (r, cells) in reports.iter().zip(&rows) {
        let _ = write!(csv, "{},{}", r.name, r.kind.name());
        for c in cells {
            csv.push(',');
            if let Some(v) = c {
                let _ = write!(csv, "{v}");
            }
        }
        csv.push('\n');
    }

    // text view: drop value columns that are empty in every row
    let keep: Vec<usize> = (0..7).filter(|&j| rows.iter().any(|r| r[j].is_some())).collect();
    let mut grid: Vec<Vec<String>> = Vec::with_capacity(reports.len() + 1);
    let mut header = vec![String::from("model"), String::from("metric")];
    header.extend(keep.iter().map(|&j| CSV_COLUMNS[j + 2].to_string()));
    grid.push(header);
    for (r, cells) in reports.iter().zip(&rows) {
        let mut line = vec![r.name.clone(), r.kind.name().to_string()];
        line.extend(keep.iter().map(|&j| cells[j].map_or_else(|| String::from("-"), |v| format!("{v:.2}"))));
        grid.push(line);
    }
    let widths: Vec<usize> = (0..grid[0].len())
        .map(|j| grid.iter().map(|l| l[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for line in &grid {
        for (j, cell) in line.iter().enumerate() {
            if j > 0 {
                text.push_str("  ");
            }
            if j < 2 {
                let _ = write!(text, "{cell:<w$}", w = widths[j]);
            } else {
                let _ = write!(text, "{cell:>w$}", w = widths[j]);
            }
        }
        let trimmed = text.trim_end().len();
        text.truncate(trimmed);
        text.push('\n');
    }
    Ok(ReportTable { text, csv })
}

/// Parses CSV written by [`report_table`]. Derived `M` columns are
/// recomputed from the setting values rather than read back.
pub fn parse_report_csv(csv: &str) -> Result<Vec<EvalReport>> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or(Error::Empty("report csv"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != CSV_COLUMNS {
        return Err(Error::invalid("report csv", format!("unexpected header `{header}`")));
    }
    let settings = [
        (2, TestSetting::AV),
        (3, TestSetting::A),
        (4, TestSetting::V),
        (6, TestSetting::NoiseA),
        (7, TestSetting::NoiseV),
    ];
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != CSV_COLUMNS.len() {
            return Err(Error::invalid("report csv", format!("row {} has {} cells", n + 1, cells.len())));
        }
        let kind = MetricKind::parse(cells[1])
            .ok_or_else(|| Error::invalid("report csv", format!("unknown metric `{}`", cells[1])))?;
        let mut values = Vec::new();
        for (j, s) in settings {
            if cells[j].is_empty() {
                continue;
            }
            let v: f64 = cells[j]
                .parse()
                .map_err(|_| Error::invalid("report csv", format!("bad number `{}` in row {}", cells[j], n + 1)))?;
            values.push((s, v));
        }
        out.push(EvalReport {
            name: cells[0].to_string(),
            kind,
            values,
        });
    }
    Ok(out)
}

/// Loss of a batch: mean cross-entropy over logits or mean absolute error.
pub fn task_loss(tape: &mut Tape, output: Var, labels: &[Label], task: Task) -> Result<Var> {
    match task {
        Task::Classification { .. } => {
            let ys: Vec<usize> = labels
                .iter()
                .map(|l| l.class().ok_or(Error::invalid("task_loss", "score label in a classification task")))
                .collect::<Result<_>>()?;
            tape.cross_entropy(output, &ys)
        }
        Task::Regression => {
            let ys: Vec<f64> = labels
                .iter()
                .map(|l| l.score().ok_or(Error::invalid("task_loss", "class label in a regression task")))
                .collect::<Result<_>>()?;
            tape.l1_loss(output, &ys)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub factor: f64,
    pub tol: f64,
    pub policy: DropoutPolicy,
    /// Settings averaged into the validation metric.
    pub val_settings: Vec<TestSetting>,
    pub seed: u64,
}

/// Validation settings matched to what a dropout variant trains for.
pub fn default_val_settings(variant: DropoutVariant) -> Vec<TestSetting> {
    match variant {
        DropoutVariant::None => vec![TestSetting::AV],
        DropoutVariant::HardZero | DropoutVariant::Soft => vec![TestSetting::AV, TestSetting::A, TestSetting::V],
        DropoutVariant::Noise => vec![TestSetting::AV, TestSetting::NoiseA, TestSetting::NoiseV],
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            lr: 0.04,
            momentum: 0.9,
            weight_decay: 1e-3,
            patience: 10,
            factor: 0.1,
            tol: 1e-4,
            policy: DropoutPolicy::default(),
            val_settings: vec![TestSetting::AV],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("TrainConfig", "batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("TrainConfig", "lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("TrainConfig", "momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("TrainConfig", "weight_decay must be non-negative"));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::invalid("TrainConfig", "plateau factor must lie in (0, 1)"));
        }
        if self.val_settings.is_empty() {
            return Err(Error::Empty("TrainConfig: validation settings"));
        }
        if self.patience == 0 || self.tol.is_nan() || self.tol < 0.0 {
            return Err(Error::invalid("TrainConfig", "patience must be positive and tol non-negative"));
        }
        self.policy.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation metric averaged over the configured settings; NaN without
    /// a validation split.
    pub val_metric: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
}

/// Metric used for model selection and scheduling.
pub fn selection_metric(task: Task) -> MetricKind {
    match task {
        Task::Classification { .. } => MetricKind::Accuracy,
        Task::Regression => MetricKind::Mae,
    }
}

/// Trains in place. With a validation split the parameters of the best
/// validation epoch are restored at the end; without one the last epoch
/// is kept. `on_epoch` sees every record as it is produced.
pub fn train(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let task = model.config.task;
    if ds.task != task {
        return Err(Error::invalid("train", "dataset and model tasks differ"));
    }
    let mut outcome = TrainOutcome {
        history: Vec::new(),
        best_epoch: None,
        best_metric: None,
    };
    if cfg.epochs == 0 {
        return Ok(outcome);
    }
    if ds.train.is_empty() {
        return Err(Error::Empty("train: training split"));
    }
    let sel = selection_metric(task);
    let mode = if sel.higher_is_better() {
        PlateauMode::Max
    } else {
        PlateauMode::Min
    };
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut plateau = Plateau::new(mode, cfg.patience, cfg.factor, cfg.tol);
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut order: Vec<usize> = (0..ds.train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let lr = sgd.lr;
        Rng::derive(cfg.seed, &[label::SHUFFLE, epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mode_seed = Rng::derive(cfg.seed, &[label::MODES, epoch as u64, b as u64]).next_u64();
            let modes = assign_modes(chunk.len(), &cfg.policy, mode_seed)?;
            let mut batch = Vec::with_capacity(chunk.len());
            for (k, (&i, &m)) in chunk.iter().zip(&modes).enumerate() {
                let noise_seed = Rng::derive(cfg.seed, &[label::TRANSFORM, epoch as u64, b as u64, k as u64]).next_u64();
                batch.push(apply_mode(&ds.train[i], m, noise_seed)?);
            }
            let refs: Vec<&Sample> = batch.iter().collect();
            let (audio, vision) = stack_batch(&refs)?;
            let labels: Vec<Label> = batch.iter().map(|s| s.label).collect();

            let mut tape = Tape::new();
            let (loss, vars, updates) = {
                let mut f = Forward::new(&mut tape, &model.params, true, true);
                let a = f.tape.constant(audio);
                let v = f.tape.constant(vision);
                let out = model.forward(&mut f, a, v)?;
                let loss = task_loss(f.tape, out.output, &labels, task)?;
                let vars = f.vars().to_vec();
                (loss, vars, f.into_updates())
            };
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite { epoch, batch: b, value });
            }
            loss_sum += value * chunk.len() as f64;
            let mut grads = tape.backward(loss)?;
            let per_param: Vec<Option<Vec<f64>>> = vars.iter().map(|&v| grads.take(v)).collect();
            sgd.step(&mut model.params, &per_param)?;
            model.params.apply_updates(updates);
        }
        let train_loss = loss_sum / ds.train.len() as f64;
        let val_metric = if ds.val.is_empty() {
            f64::NAN
        } else {
            let mut total = 0.0;
            for &s in &cfg.val_settings {
                total += evaluate_metric(model, &ds.val, s, sel, cfg.seed)?;
            }
            total / cfg.val_settings.len() as f64
        };
        if !ds.val.is_empty() {
            let better = match &best {
                None => true,
                Some((b, _, _)) => {
                    if sel.higher_is_better() {
                        val_metric > *b
                    } else {
                        val_metric < *b
                    }
                }
            };
            if better {
                best = Some((val_metric, model.params.clone(), epoch));
            }
        }
        let scheduled = if ds.val.is_empty() { train_loss } else { val_metric };
        // without validation the loss drives the schedule, lower is better
        let next_lr = if ds.val.is_empty() && mode == PlateauMode::Max {
            plateau.step(-scheduled, lr)
        } else {
            plateau.step(scheduled, lr)
        };
        sgd.lr = next_lr;
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_metric,
            lr,
        };
        on_epoch(&rec);
        outcome.history.push(rec);
    }
    if let Some((m, params, epoch)) = best {
        model.params = params;
        outcome.best_epoch = Some(epoch);
        outcome.best_metric = Some(m);
    } else {
        outcome.best_epoch = Some(cfg.epochs);
    }
    Ok(outcome)
}

const EVAL_BATCH: usize = 100;

/// Evaluation-mode outputs `[n, outputs]` for samples under a setting.
pub fn predict_setting(model: &Model, samples: &[Sample], setting: TestSetting, seed: u64) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::Empty("predict: split"));
    }
    let outputs = model.num_outputs();
    let mut data = Vec::with_capacity(samples.len() * outputs);
    let si = TestSetting::ALL.iter().position(|&s| s == setting).unwrap_or(0) as u64;
    for (b, chunk) in samples.chunks(EVAL_BATCH).enumerate() {
        let transformed: Vec<Sample> = chunk
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let idx = (b * EVAL_BATCH + k) as u64;
                let noise_seed = Rng::derive(seed, &[label::EVAL_NOISE, si, idx]).next_u64();
                apply_test_setting(s, setting, noise_seed)
            })
            .collect();
        let refs: Vec<&Sample> = transformed.iter().collect();
        let (a, v) = stack_batch(&refs)?;
        data.extend_from_slice(model.predict(&a, &v)?.data());
    }
    Tensor::new([samples.len(), outputs], data)
}

fn metric_of(kind: MetricKind, preds: &Tensor, samples: &[Sample]) -> Result<f64> {
    match kind {
        MetricKind::Accuracy => {
            let ys: Vec<usize> = samples
                .iter()
                .map(|s| s.label.class().ok_or(Error::invalid("evaluate", "accuracy needs class labels")))
                .collect::<Result<_>>()?;
            categorical_accuracy(preds, &ys)
        }
        MetricKind::BinaryAccuracy | MetricKind::Mae => {
            if preds.shape()[1] != 1 {
                return Err(Error::shape("evaluate", preds.shape(), &[samples.len(), 1]));
            }
            let ys: Vec<f64> = samples
                .iter()
                .map(|s| s.label.score().ok_or(Error::invalid("evaluate", "score metric needs score labels")))
                .collect::<Result<_>>()?;
            if kind == MetricKind::Mae {
                mean_absolute_error(preds.data(), &ys)
            } else {
                Ok(binary_accuracy(preds.data(), &ys)?.0)
            }
        }
    }
}

fn evaluate_metric(model: &Model, samples: &[Sample], setting: TestSetting, kind: MetricKind, seed: u64) -> Result<f64> {
    let preds = predict_setting(model, samples, setting, seed)?;
    metric_of(kind, &preds, samples)
}

/// One report per task metric, each with a value for every requested
/// setting. The model is only read.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    settings: &[TestSetting],
    name: &str,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluate: split"));
    }
    if settings.is_empty() {
        return Err(Error::Empty("evaluate: settings"));
    }
    let kinds = MetricKind::for_task(model.config.task);
    let mut reports: Vec<EvalReport> = kinds
        .iter()
        .map(|&kind| EvalReport {
            name: name.to_string(),
            kind,
            values: Vec::new(),
        })
        .collect();
    for &setting in settings {
        let preds = predict_setting(model, samples, setting, seed)?;
        for r in &mut reports {
            let v = metric_of(r.kind, &preds, samples)?;
            r.values.push((setting, v));
        }
    }
    Ok(reports)
}
