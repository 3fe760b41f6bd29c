//! Training machinery: the joint objective (task loss plus weighted
//! orthogonality penalty), Adam, finite-difference gradient checking, a
//! synthetic frequency-discrimination task, CSV dataset IO, and the
//! mini-batch training loop.
//!
//! Everything is deterministic given the config seed: parameter init, batch
//! order, and synthetic data all come from the portable [`Prng`].

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::mat::Mat;
use crate::model::{AttentionVariant, BoundModel, ModelConfig, ParamStore, SequenceClassifier};
use crate::poly::BasisSpec;
use crate::prng::Prng;
use crate::tensor::{Tape, TensorError, TensorId, TensorResult};

#[derive(Debug)]
pub enum TrainError {
    Tensor(TensorError),
    /// Loss or gradients went non-finite.
    Diverged {
        epoch: usize,
        batch: usize,
    },
    Config(String),
    Data(DataError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::Diverged { epoch, batch } => {
                write!(f, "training diverged at epoch {epoch}, batch {batch}")
            }
            TrainError::Config(msg) => write!(f, "bad config: {msg}"),
            TrainError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}

#[derive(Debug)]
pub enum DataError {
    Io(String),
    EmptyFile,
    BadHeader(String),
    BadRow { line: usize, detail: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(msg) => write!(f, "io error: {msg}"),
            DataError::EmptyFile => write!(f, "dataset file is empty"),
            DataError::BadHeader(msg) => write!(f, "bad header: {msg}"),
            DataError::BadRow { line, detail } => write!(f, "line {line}: {detail}"),
        }
    }
}

impl std::error::Error for DataError {}

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub variant: AttentionVariant,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub basis: BasisSpec,
    /// Weight of the orthogonality penalty in the joint objective.
    pub gamma: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Freeze theta at [1, 0, ..., 0] (the unfiltered U V^T ablation).
    pub freeze_theta: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(TrainError::Config(format!(
                "model dim {} must divide into {} heads",
                self.d, self.heads
            )));
        }
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(TrainError::Config(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(TrainError::Config(format!(
                "lr must be >= 0, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

// ── Dataset ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Fixed-length multivariate sequences with integer class labels.
/// Sequences are stored time-major: `seq[t * features + f]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub seq_len: usize,
    pub features: usize,
    pub num_classes: usize,
    pub sequences: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub split: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Retag the first `train_fraction` of rows as train, the rest as test.
    pub fn split_by_ratio(&mut self, train_fraction: f64) {
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        for (i, s) in self.split.iter_mut().enumerate() {
            *s = if i < cut { Split::Train } else { Split::Test };
        }
    }
}

/// Noise level of the synthetic task. Chosen so the classes stay separable
/// from frequency content but the task does not saturate instantly.
const FREQUENCY_TASK_NOISE: f64 = 0.8;

/// Two-class synthetic task: class 0 carries a slow sinusoid (1-2 cycles
/// per window), class 1 a near-Nyquist one, equal amplitudes, additive
/// noise. Only the frequency content separates the classes. The first 80%
/// of samples are tagged train, the rest test. Deterministic given seed.
pub fn gen_frequency_task(seed: u64, n_samples: usize, seq_len: usize) -> Dataset {
    assert!(seq_len >= 8, "sequence length must be at least 8");
    let mut rng = Prng::new(seed);
    let mut sequences = Vec::with_capacity(n_samples);
    let mut labels = Vec::with_capacity(n_samples);
    let nyquist = seq_len / 2;
    for i in 0..n_samples {
        let label = i % 2;
        let cycles = if label == 0 {
            1 + rng.below(2)
        } else {
            nyquist - 3 + rng.below(2)
        } as f64;
        let phase = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
        let seq: Vec<f64> = (0..seq_len)
            .map(|t| {
                let angle = 2.0 * std::f64::consts::PI * cycles * t as f64 / seq_len as f64;
                (angle + phase).sin() + FREQUENCY_TASK_NOISE * rng.normal()
            })
            .collect();
        sequences.push(seq);
        labels.push(label);
    }
    let cut = n_samples * 4 / 5;
    let split = (0..n_samples)
        .map(|i| if i < cut { Split::Train } else { Split::Test })
        .collect();
    Dataset {
        seq_len,
        features: 1,
        num_classes: 2,
        sequences,
        labels,
        split,
    }
}

/// Write a dataset as CSV: header `label,t0_f0,t0_f1,...`, one sequence per
/// row, values in shortest round-trip form so reading back is lossless.
pub fn write_csv_dataset(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    let mut file = std::fs::File::create(path).map_err(|e| DataError::Io(e.to_string()))?;
    let mut header = String::from("label");
    for t in 0..dataset.seq_len {
        for f in 0..dataset.features {
            header.push_str(&format!(",t{t}_f{f}"));
        }
    }
    writeln!(file, "{header}").map_err(|e| DataError::Io(e.to_string()))?;
    for (seq, &label) in dataset.sequences.iter().zip(dataset.labels.iter()) {
        let mut row = label.to_string();
        for v in seq {
            row.push(',');
            row.push_str(&format!("{v}"));
        }
        writeln!(file, "{row}").map_err(|e| DataError::Io(e.to_string()))?;
    }
    Ok(())
}

/// Load a CSV dataset written in the layout above. Malformed rows are
/// rejected with their line number. All rows come back tagged as train;
/// use [`Dataset::split_by_ratio`] to carve out a test set.
pub fn load_csv_dataset(path: &Path) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::Io(e.to_string()))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| DataError::Io(e.to_string()))?,
        None => return Err(DataError::EmptyFile),
    };
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.first() != Some(&"label") {
        return Err(DataError::BadHeader(
            "first column must be 'label'".to_string(),
        ));
    }
    if cols.len() < 2 {
        return Err(DataError::BadHeader("no value columns".to_string()));
    }
    let mut seq_len = 0usize;
    let mut features = 0usize;
    let mut parsed_names = Vec::with_capacity(cols.len() - 1);
    for name in &cols[1..] {
        let parsed = name
            .strip_prefix('t')
            .and_then(|rest| rest.split_once("_f"))
            .and_then(|(t, f)| Some((t.parse::<usize>().ok()?, f.parse::<usize>().ok()?)));
        match parsed {
            Some((t, f)) => {
                seq_len = seq_len.max(t + 1);
                features = features.max(f + 1);
                parsed_names.push((t, f));
            }
            None => {
                return Err(DataError::BadHeader(format!(
                    "column '{name}' is not of the form t<i>_f<j>"
                )))
            }
        }
    }
    if seq_len * features != cols.len() - 1 {
        return Err(DataError::BadHeader(format!(
            "{} value columns but header spans {seq_len} steps x {features} features",
            cols.len() - 1
        )));
    }
    // Columns must appear time-major: t0_f0, t0_f1, ..., t1_f0, ...
    for (i, &(t, f)) in parsed_names.iter().enumerate() {
        if t * features + f != i {
            return Err(DataError::BadHeader(format!(
                "column {} is t{t}_f{f}, expected time-major order",
                i + 1
            )));
        }
    }

    let mut sequences = Vec::new();
    let mut labels = Vec::new();
    let mut max_label = 0usize;
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line.map_err(|e| DataError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != cols.len() {
            return Err(DataError::BadRow {
                line: line_no,
                detail: format!("expected {} fields, got {}", cols.len(), fields.len()),
            });
        }
        let label: usize = fields[0].parse().map_err(|_| DataError::BadRow {
            line: line_no,
            detail: format!("label '{}' is not a non-negative integer", fields[0]),
        })?;
        let mut seq = Vec::with_capacity(seq_len * features);
        for cell in &fields[1..] {
            let v: f64 = cell.parse().map_err(|_| DataError::BadRow {
                line: line_no,
                detail: format!("cell '{cell}' is not numeric"),
            })?;
            if !v.is_finite() {
                return Err(DataError::BadRow {
                    line: line_no,
                    detail: format!("cell '{cell}' is not finite"),
                });
            }
            seq.push(v);
        }
        max_label = max_label.max(label);
        sequences.push(seq);
        labels.push(label);
    }
    if sequences.is_empty() {
        return Err(DataError::EmptyFile);
    }
    let count = sequences.len();
    Ok(Dataset {
        seq_len,
        features,
        num_classes: max_label + 1,
        sequences,
        labels,
        split: vec![Split::Train; count],
    })
}

// ── Objective ────────────────────────────────────────────────────────

/// Joint objective: mean cross-entropy plus `gamma` times the summed
/// orthogonality penalties.
pub fn total_loss(
    tape: &mut Tape,
    logits: TensorId,
    labels: &[usize],
    ortho: TensorId,
    gamma: f64,
) -> TensorResult<TensorId> {
    let ce = tape.cross_entropy(logits, labels)?;
    let weighted = tape.scale(ortho, gamma)?;
    tape.add(ce, weighted)
}

// ── Optimizer ────────────────────────────────────────────────────────

/// Adam with bias correction (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// One update over every trainable parameter. Rejects non-finite
    /// gradients without touching any parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<(), TrainError> {
        assert_eq!(grads.len(), store.len(), "gradient list must match store");
        for g in grads {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(TrainError::Diverged { epoch: 0, batch: 0 });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..store.len() {
            let param = store.get_mut(crate::model::ParamId(i));
            if !param.trainable {
                continue;
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..param.value.len() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                param.value[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

// ── Batch forward ────────────────────────────────────────────────────

pub struct BatchForward {
    pub loss: TensorId,
    pub task_loss: TensorId,
    pub ortho_mean: TensorId,
    pub logits: TensorId,
}

/// Forward a batch of sequences through a bound model and assemble the
/// joint objective. The orthogonality term is the per-sequence layer sum,
/// averaged over the batch.
pub fn batch_forward(
    tape: &mut Tape,
    bound: &BoundModel<'_>,
    dataset: &Dataset,
    indices: &[usize],
    gamma: f64,
) -> TensorResult<BatchForward> {
    let mut logit_rows = Vec::with_capacity(indices.len());
    let mut ortho = tape.scalar_const(0.0)?;
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let out = bound.forward_sequence(tape, &dataset.sequences[i], dataset.seq_len)?;
        logit_rows.push(out.logits);
        ortho = tape.add(ortho, out.ortho)?;
        labels.push(dataset.labels[i]);
    }
    let logits = tape.concat_rows(&logit_rows)?;
    let ortho_mean = tape.scale(ortho, 1.0 / indices.len() as f64)?;
    let task_loss = tape.cross_entropy(logits, &labels)?;
    let weighted = tape.scale(ortho_mean, gamma)?;
    let loss = tape.add(task_loss, weighted)?;
    Ok(BatchForward {
        loss,
        task_loss,
        ortho_mean,
        logits,
    })
}

fn argmax_rows(values: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    (0..rows)
        .map(|r| {
            let row = &values[r * cols..(r + 1) * cols];
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

// ── Gradient check ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Relative error with a floored denominator, elementwise over two
/// gradient sets; used both by the checker and by its negative-control
/// tests.
pub fn compare_grad_sets(
    names: &[String],
    analytic: &[Vec<f64>],
    numeric: &[Vec<f64>],
    tolerance: f64,
) -> GradCheckReport {
    let mut checks = Vec::with_capacity(names.len());
    let mut overall: f64 = 0.0;
    for ((name, a), n) in names.iter().zip(analytic.iter()).zip(numeric.iter()) {
        let mut worst = 0.0;
        let mut worst_index = 0;
        let mut worst_pair = (0.0, 0.0);
        for (j, (&av, &nv)) in a.iter().zip(n.iter()).enumerate() {
            let denom = av.abs().max(nv.abs()).max(1e-8);
            let rel = (av - nv).abs() / denom;
            if rel > worst {
                worst = rel;
                worst_index = j;
                worst_pair = (av, nv);
            }
        }
        overall = overall.max(worst);
        checks.push(ParamCheck {
            name: name.clone(),
            max_rel_err: worst,
            worst_index,
            analytic_at_worst: worst_pair.0,
            numeric_at_worst: worst_pair.1,
        });
    }
    GradCheckReport {
        checks,
        max_rel_err: overall,
        tolerance,
    }
}

/// Compare reverse-mode gradients against central finite differences
/// `(L(p+h) - L(p-h)) / 2h` for every element of every trainable parameter.
pub fn grad_check(
    model: &mut SequenceClassifier,
    dataset: &Dataset,
    indices: &[usize],
    gamma: f64,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport, TrainError> {
    // Analytic pass.
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let fwd = batch_forward(&mut tape, &bound, dataset, indices, gamma)?;
    tape.backward(fwd.loss)?;
    let analytic = bound.collect_grads(&tape);
    drop(tape);

    let loss_at = |m: &SequenceClassifier| -> Result<f64, TrainError> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape)?;
        let fwd = batch_forward(&mut tape, &bound, dataset, indices, gamma)?;
        Ok(tape.scalar_value(fwd.loss))
    };

    let mut names = Vec::new();
    let mut kept_analytic = Vec::new();
    let mut numeric = Vec::new();
    for i in 0..model.store.len() {
        let pid = crate::model::ParamId(i);
        if !model.store.get(pid).trainable {
            continue;
        }
        let len = model.store.get(pid).value.len();
        let mut grads = Vec::with_capacity(len);
        for j in 0..len {
            let original = model.store.get(pid).value[j];
            model.store.get_mut(pid).value[j] = original + h;
            let plus = loss_at(model)?;
            model.store.get_mut(pid).value[j] = original - h;
            let minus = loss_at(model)?;
            model.store.get_mut(pid).value[j] = original;
            grads.push((plus - minus) / (2.0 * h));
        }
        names.push(model.store.get(pid).name.clone());
        kept_analytic.push(analytic[i].clone());
        numeric.push(grads);
    }
    Ok(compare_grad_sets(
        &names,
        &kept_analytic,
        &numeric,
        tolerance,
    ))
}

// ── Training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub task_loss: f64,
    pub ortho_loss: f64,
}

pub struct TrainOutput {
    pub model: SequenceClassifier,
    pub history: Vec<EpochMetrics>,
    /// Per-layer hidden states for a handful of test sequences, captured
    /// after the final epoch; outer index = sequence, inner = layer.
    pub snapshots: Vec<Vec<Mat>>,
}

/// How many test sequences to snapshot for layer-similarity analysis.
const SNAPSHOT_SEQUENCES: usize = 8;

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Config("dataset is empty".into()));
    }
    let mut rng = Prng::new(config.seed);
    let model_config = ModelConfig {
        features: dataset.features,
        classes: dataset.num_classes,
        d: config.d,
        heads: config.heads,
        layers: config.layers,
        basis: config.basis,
        variant: config.variant,
        freeze_theta: config.freeze_theta,
    };
    let mut model = SequenceClassifier::new(model_config, &mut rng);
    let mut adam = Adam::new(config.lr, &model.store);

    let train_idx = dataset.indices_of(Split::Train);
    let test_idx = dataset.indices_of(Split::Test);
    if train_idx.is_empty() {
        return Err(TrainError::Config("no training rows".into()));
    }

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order = train_idx.clone();
        rng.shuffle(&mut order);

        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut task_sum = 0.0;
        let mut ortho_sum = 0.0;
        let mut batches = 0usize;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let fwd = match batch_forward(&mut tape, &bound, dataset, chunk, config.gamma) {
                Ok(f) => f,
                Err(TensorError::NonFinite { .. }) => {
                    return Err(TrainError::Diverged {
                        epoch,
                        batch: batch_no,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            task_sum += tape.scalar_value(fwd.task_loss);
            ortho_sum += tape.scalar_value(fwd.ortho_mean);
            batches += 1;

            let preds = argmax_rows(tape.value(fwd.logits), chunk.len(), dataset.num_classes);
            for (&i, &p) in chunk.iter().zip(preds.iter()) {
                if dataset.labels[i] == p {
                    correct += 1;
                }
                seen += 1;
            }

            tape.backward(fwd.loss)?;
            let grads = bound.collect_grads(&tape);
            drop(tape);
            adam.step(&mut model.store, &grads).map_err(|e| match e {
                TrainError::Diverged { .. } => TrainError::Diverged {
                    epoch,
                    batch: batch_no,
                },
                other => other,
            })?;
        }

        let test_accuracy = evaluate_accuracy(&model, dataset, &test_idx, config.batch_size)?;
        history.push(EpochMetrics {
            epoch,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            test_accuracy,
            task_loss: task_sum / batches.max(1) as f64,
            ortho_loss: ortho_sum / batches.max(1) as f64,
        });
    }

    // Layer snapshots for similarity analysis.
    let mut snapshots = Vec::new();
    for &i in test_idx.iter().take(SNAPSHOT_SEQUENCES) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let out = bound.forward_sequence(&mut tape, &dataset.sequences[i], dataset.seq_len)?;
        let layers: Vec<Mat> = out
            .layer_outputs
            .iter()
            .map(|&id| {
                let shape = tape.shape(id);
                Mat::from_vec(shape[0], shape[1], tape.value(id).to_vec())
            })
            .collect();
        snapshots.push(layers);
    }

    Ok(TrainOutput {
        model,
        history,
        snapshots,
    })
}

/// Accuracy of the current parameters over the given rows.
pub fn evaluate_accuracy(
    model: &SequenceClassifier,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<f64, TrainError> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let mut rows = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let out = bound.forward_sequence(&mut tape, &dataset.sequences[i], dataset.seq_len)?;
            rows.push(out.logits);
        }
        let logits = tape.concat_rows(&rows)?;
        let preds = argmax_rows(tape.value(logits), chunk.len(), dataset.num_classes);
        for (&i, &p) in chunk.iter().zip(preds.iter()) {
            if dataset.labels[i] == p {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}
