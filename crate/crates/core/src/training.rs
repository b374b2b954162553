//! Losses and the end-to-end training loop.
//!
//! The total loss of a batch is mean RMSPE (over the first K peak-finder
//! outputs, minimized over permutations) plus λ_CE times the mean
//! cross-entropy of the source-number head. The source-number branch sits
//! behind a stop-gradient, so the CE term never reaches the encoder.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{Quantization, SnapshotMatrix};
use crate::dataset::{Dataset, DatasetRecord};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransMusic};
use crate::nn::{AdamConfig, CustomOp, Tape, Tensor, Var};
use crate::rng::{derive_seed, rng_from_seed};

/// Largest K accepted by the brute-force permutation search.
pub const MAX_RMSPE_SOURCES: usize = 5;
/// Probability floor inside the logarithm of the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;
/// Records per tape when a batch is split for evaluation or gradients.
/// Fixed so results do not depend on the thread count.
const CHUNK: usize = 16;

/// Wraps an angle difference into [−π/2, π/2).
pub fn wrap_half_pi(x: f64) -> f64 {
    let r = (x + PI / 2.0).rem_euclid(PI) - PI / 2.0;
    // rem_euclid may round up to exactly π for tiny negative inputs
    if r >= PI / 2.0 {
        r - PI
    } else {
        r
    }
}

/// Minimizing permutation and value of the RMSPE: `perm[k]` is the estimate
/// index matched to truth `k`.
pub fn rmspe_assignment(truth: &[f64], estimate: &[f64]) -> Result<(Vec<usize>, f64)> {
    if truth.len() != estimate.len() {
        return Err(Error::Dimension(format!(
            "RMSPE needs equal lengths, got {} and {}",
            truth.len(),
            estimate.len()
        )));
    }
    let k = truth.len();
    if k == 0 {
        return Err(Error::Dimension("RMSPE of zero angles".into()));
    }
    if k > MAX_RMSPE_SOURCES {
        return Err(Error::Capability(format!(
            "RMSPE permutation search supports K <= {MAX_RMSPE_SOURCES}, got {k}"
        )));
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = (perm.clone(), f64::INFINITY);
    permute(&mut perm, 0, &mut |p| {
        let s: f64 = p
            .iter()
            .enumerate()
            .map(|(i, &j)| wrap_half_pi(truth[i] - estimate[j]).powi(2))
            .sum();
        if s < best.1 {
            best = (p.to_vec(), s);
        }
    });
    Ok((best.0, (best.1 / k as f64).sqrt()))
}

/// Heap-free lexicographic-enough enumeration of all permutations.
fn permute(p: &mut [usize], start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == p.len() {
        visit(p);
        return;
    }
    for i in start..p.len() {
        p.swap(start, i);
        permute(p, start + 1, visit);
        p.swap(start, i);
    }
}

/// Root mean squared periodic error in radians, minimized over permutations.
pub fn rmspe(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    rmspe_assignment(truth, estimate).map(|(_, v)| v)
}

/// −ln of the probability assigned to `k_true` (1-based), floored.
pub fn cross_entropy_loss(k_true: usize, probs: &[f64]) -> Result<f64> {
    if k_true == 0 || k_true > probs.len() {
        return Err(Error::Domain(format!("class {k_true} outside 1..={}", probs.len())));
    }
    Ok(-probs[k_true - 1].max(PROB_FLOOR).ln())
}

struct RmspeLossOp {
    /// Per row: (output index, d loss / d output).
    grads: Vec<Vec<(usize, f64)>>,
}

impl CustomOp for RmspeLossOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let c = inputs[0].cols();
        let mut g = vec![0.0; inputs[0].len()];
        for (r, row) in self.grads.iter().enumerate() {
            for &(j, d) in row {
                g[r * c + j] = grad_out[0] * d;
            }
        }
        vec![Some(g)]
    }
}

/// Sum over rows of RMSPE(truth_b, first K_b outputs of row b), scaled by
/// `weight`. The argmin permutation is fixed before differentiation.
pub fn rmspe_loss(tape: &mut Tape, doas: Var, truths: &[&[f64]], weight: f64) -> Result<Var> {
    let t = tape.value(doas);
    if t.rows() != truths.len() {
        return Err(Error::Dimension(format!(
            "{} truth rows for {} outputs",
            truths.len(),
            t.rows()
        )));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(truths.len());
    for (b, truth) in truths.iter().enumerate() {
        let k = truth.len();
        if k > t.cols() {
            return Err(Error::Capability(format!("{k} sources exceed {} outputs", t.cols())));
        }
        let est = &t.row(b)[..k];
        let (perm, value) = rmspe_assignment(truth, est)?;
        total += value;
        let row = if value > 0.0 {
            perm.iter()
                .enumerate()
                .map(|(i, &j)| {
                    let d = wrap_half_pi(truth[i] - est[j]);
                    (j, -weight * d / (k as f64 * value))
                })
                .collect()
        } else {
            Vec::new()
        };
        grads.push(row);
    }
    tape.custom(&[doas], Tensor::scalar(weight * total), Box::new(RmspeLossOp { grads }))
}

struct CrossEntropyOp {
    grads: Vec<(usize, f64)>,
}

impl CustomOp for CrossEntropyOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let mut g = vec![0.0; inputs[0].len()];
        for &(i, d) in &self.grads {
            g[i] = grad_out[0] * d;
        }
        vec![Some(g)]
    }
}

/// Sum over rows of −ln p_b[K_b − 1], scaled by `weight`.
pub fn cross_entropy(tape: &mut Tape, probs: Var, classes: &[usize], weight: f64) -> Result<Var> {
    let t = tape.value(probs);
    if t.rows() != classes.len() {
        return Err(Error::Dimension(format!(
            "{} labels for {} probability rows",
            classes.len(),
            t.rows()
        )));
    }
    let c = t.cols();
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(classes.len());
    for (b, &k) in classes.iter().enumerate() {
        let row = t.row(b);
        total += cross_entropy_loss(k, row)?;
        let p = row[k - 1];
        if p > PROB_FLOOR {
            grads.push((b * c + k - 1, -weight / p));
        }
    }
    tape.custom(
        &[probs],
        Tensor::scalar(weight * total),
        Box::new(CrossEntropyOp { grads }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset path; the CLI's `--data` overrides it.
    pub dataset: Option<PathBuf>,
    pub quantization: Quantization,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub ce_weight: f64,
    pub seed: u64,
    /// Trailing fraction of the dataset held out for validation.
    pub validation_fraction: f64,
    /// Also write `<ckpt>.epoch<N>` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            quantization: Quantization::OneBit,
            batch_size: 64,
            epochs: 50,
            learning_rate: 1e-3,
            ce_weight: 1.0,
            seed: 0,
            validation_fraction: 0.1,
            checkpoint_every: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.ce_weight >= 0.0) {
            return Err(Error::Config("ce_weight must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be > 0".into()));
        }
        Ok(())
    }
}

/// Training and model settings as one JSON document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingDocument {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

/// One row of the training log. Epoch 0 describes the untrained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub train_rmspe: f64,
    pub train_ce: f64,
    pub val_rmspe: f64,
    pub val_sn_acc: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,train_rmspe,train_ce,val_rmspe,val_sn_acc";

impl LossReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.train_rmspe, self.train_ce, self.val_rmspe, self.val_sn_acc
        )
    }
}

/// Per-record evaluation of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordEval {
    pub k_true: usize,
    pub k_hat: usize,
    pub snr_db: f64,
    /// RMSPE of the first K (true) outputs, radians.
    pub rmspe: f64,
    pub ce: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub records: Vec<RecordEval>,
}

impl EvalSummary {
    pub fn mean_rmspe(&self) -> f64 {
        mean(self.records.iter().map(|r| r.rmspe))
    }

    pub fn median_rmspe(&self) -> f64 {
        median(self.records.iter().map(|r| r.rmspe).collect())
    }

    pub fn mean_ce(&self) -> f64 {
        mean(self.records.iter().map(|r| r.ce))
    }

    pub fn sn_accuracy(&self) -> f64 {
        mean(self.records.iter().map(|r| f64::from(u8::from(r.k_hat == r.k_true))))
    }

    /// Records whose SNR equals `snr_db`.
    pub fn at_snr(&self, snr_db: f64) -> EvalSummary {
        EvalSummary {
            records: self.records.iter().filter(|r| r.snr_db == snr_db).cloned().collect(),
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Median (mean of the two central values for even length); NaN if empty.
pub fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Runs the model over `records` in the given input arm, optionally with
/// each record cut to its first `snapshots` columns.
pub fn evaluate_model(
    model: &TransMusic,
    records: &[DatasetRecord],
    quantization: Quantization,
    snapshots: Option<usize>,
) -> Result<EvalSummary> {
    let chunks: Vec<Result<Vec<RecordEval>>> = records
        .par_chunks(CHUNK)
        .map(|chunk| {
            let inputs = chunk
                .iter()
                .map(|r| prepare_input(r, quantization, snapshots))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&SnapshotMatrix> = inputs.iter().collect();
            let outs = model.forward_batch(&refs)?;
            chunk
                .iter()
                .zip(outs)
                .map(|(r, o)| {
                    let k = r.scenario.sources();
                    Ok(RecordEval {
                        k_true: k,
                        k_hat: o.source_count(),
                        snr_db: r.scenario.snr_db(),
                        rmspe: rmspe(r.scenario.thetas(), o.first_doas(k))?,
                        ce: cross_entropy_loss(k, &o.sn_probs)?,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(records.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(EvalSummary { records: out })
}

fn prepare_input(r: &DatasetRecord, q: Quantization, snapshots: Option<usize>) -> Result<SnapshotMatrix> {
    let z = match snapshots {
        Some(l) if l < r.snapshots.snapshots() => r.snapshots.select_snapshots(&(0..l).collect::<Vec<_>>()),
        _ => r.snapshots.clone(),
    };
    z.with_quantization(q)
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    pub best_epoch: usize,
    /// Best-on-validation model (also written to the checkpoint path).
    pub model: TransMusic,
}

/// Splits off the trailing validation records.
pub fn split_validation(records: &[DatasetRecord], fraction: f64) -> (&[DatasetRecord], &[DatasetRecord]) {
    let n_val = (records.len() as f64 * fraction).round() as usize;
    records.split_at(records.len() - n_val.min(records.len()))
}

pub fn loss_csv_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".csv");
    PathBuf::from(s)
}

/// Trains from scratch, writing the best-on-validation checkpoint to `ckpt`
/// (with `<ckpt>.json` config and `<ckpt>.csv` loss log). `progress` sees
/// each report as it is produced.
///
/// If a loss or gradient turns non-finite the run aborts with a numeric
/// error; the checkpoint on disk is the last good one.
pub fn train(
    config: &TrainConfig,
    model_config: &ModelConfig,
    data: &Dataset,
    ckpt: &Path,
    mut progress: impl FnMut(&LossReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    if let Some(r) = data
        .records
        .iter()
        .find(|r| r.snapshots.antennas() != model_config.antennas)
    {
        return Err(Error::Config(format!(
            "dataset has M = {}, model expects {}",
            r.snapshots.antennas(),
            model_config.antennas
        )));
    }
    let (train_set, val_set) = split_validation(&data.records, config.validation_fraction);
    if train_set.is_empty() {
        return Err(Error::Config("no training records".into()));
    }
    let mut model = TransMusic::new(model_config.clone(), derive_seed(config.seed, 0))?;
    let adam = AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut csv = BufWriter::new(File::create(loss_csv_path(ckpt))?);
    writeln!(csv, "{LOSS_CSV_HEADER}")?;

    // Untrained reference point; the train columns use a prefix of the
    // training set as large as the validation set.
    let probe = &train_set[..train_set.len().min(val_set.len().max(CHUNK))];
    let init_train = evaluate_model(&model, probe, config.quantization, None)?;
    let mut report = LossReport {
        epoch: 0,
        train_rmspe: init_train.mean_rmspe(),
        train_ce: init_train.mean_ce(),
        val_rmspe: f64::NAN,
        val_sn_acc: f64::NAN,
    };
    fill_validation(&mut report, &model, val_set, config.quantization, &init_train)?;
    let mut reports = vec![report];
    writeln!(csv, "{}", report.csv_row())?;
    csv.flush()?;
    progress(&report);
    let mut best = (report.val_rmspe, 0usize);
    model.save(ckpt, false)?;
    let mut best_model = model.clone();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng_from_seed(derive_seed(config.seed, epoch as u64)));
        let mut rmspe_sum = 0.0;
        let mut ce_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (r, c) = train_step(&mut model, train_set, batch, config, &adam)?;
            rmspe_sum += r;
            ce_sum += c;
        }
        let n = train_set.len() as f64;
        let mut report = LossReport {
            epoch,
            train_rmspe: rmspe_sum / n,
            train_ce: ce_sum / n,
            val_rmspe: f64::NAN,
            val_sn_acc: f64::NAN,
        };
        let summary = EvalSummary { records: Vec::new() };
        fill_validation(&mut report, &model, val_set, config.quantization, &summary)?;
        if val_set.is_empty() {
            report.val_rmspe = report.train_rmspe;
        }
        writeln!(csv, "{}", report.csv_row())?;
        csv.flush()?;
        progress(&report);
        reports.push(report);
        if report.val_rmspe < best.0 || best.0.is_nan() {
            best = (report.val_rmspe, epoch);
            model.save(ckpt, false)?;
            best_model = model.clone();
        }
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            let mut p = ckpt.as_os_str().to_owned();
            p.push(format!(".epoch{epoch}"));
            model.save(Path::new(&p), true)?;
        }
    }
    Ok(TrainOutcome {
        reports,
        best_epoch: best.1,
        model: best_model,
    })
}

fn fill_validation(
    report: &mut LossReport,
    model: &TransMusic,
    val_set: &[DatasetRecord],
    q: Quantization,
    fallback: &EvalSummary,
) -> Result<()> {
    let summary = if val_set.is_empty() {
        fallback.clone()
    } else {
        evaluate_model(model, val_set, q, None)?
    };
    report.val_rmspe = summary.mean_rmspe();
    report.val_sn_acc = summary.sn_accuracy();
    Ok(())
}

/// One optimizer step on `batch` (indices into `records`). Returns the
/// summed RMSPE and CE over the batch.
pub fn train_step(
    model: &mut TransMusic,
    records: &[DatasetRecord],
    batch: &[usize],
    config: &TrainConfig,
    adam: &AdamConfig,
) -> Result<(f64, f64)> {
    let b = batch.len() as f64;
    let parts: Vec<Result<(Tape, crate::nn::Bound, f64, f64)>> = batch
        .par_chunks(CHUNK)
        .map(|idx| {
            let inputs = idx
                .iter()
                .map(|&i| records[i].snapshots.with_quantization(config.quantization))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&SnapshotMatrix> = inputs.iter().collect();
            let truths: Vec<&[f64]> = idx.iter().map(|&i| records[i].scenario.thetas()).collect();
            let classes: Vec<usize> = idx.iter().map(|&i| records[i].scenario.sources()).collect();
            let mut tape = Tape::new();
            let p = model.store().bind(&mut tape, true);
            let vars = model.forward_on(&mut tape, &p, &refs)?;
            let lr = rmspe_loss(&mut tape, vars.doas, &truths, 1.0 / b)?;
            let lc = cross_entropy(&mut tape, vars.sn_probs, &classes, config.ce_weight / b)?;
            let r = tape.value(lr).data()[0] * b;
            let probs = tape.value(vars.sn_probs);
            let c = classes
                .iter()
                .enumerate()
                .map(|(row, &k)| cross_entropy_loss(k, probs.row(row)))
                .sum::<Result<f64>>()?;
            let total = tape.add(lr, lc)?;
            tape.backward(total)?;
            Ok((tape, p, r, c))
        })
        .collect();
    let store = model.store_mut();
    store.zero_grads();
    let (mut rs, mut cs) = (0.0, 0.0);
    for part in parts {
        let (tape, bound, r, c) = part?;
        store.accumulate(&tape, &bound);
        rs += r;
        cs += c;
    }
    if !(rs.is_finite() && cs.is_finite()) {
        return Err(Error::Numeric("training loss diverged".into()));
    }
    if let Some(clip) = config.grad_clip {
        let norm = store
            .params()
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if norm > clip {
            store.scale_grads(clip / norm);
        }
    }
    store.adam_step(adam)?;
    Ok((rs, cs))
}
