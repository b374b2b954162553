//! Monte-Carlo sweeps comparing the learned estimator with the classical
//! baselines over SNR and snapshot count, plus aggregation and CSV/SVG output.
//!
//! Every method in a sweep cell sees the same scenario realization for a
//! given trial index. Classical MUSIC and the beamformer consume unquantized
//! snapshots; one-bit MUSIC and `transmusic_1bit` consume the one-bit arm of
//! the same realization. Angle accuracy is always scored on the true K,
//! while `k_hat` comes from each method's own order estimator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use plotters::prelude::*;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{generate_snapshots, sample_angles, ArrayGeometry, Quantization, Scenario, SnapshotMatrix};
use crate::classical::{
    beamformer_estimate_on, find_peaks, music_estimate_on, one_bit_music_estimate_on, ClassicalConfig, SteeringTable,
};
use crate::dataset::{Dataset, DatasetRecord};
use crate::error::{Error, Result};
use crate::model::TransMusic;
use crate::rng::{derive_seed, rng_from_seed};
use crate::training::{median, rmspe};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "music")]
    Music,
    #[serde(rename = "one_bit_music")]
    OneBitMusic,
    #[serde(rename = "beamformer")]
    Beamformer,
    #[serde(rename = "transmusic_1bit")]
    TransMusicOneBit,
    #[serde(rename = "transmusic_unquantized")]
    TransMusicUnquantized,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Music,
        Method::OneBitMusic,
        Method::Beamformer,
        Method::TransMusicOneBit,
        Method::TransMusicUnquantized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Music => "music",
            Method::OneBitMusic => "one_bit_music",
            Method::Beamformer => "beamformer",
            Method::TransMusicOneBit => "transmusic_1bit",
            Method::TransMusicUnquantized => "transmusic_unquantized",
        }
    }

    /// Input arm the method consumes.
    pub fn quantization(self) -> Quantization {
        match self {
            Method::OneBitMusic | Method::TransMusicOneBit => Quantization::OneBit,
            _ => Quantization::Unquantized,
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Method::TransMusicOneBit | Method::TransMusicUnquantized)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub snr_db: Vec<f64>,
    /// Snapshot counts L.
    pub snapshots: Vec<usize>,
    /// Trials per (SNR, L) cell when scenarios are generated.
    pub trials: usize,
    /// Evaluate on the records of this dataset instead of generating
    /// scenarios: records whose SNR is listed are used, cut to each L.
    pub test_data: Option<PathBuf>,
    /// Checkpoint per learned method.
    pub checkpoints: BTreeMap<Method, PathBuf>,
    pub antennas: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub min_separation: Option<f64>,
    pub seed: u64,
    pub classical: ClassicalConfig,
    /// Measure wall time per estimate; off gives reproducible files.
    pub record_timing: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Music, Method::OneBitMusic, Method::Beamformer],
            snr_db: vec![0.0, 5.0, 10.0],
            snapshots: vec![200],
            trials: 200,
            test_data: None,
            checkpoints: BTreeMap::new(),
            antennas: 8,
            k_min: 2,
            k_max: 5,
            min_separation: Some(0.1),
            seed: 0,
            classical: ClassicalConfig::default(),
            record_timing: true,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 && self.test_data.is_none() {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.methods.is_empty() || self.snr_db.is_empty() || self.snapshots.is_empty() {
            return Err(Error::Config("methods, snr_db and snapshots must be non-empty".into()));
        }
        if self.snapshots.contains(&0) {
            return Err(Error::Config("snapshot counts must be >= 1".into()));
        }
        if self.k_min == 0 || self.k_min > self.k_max || self.k_max >= self.antennas {
            return Err(Error::Config(format!(
                "source range [{}, {}] invalid for M = {}",
                self.k_min, self.k_max, self.antennas
            )));
        }
        for m in self.methods.iter().filter(|m| m.is_learned()) {
            if !self.checkpoints.contains_key(m) {
                return Err(Error::Config(format!("method {m} has no checkpoint")));
            }
        }
        Ok(())
    }
}

/// One (method, cell, trial) outcome. A failed estimate has `rmspe_rad`
/// `None` and `k_hat` 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub method: Method,
    pub snr_db: f64,
    pub snapshots: usize,
    pub trial: usize,
    pub k_true: usize,
    pub k_hat: usize,
    pub rmspe_rad: Option<f64>,
    pub wall_time_ms: f64,
}

pub const RAW_CSV_HEADER: &str = "method,snr_db,L,trial,k_true,k_hat,rmspe_rad,wall_time_ms";
pub const SUMMARY_CSV_HEADER: &str = "method,snr_db,L,trials,failures,median_rmspe_rad,median_ci_rad,mean_rmspe_rad,mean_ci_rad,sn_accuracy,sn_accuracy_ci";

/// A trial's inputs shared by every method.
struct Trial {
    snr_db: f64,
    snapshots: usize,
    trial: usize,
    scenario: Scenario,
    unquantized: SnapshotMatrix,
    one_bit: SnapshotMatrix,
}

impl Trial {
    fn input(&self, q: Quantization) -> &SnapshotMatrix {
        match q {
            Quantization::OneBit => &self.one_bit,
            Quantization::Unquantized => &self.unquantized,
        }
    }
}

/// Deterministic scenario of one generated trial.
fn generated_trial(cfg: &SweepConfig, geom: &ArrayGeometry, si: usize, li: usize, trial: usize) -> Result<Trial> {
    let (snr, l) = (cfg.snr_db[si], cfg.snapshots[li]);
    let cell = derive_seed(derive_seed(cfg.seed, si as u64), li as u64);
    let seed = derive_seed(cell, trial as u64);
    let mut rng = rng_from_seed(derive_seed(seed, 0));
    let k = rng.random_range(cfg.k_min..=cfg.k_max);
    let thetas = sample_angles(k, cfg.min_separation, &mut rng)?;
    let scenario = Scenario::new(thetas, snr, l)?;
    let unquantized = generate_snapshots(&scenario, geom, seed)?;
    let one_bit = unquantized.with_quantization(Quantization::OneBit)?;
    Ok(Trial {
        snr_db: snr,
        snapshots: l,
        trial,
        scenario,
        unquantized,
        one_bit,
    })
}

fn record_trial(rec: &DatasetRecord, index: usize, l: usize) -> Result<Trial> {
    if rec.snapshots.snapshots() < l {
        return Err(Error::Config(format!(
            "record {index} has {} snapshots, sweep asks for {l}",
            rec.snapshots.snapshots()
        )));
    }
    let unquantized = rec.snapshots.select_snapshots(&(0..l).collect::<Vec<_>>());
    let one_bit = unquantized.with_quantization(Quantization::OneBit)?;
    Ok(Trial {
        snr_db: rec.scenario.snr_db(),
        snapshots: l,
        trial: index,
        scenario: rec.scenario.with_snapshots(l)?,
        unquantized,
        one_bit,
    })
}

/// Runs every configured method on every trial. Rows come back sorted by
/// (method, snr, L, trial).
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepResult>> {
    cfg.validate()?;
    let geom = ArrayGeometry::ula(cfg.antennas)?;
    let mut models = BTreeMap::new();
    for m in cfg.methods.iter().filter(|m| m.is_learned()) {
        let model = TransMusic::load(&cfg.checkpoints[m])?;
        if model.config().antennas != cfg.antennas {
            return Err(Error::Config(format!(
                "checkpoint for {m} has M = {}, sweep uses {}",
                model.config().antennas,
                cfg.antennas
            )));
        }
        models.insert(*m, model);
    }
    let trials: Vec<Trial> = match &cfg.test_data {
        None => {
            let cells: Vec<(usize, usize, usize)> = (0..cfg.snr_db.len())
                .flat_map(|s| (0..cfg.snapshots.len()).flat_map(move |l| (0..cfg.trials).map(move |t| (s, l, t))))
                .collect();
            cells
                .par_iter()
                .map(|&(s, l, t)| generated_trial(cfg, &geom, s, l, t))
                .collect::<Result<_>>()?
        }
        Some(path) => {
            let data = Dataset::read(path)?;
            let mut out = Vec::new();
            for &l in &cfg.snapshots {
                for (i, rec) in data.records.iter().enumerate() {
                    if cfg.snr_db.contains(&rec.scenario.snr_db()) {
                        if rec.snapshots.antennas() != cfg.antennas {
                            return Err(Error::Config(format!(
                                "test data has M = {}, sweep uses {}",
                                rec.snapshots.antennas(),
                                cfg.antennas
                            )));
                        }
                        out.push(record_trial(rec, i, l)?);
                    }
                }
            }
            out
        }
    };

    let table = SteeringTable::new(&geom, cfg.classical.grid_size)?;
    let mut rows = Vec::with_capacity(trials.len() * cfg.methods.len());
    for &method in &cfg.methods {
        if let Some(model) = models.get(&method) {
            rows.extend(run_learned(method, model, &trials, cfg.record_timing));
        } else {
            rows.par_extend(
                trials
                    .par_iter()
                    .map(|t| run_classical(method, t, &table, &cfg.classical, cfg.record_timing)),
            );
        }
    }
    sort_rows(&mut rows);
    Ok(rows)
}

fn sort_rows(rows: &mut [SweepResult]) {
    rows.sort_by(|a, b| {
        (a.method, a.snr_db, a.snapshots, a.trial)
            .partial_cmp(&(b.method, b.snr_db, b.snapshots, b.trial))
            .expect("SNR values are finite")
    });
}

fn run_classical(method: Method, t: &Trial, table: &SteeringTable, cc: &ClassicalConfig, timing: bool) -> SweepResult {
    let k = t.scenario.sources();
    let start = Instant::now();
    let outcome: Result<(Vec<f64>, usize)> = (|| {
        let z = t.input(method.quantization());
        Ok(match method {
            Method::Music => {
                let e = music_estimate_on(z, k, table)?;
                let k_hat = e.source_count(cc.eigen_tau);
                (e.angles, k_hat)
            }
            Method::OneBitMusic => {
                let e = one_bit_music_estimate_on(z, k, table)?;
                let k_hat = e.source_count(cc.eigen_tau);
                (e.angles, k_hat)
            }
            Method::Beamformer => {
                let e = beamformer_estimate_on(z, table, cc.beam_eta)?;
                (find_peaks(&e.spectrum, k)?, e.source_count)
            }
            _ => unreachable!("learned methods run in batches"),
        })
    })();
    let ms = elapsed_ms(start, timing);
    row(
        method,
        t,
        outcome.and_then(|(a, kh)| Ok((rmspe(t.scenario.thetas(), &a)?, kh))),
        ms,
    )
}

fn elapsed_ms(start: Instant, timing: bool) -> f64 {
    if timing {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    }
}

fn row(method: Method, t: &Trial, outcome: Result<(f64, usize)>, ms: f64) -> SweepResult {
    let (rmspe_rad, k_hat) = match outcome {
        Ok((r, kh)) if r.is_finite() => (Some(r), kh),
        _ => (None, 0),
    };
    SweepResult {
        method,
        snr_db: t.snr_db,
        snapshots: t.snapshots,
        trial: t.trial,
        k_true: t.scenario.sources(),
        k_hat,
        rmspe_rad,
        wall_time_ms: ms,
    }
}

/// Records per forward batch of the learned methods.
const LEARNED_CHUNK: usize = 16;

fn run_learned(method: Method, model: &TransMusic, trials: &[Trial], timing: bool) -> Vec<SweepResult> {
    let q = method.quantization();
    trials
        .par_chunks(LEARNED_CHUNK)
        .flat_map_iter(|chunk| {
            let start = Instant::now();
            let inputs: Vec<&SnapshotMatrix> = chunk.iter().map(|t| t.input(q)).collect();
            let outs = model.forward_batch(&inputs);
            let ms = elapsed_ms(start, timing) / chunk.len() as f64;
            chunk
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let outcome = match &outs {
                        Ok(o) => {
                            let k = t.scenario.sources();
                            rmspe(t.scenario.thetas(), o[i].first_doas(k)).map(|r| (r, o[i].source_count()))
                        }
                        Err(e) => Err(Error::Numeric(e.to_string())),
                    };
                    row(method, t, outcome, ms)
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Per-cell statistics. CI fields are bootstrap 95% half-widths.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub method: Method,
    pub snr_db: f64,
    pub snapshots: usize,
    pub trials: usize,
    pub failures: usize,
    pub median_rmspe: f64,
    pub median_ci: f64,
    pub mean_rmspe: f64,
    pub mean_ci: f64,
    pub sn_accuracy: f64,
    pub sn_accuracy_ci: f64,
}

/// Bootstrap resamples per statistic.
pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Groups rows by (method, snr, L). Failed rows count as wrong orders and
/// are excluded from the RMSPE statistics.
pub fn aggregate(results: &[SweepResult]) -> Result<Vec<CellSummary>> {
    if results.is_empty() {
        return Err(Error::Usage("cannot aggregate an empty result table".into()));
    }
    let mut groups: Vec<((Method, f64, usize), Vec<&SweepResult>)> = Vec::new();
    for r in results {
        let key = (r.method, r.snr_db, r.snapshots);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite SNR"));
    Ok(groups
        .into_iter()
        .map(|((method, snr_db, snapshots), rows)| {
            let errs: Vec<f64> = rows.iter().filter_map(|r| r.rmspe_rad).collect();
            let hits: Vec<f64> = rows.iter().map(|r| f64::from(u8::from(r.k_hat == r.k_true))).collect();
            let seed = derive_seed(method as u64, snapshots as u64 ^ snr_db.to_bits());
            CellSummary {
                method,
                snr_db,
                snapshots,
                trials: rows.len(),
                failures: rows.len() - errs.len(),
                median_rmspe: median(errs.clone()),
                median_ci: bootstrap_half_width(&errs, |s| median(s.to_vec()), seed),
                mean_rmspe: mean(&errs),
                mean_ci: bootstrap_half_width(&errs, mean, seed ^ 1),
                sn_accuracy: mean(&hits),
                sn_accuracy_ci: bootstrap_half_width(&hits, mean, seed ^ 2),
            }
        })
        .collect())
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Half the width of the central 95% interval of `stat` over resamples.
pub fn bootstrap_half_width(xs: &[f64], stat: impl Fn(&[f64]) -> f64, seed: u64) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mut rng = rng_from_seed(seed);
    let mut buf = vec![0.0; xs.len()];
    let mut stats: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = xs[rng.random_range(0..xs.len())];
            }
            stat(&buf)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let lo = stats[(0.025 * (BOOTSTRAP_RESAMPLES - 1) as f64).round() as usize];
    let hi = stats[(0.975 * (BOOTSTRAP_RESAMPLES - 1) as f64).round() as usize];
    (hi - lo) / 2.0
}

pub fn raw_csv(results: &[SweepResult]) -> String {
    let mut s = String::from(RAW_CSV_HEADER);
    s.push('\n');
    for r in results {
        let rm = r.rmspe_rad.map_or_else(|| "nan".to_string(), |v| v.to_string());
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.method, r.snr_db, r.snapshots, r.trial, r.k_true, r.k_hat, rm, r.wall_time_ms
        )
        .expect("writing to a String");
    }
    s
}

pub fn summary_csv(summaries: &[CellSummary]) -> String {
    let mut s = String::from(SUMMARY_CSV_HEADER);
    s.push('\n');
    for c in summaries {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            c.method,
            c.snr_db,
            c.snapshots,
            c.trials,
            c.failures,
            c.median_rmspe,
            c.median_ci,
            c.mean_rmspe,
            c.mean_ci,
            c.sn_accuracy,
            c.sn_accuracy_ci
        )
        .expect("writing to a String");
    }
    s
}

/// File names written by [`emit`].
pub const RAW_CSV: &str = "results.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const PLOTS: [&str; 4] = [
    "rmspe_vs_snr.svg",
    "accuracy_vs_snr.svg",
    "rmspe_vs_l.svg",
    "accuracy_vs_l.svg",
];

/// Writes raw and summary CSVs and the four plots. SNR plots use the
/// largest L in the summaries; L plots use the largest SNR.
pub fn emit(results: &[SweepResult], summaries: &[CellSummary], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(RAW_CSV), raw_csv(results))?;
    std::fs::write(out_dir.join(SUMMARY_CSV), summary_csv(summaries))?;
    let max_l = summaries.iter().map(|c| c.snapshots).max();
    let max_snr = summaries
        .iter()
        .map(|c| c.snr_db)
        .fold(None, |a: Option<f64>, b| Some(a.map_or(b, |a| a.max(b))));
    let at_l: Vec<&CellSummary> = summaries.iter().filter(|c| Some(c.snapshots) == max_l).collect();
    let at_snr: Vec<&CellSummary> = summaries.iter().filter(|c| Some(c.snr_db) == max_snr).collect();
    let plots = [
        (
            PLOTS[0],
            plot(&at_l, "Median RMSPE vs SNR", "SNR (dB)", Metric::Rmspe, |c| c.snr_db)?,
        ),
        (
            PLOTS[1],
            plot(
                &at_l,
                "Source-number accuracy vs SNR",
                "SNR (dB)",
                Metric::Accuracy,
                |c| c.snr_db,
            )?,
        ),
        (
            PLOTS[2],
            plot(&at_snr, "Median RMSPE vs snapshots", "L", Metric::Rmspe, |c| {
                c.snapshots as f64
            })?,
        ),
        (
            PLOTS[3],
            plot(
                &at_snr,
                "Source-number accuracy vs snapshots",
                "L",
                Metric::Accuracy,
                |c| c.snapshots as f64,
            )?,
        ),
    ];
    for (name, svg) in plots {
        std::fs::write(out_dir.join(name), svg)?;
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum Metric {
    Rmspe,
    Accuracy,
}

const PALETTE: [RGBColor; 5] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// One line per method; RMSPE uses a log axis.
fn plot(
    cells: &[&CellSummary],
    title: &str,
    x_desc: &str,
    metric: Metric,
    x: impl Fn(&CellSummary) -> f64,
) -> Result<String> {
    let value = |c: &CellSummary| match metric {
        Metric::Rmspe => c.median_rmspe,
        Metric::Accuracy => c.sn_accuracy,
    };
    let mut series: BTreeMap<Method, Vec<(f64, f64)>> = BTreeMap::new();
    for c in cells {
        let v = value(c);
        if v.is_finite() && (metric == Metric::Accuracy || v > 0.0) {
            series.entry(c.method).or_default().push((x(c), v));
        }
    }
    let xs: Vec<f64> = series.values().flatten().map(|p| p.0).collect();
    let (mut x0, mut x1) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        (x0, x1) = (x0 - 1.0, x1 + 1.0);
    }
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (640, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut builder = ChartBuilder::on(&root);
        builder
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(70);
        macro_rules! draw {
            ($chart:expr, $y_desc:expr) => {{
                let mut chart = $chart;
                chart
                    .configure_mesh()
                    .x_desc(x_desc)
                    .y_desc($y_desc)
                    .draw()
                    .map_err(plot_err)?;
                for (i, (method, pts)) in series.iter().enumerate() {
                    let color = PALETTE[i % PALETTE.len()];
                    chart
                        .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
                        .map_err(plot_err)?
                        .label(method.name())
                        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
                    chart
                        .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
                        .map_err(plot_err)?;
                }
                chart
                    .configure_series_labels()
                    .background_style(WHITE.mix(0.8))
                    .border_style(BLACK)
                    .draw()
                    .map_err(plot_err)?;
            }};
        }
        match metric {
            Metric::Rmspe => {
                let ys: Vec<f64> = series.values().flatten().map(|p| p.1).collect();
                let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = ys.iter().copied().fold(0.0, f64::max);
                let (lo, hi) = if lo.is_finite() && hi > 0.0 {
                    (lo / 2.0, hi * 2.0)
                } else {
                    (1e-3, 1.0)
                };
                let chart = builder
                    .build_cartesian_2d(x0..x1, (lo..hi).log_scale())
                    .map_err(plot_err)?;
                draw!(chart, "median RMSPE (rad)");
            }
            Metric::Accuracy => {
                let chart = builder.build_cartesian_2d(x0..x1, 0.0..1.0).map_err(plot_err)?;
                draw!(chart, "accuracy of K estimate");
            }
        }
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Runs a classical baseline over every record of a dataset.
pub fn baseline_on_dataset(method: Method, data: &Dataset, cc: &ClassicalConfig) -> Result<Vec<SweepResult>> {
    if method.is_learned() {
        return Err(Error::Config(format!("{method} is not a classical baseline")));
    }
    let Some(first) = data.records.first() else {
        return Ok(Vec::new());
    };
    let geom = ArrayGeometry::ula(first.snapshots.antennas())?;
    let table = SteeringTable::new(&geom, cc.grid_size)?;
    let mut rows: Vec<SweepResult> = data
        .records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let t = record_trial(rec, i, rec.snapshots.snapshots())?;
            Ok(run_classical(method, &t, &table, cc, false))
        })
        .collect::<Result<_>>()?;
    sort_rows(&mut rows);
    Ok(rows)
}
