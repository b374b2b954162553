//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.
//!
//! The desk-scale training run behind criteria 5-7 is cached under the
//! cargo target temp dir, keyed by its configuration; set
//! `TMK_ACCEPTANCE_RETRAIN=1` to force a fresh run. Numeric arguments
//! (`cargo test --test acceptance -- 2 3`) run only those criteria.

#[allow(dead_code)]
mod common;

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use transmusic::array::{
    generate_snapshots, quantize_one_bit, quantize_sample, ArrayGeometry, Quantization, Scenario, SnapshotMatrix,
};
use transmusic::bench::{
    aggregate, baseline_on_dataset, emit, run_sweep, Method, SweepConfig, PLOTS, RAW_CSV, SUMMARY_CSV,
};
use transmusic::classical::{estimate_source_count_eigen, music_from_covariance, ClassicalConfig, SteeringTable};
use transmusic::dataset::{generate_dataset, manifest_path, Dataset, DatasetConfig};
use transmusic::linalg::{hermitian_evd, ComplexMatrix};
use transmusic::model::{ModelConfig, TransMusic};
use transmusic::nn::{Tape, Tensor};
use transmusic::rng::rng_from_seed;
use transmusic::training::{
    cross_entropy, evaluate_model, loss_csv_path, median, rmspe, train, wrap_half_pi, EvalSummary, LossReport,
    TrainConfig,
};

const SNRS: [f64; 3] = [0.0, 5.0, 10.0];

struct Outcome {
    pass: bool,
    details: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Self {
            pass: true,
            details: Vec::new(),
        }
    }

    /// Records a gated check.
    fn check(&mut self, ok: bool, msg: impl Into<String>) {
        self.pass &= ok;
        self.details
            .push(format!("{} {}", if ok { "ok  " } else { "FAIL" }, msg.into()));
    }

    /// Records an informational line that does not gate the criterion.
    fn note(&mut self, msg: impl Into<String>) {
        self.details.push(format!("info {}", msg.into()));
    }

    fn budget(&mut self, elapsed: Duration, limit: Duration) {
        self.check(
            elapsed < limit,
            format!("runtime {:.1} s < {:.0} s", elapsed.as_secs_f64(), limit.as_secs_f64()),
        );
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("linalg suite", linalg_suite),
        ("classical oracle", classical_oracle),
        ("quantization ordering", quantization_ordering),
        ("desk-scale training", desk_training),
        ("source-number estimator", source_number),
        ("snapshot generalization", snapshot_generalization),
        ("invariant suite", invariant_suite),
    ];
    // Numeric arguments select a subset of criteria, e.g. `-- 2 3`.
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut passed = 0;
    let mut lines = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !selected.is_empty() && !selected.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome {
                pass: false,
                details: vec![format!("FAIL panicked: {msg}")],
            }
        });
        let line = format!(
            "[{}] criterion {}: {name} ({:.1} s)",
            if outcome.pass { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64()
        );
        println!("{line}");
        for d in &outcome.details {
            println!("       {d}");
        }
        passed += usize::from(outcome.pass);
        lines.push(line);
    }
    println!("\nacceptance summary: {passed}/{} criteria passed", lines.len());
    for l in &lines {
        println!("{l}");
    }
    if passed != lines.len() {
        std::process::exit(1);
    }
}

fn gradient_suite() -> Outcome {
    use common::gradient_suite::{Checker, CASES, SEEDS, TOL};
    let start = Instant::now();
    let mut out = Outcome::new();
    for (name, case) in CASES {
        let mut c = Checker::default();
        case(&mut c);
        let (which, err) = c.worst().cloned().unwrap_or_default();
        out.check(
            !c.results.is_empty() && err < TOL,
            format!(
                "{name}: {} checks over {SEEDS} seeds, worst {which} {err:.2e} < {TOL:.0e}",
                c.results.len()
            ),
        );
    }
    out.budget(start.elapsed(), Duration::from_secs(60));
    out
}

fn random_hermitian(n: usize, rng: &mut impl Rng) -> ComplexMatrix {
    let mut h = ComplexMatrix::zeros(n, n);
    for i in 0..n {
        h[(i, i)] = Complex64::new(rng.random_range(-1.0..1.0), 0.0);
        for j in i + 1..n {
            let z = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            h[(i, j)] = z;
            h[(j, i)] = z.conj();
        }
    }
    h
}

fn linalg_suite() -> Outcome {
    let start = Instant::now();
    let mut out = Outcome::new();
    let mut rng = rng_from_seed(2);
    let (mut recon, mut ortho, mut trace) = (0.0f64, 0.0f64, 0.0f64);
    let mut failures = 0;
    for _ in 0..1000 {
        let h = random_hermitian(8, &mut rng);
        let Ok(evd) = hermitian_evd(&h) else {
            failures += 1;
            continue;
        };
        recon = recon.max(evd.reconstruct().sub(&h).unwrap().frobenius_norm());
        let v = &evd.eigenvectors;
        let gram = v.conj_transpose().matmul(v).unwrap();
        ortho = ortho.max(gram.sub(&ComplexMatrix::identity(8)).unwrap().frobenius_norm());
        trace = trace.max((evd.eigenvalues.iter().sum::<f64>() - h.trace().re).abs());
    }
    out.check(failures == 0, format!("{failures} decompositions failed"));
    out.check(
        recon < 1e-10,
        format!("max ||V diag(l) V^H - H||_F = {recon:.2e} < 1e-10"),
    );
    out.check(ortho < 1e-10, format!("max ||V^H V - I||_F = {ortho:.2e} < 1e-10"));
    out.check(trace < 1e-9, format!("max |sum(l) - tr H| = {trace:.2e} < 1e-9"));
    out.budget(start.elapsed(), Duration::from_secs(60));
    out
}

/// A diag(p) A^H + σ²I.
fn analytic_covariance(g: &ArrayGeometry, thetas: &[f64], powers: &[f64], sigma2: f64) -> ComplexMatrix {
    let a = g.steering_matrix(thetas).unwrap();
    let m = g.antennas();
    ComplexMatrix::from_fn(m, m, |i, j| {
        let s: Complex64 = (0..thetas.len())
            .map(|k| a[(i, k)] * powers[k] * a[(j, k)].conj())
            .sum();
        s + if i == j {
            Complex64::new(sigma2, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    })
}

/// DOAs at least `sep` apart, kept `edge` away from endfire where the
/// interior-peak rule cannot report a source.
fn oracle_angles(k: usize, sep: f64, edge: f64, rng: &mut impl Rng) -> Vec<f64> {
    let lim = FRAC_PI_2 - edge;
    loop {
        let mut t: Vec<f64> = (0..k).map(|_| rng.random_range(-lim..lim)).collect();
        t.sort_by(f64::total_cmp);
        if t.windows(2).all(|w| w[1] - w[0] > sep) {
            return t;
        }
    }
}

/// Worst per-source DOA error and number of wrong eigen counts over
/// `trials` random geometries with K sources.
fn oracle_run(k: usize, sigma2: f64, trials: usize, table: &SteeringTable, seed: u64) -> (f64, usize) {
    let g = ArrayGeometry::ula(table.antennas).unwrap();
    let tau = ClassicalConfig::default().eigen_tau;
    let mut rng = rng_from_seed(seed);
    let (mut worst, mut miscounts) = (0.0f64, 0);
    for _ in 0..trials {
        let thetas = oracle_angles(k, 5f64.to_radians(), 5f64.to_radians(), &mut rng);
        let r = analytic_covariance(&g, &thetas, &vec![1.0; k], sigma2);
        let est = music_from_covariance(&r, k, table).unwrap();
        for t in &thetas {
            let err = est
                .angles
                .iter()
                .map(|e| wrap_half_pi(e - t).abs())
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(err);
        }
        miscounts += usize::from(estimate_source_count_eigen(&est.eigenvalues, tau).unwrap() != k);
    }
    (worst, miscounts)
}

fn classical_oracle() -> Outcome {
    let start = Instant::now();
    let mut out = Outcome::new();
    let g = ArrayGeometry::ula(8).unwrap();
    let table = SteeringTable::new(&g, ClassicalConfig::default().grid_size).unwrap();
    let cell = 0.05f64.to_radians();
    let trials = 250;
    // Exact covariance in the low-noise limit: the noise eigenvalues equal
    // σ² to rounding, so the multiplicity rule sees the true model order.
    let sigma2 = 1e-6;
    for k in 2..=5 {
        let (worst, miscounts) = oracle_run(k, sigma2, trials, &table, 30 + k as u64);
        out.check(
            worst <= cell,
            format!(
                "K={k}: worst DOA error {:.4} deg <= 0.05 deg over {trials} geometries",
                worst.to_degrees()
            ),
        );
        out.check(
            miscounts == 0,
            format!("K={k}: eigen count wrong in {miscounts}/{trials}"),
        );
    }
    out.note(format!(
        "unit source powers, sigma^2 = {sigma2:e}, separations > 5 deg, |DOA| < 85 deg"
    ));
    // At 10 dB the smallest signal eigenvalue of a tight cluster can sit
    // within (1 + τ) of the noise floor; reported, not gated.
    let rates: Vec<String> = (2..=5)
        .map(|k| {
            let (w, m) = oracle_run(k, 0.1, trials, &table, 30 + k as u64);
            format!("K={k}: {m}/{trials} miscounts, worst {:.4} deg", w.to_degrees())
        })
        .collect();
    out.note(format!("sigma^2 = 0.1 (10 dB): {}", rates.join("; ")));
    out.budget(start.elapsed(), Duration::from_secs(60));
    out
}

fn quantization_ordering() -> Outcome {
    let start = Instant::now();
    let mut out = Outcome::new();
    let cfg = SweepConfig {
        methods: vec![Method::Music, Method::OneBitMusic],
        snr_db: SNRS.to_vec(),
        snapshots: vec![200],
        trials: 200,
        k_min: 2,
        k_max: 2,
        seed: 4,
        record_timing: false,
        ..Default::default()
    };
    let cells = aggregate(&run_sweep(&cfg).unwrap()).unwrap();
    let medians = |m: Method| -> Vec<f64> {
        SNRS.iter()
            .map(|&s| {
                cells
                    .iter()
                    .find(|c| c.method == m && c.snr_db == s)
                    .unwrap()
                    .median_rmspe
            })
            .collect()
    };
    let (music, one_bit) = (medians(Method::Music), medians(Method::OneBitMusic));
    for (i, s) in SNRS.iter().enumerate() {
        out.check(
            one_bit[i] >= music[i],
            format!(
                "SNR {s} dB: one-bit MUSIC median {:.3} deg >= MUSIC median {:.3} deg",
                one_bit[i].to_degrees(),
                music[i].to_degrees()
            ),
        );
    }
    let non_increasing = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0]);
    out.check(non_increasing(&music), "MUSIC median non-increasing in SNR");
    out.check(non_increasing(&one_bit), "one-bit MUSIC median non-increasing in SNR");
    out.budget(start.elapsed(), Duration::from_secs(300));
    out
}

// ---------------------------------------------------------------------------
// Desk-scale run shared by criteria 5-7.

#[derive(Serialize)]
struct DeskSpec {
    train_data: DatasetConfig,
    test_data: DatasetConfig,
    train: TrainConfig,
    model: ModelConfig,
}

#[derive(Serialize, Deserialize)]
struct DeskMeta {
    train_seconds: f64,
    reports: Vec<LossReport>,
}

struct Desk {
    meta: DeskMeta,
    model: TransMusic,
    test: Dataset,
    eval: EvalSummary,
    eval_seconds: f64,
    cached: bool,
}

fn desk_spec() -> DeskSpec {
    DeskSpec {
        train_data: DatasetConfig {
            count: 22_000,
            base_seed: 1,
            ..Default::default()
        },
        test_data: DatasetConfig {
            count: 2_000,
            base_seed: 2,
            ..Default::default()
        },
        train: TrainConfig {
            seed: 1,
            validation_fraction: 1.0 / 11.0,
            ..Default::default()
        },
        model: ModelConfig::default(),
    }
}

fn desk() -> &'static Result<Desk, String> {
    static DESK: OnceLock<Result<Desk, String>> = OnceLock::new();
    DESK.get_or_init(|| build_desk().map_err(|e| e.to_string()))
}

fn build_desk() -> transmusic::Result<Desk> {
    let spec = desk_spec();
    let key = Sha256::digest(serde_json::to_vec(&spec)?);
    let key: String = key.iter().take(8).map(|b| format!("{b:02x}")).collect();
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-desk-{key}"));
    std::fs::create_dir_all(&dir)?;
    let (train_path, test_path) = (dir.join("train.tmds"), dir.join("test.tmds"));
    let (ckpt, meta_path) = (dir.join("transmusic.tmck"), dir.join("run.json"));
    let retrain = std::env::var("TMK_ACCEPTANCE_RETRAIN").is_ok_and(|v| v == "1");
    for (cfg, path) in [(&spec.train_data, &train_path), (&spec.test_data, &test_path)] {
        if !path.exists() || !manifest_path(path).exists() {
            eprintln!("acceptance: generating {}", path.display());
            generate_dataset(cfg, path)?;
        }
    }
    let cached = !retrain && meta_path.exists() && ckpt.exists();
    let meta = if cached {
        serde_json::from_slice(&std::fs::read(&meta_path)?)?
    } else {
        let data = Dataset::read(&train_path)?;
        eprintln!("acceptance: training on {} records into {}", data.len(), dir.display());
        let start = Instant::now();
        let outcome = train(&spec.train, &spec.model, &data, &ckpt, |r| {
            eprintln!(
                "acceptance: epoch {:>2} train {:.4} ce {:.4} val {:.4} acc {:.3} ({:.0} s)",
                r.epoch,
                r.train_rmspe,
                r.train_ce,
                r.val_rmspe,
                r.val_sn_acc,
                start.elapsed().as_secs_f64()
            )
        })?;
        let meta = DeskMeta {
            train_seconds: start.elapsed().as_secs_f64(),
            reports: outcome.reports,
        };
        std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?)?;
        meta
    };
    let model = TransMusic::load(&ckpt)?;
    let test = Dataset::read(&test_path)?;
    let start = Instant::now();
    let eval = evaluate_model(&model, &test.records, Quantization::OneBit, None)?;
    Ok(Desk {
        meta,
        model,
        test,
        eval,
        eval_seconds: start.elapsed().as_secs_f64(),
        cached,
    })
}

fn baseline_medians(method: Method, test: &Dataset) -> (Vec<f64>, Vec<transmusic::bench::SweepResult>) {
    let rows = baseline_on_dataset(method, test, &ClassicalConfig::default()).unwrap();
    let medians = SNRS
        .iter()
        .map(|&s| {
            median(
                rows.iter()
                    .filter(|r| r.snr_db == s)
                    .map(|r| r.rmspe_rad.unwrap_or(FRAC_PI_2))
                    .collect(),
            )
        })
        .collect();
    (medians, rows)
}

fn desk_training() -> Outcome {
    let mut out = Outcome::new();
    let d = match desk() {
        Ok(d) => d,
        Err(e) => {
            out.check(false, format!("desk-scale run failed: {e}"));
            return out;
        }
    };
    let reports = &d.meta.reports;
    let (first, last) = (&reports[0], reports.last().unwrap());
    out.check(
        last.val_rmspe * 5.0 < first.val_rmspe,
        format!(
            "final val RMSPE {:.4} rad x 5 < initial {:.4} rad (ratio {:.2}, {} epochs)",
            last.val_rmspe,
            first.val_rmspe,
            first.val_rmspe / last.val_rmspe,
            last.epoch
        ),
    );
    let (one_bit, _) = baseline_medians(Method::OneBitMusic, &d.test);
    let (music, _) = baseline_medians(Method::Music, &d.test);
    for (i, &s) in SNRS.iter().enumerate() {
        let tm = d.eval.at_snr(s).median_rmspe();
        out.check(
            tm < one_bit[i],
            format!(
                "SNR {s} dB: one-bit TransMUSIC median {:.3} deg < one-bit MUSIC median {:.3} deg",
                tm.to_degrees(),
                one_bit[i].to_degrees()
            ),
        );
        out.note(format!(
            "stretch, SNR {s} dB: one-bit TransMUSIC {:.3} deg vs unquantized MUSIC {:.3} deg ({})",
            tm.to_degrees(),
            music[i].to_degrees(),
            if tm < music[i] { "beaten" } else { "not beaten" }
        ));
    }
    let total = d.meta.train_seconds + d.eval_seconds;
    out.check(
        total < 7200.0,
        format!(
            "training {:.0} s + test evaluation {:.0} s < 7200 s{}",
            d.meta.train_seconds,
            d.eval_seconds,
            if d.cached { " (training time from cache)" } else { "" }
        ),
    );
    // Training-loop invariant: the total training loss over the first ten
    // epochs has a non-increasing 5-epoch moving average.
    let loss: Vec<f64> = reports
        .iter()
        .skip(1)
        .take(10)
        .map(|r| r.train_rmspe + desk_spec().train.ce_weight * r.train_ce)
        .collect();
    let ma: Vec<f64> = loss.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let ok = ma.len() == 6 && ma.windows(2).all(|w| w[1] <= w[0]);
    out.note(format!(
        "invariant {}: 5-epoch moving average of training loss over epochs 1-10 non-increasing {:?}",
        if ok { "holds" } else { "VIOLATED" },
        ma.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>()
    ));
    out
}

fn source_number() -> Outcome {
    let mut out = Outcome::new();
    let d = match desk() {
        Ok(d) => d,
        Err(e) => {
            out.check(false, format!("desk-scale run failed: {e}"));
            return out;
        }
    };
    let (_, rows) = baseline_medians(Method::OneBitMusic, &d.test);
    let at10: Vec<_> = rows.iter().filter(|r| r.snr_db == 10.0).collect();
    let eigen_acc = at10.iter().filter(|r| r.k_hat == r.k_true).count() as f64 / at10.len() as f64;
    let learned = d.eval.at_snr(10.0);
    let acc = learned.sn_accuracy();
    out.check(
        acc > eigen_acc,
        format!(
            "SNR 10 dB: SN head accuracy {acc:.3} > eigen-multiplicity accuracy {eigen_acc:.3} ({} records)",
            learned.records.len()
        ),
    );
    for s in [0.0, 5.0] {
        out.note(format!(
            "SN head accuracy at {s} dB: {:.3}",
            d.eval.at_snr(s).sn_accuracy()
        ));
    }
    out
}

fn snapshot_generalization() -> Outcome {
    let mut out = Outcome::new();
    let d = match desk() {
        Ok(d) => d,
        Err(e) => {
            out.check(false, format!("desk-scale run failed: {e}"));
            return out;
        }
    };
    let mut medians = Vec::new();
    for l in [50, 100, 200] {
        let eval = evaluate_model(&d.model, &d.test.records, Quantization::OneBit, Some(l)).unwrap();
        let finite = eval.records.iter().all(|r| r.rmspe.is_finite());
        let m = eval.median_rmspe();
        out.check(
            finite,
            format!("L={l}: all RMSPE finite, median {:.3} deg", m.to_degrees()),
        );
        medians.push(m);
    }
    out.check(
        medians[2] <= medians[0],
        format!(
            "median RMSPE at L=200 ({:.3} deg) <= at L=50 ({:.3} deg)",
            medians[2].to_degrees(),
            medians[0].to_degrees()
        ),
    );
    out
}

// ---------------------------------------------------------------------------

fn one_bit(thetas: &[f64], snr: f64, l: usize, seed: u64) -> SnapshotMatrix {
    let g = ArrayGeometry::ula(8).unwrap();
    let sc = Scenario::new(thetas.to_vec(), snr, l).unwrap();
    quantize_one_bit(&generate_snapshots(&sc, &g, seed).unwrap()).unwrap()
}

fn files_digest(paths: &[PathBuf]) -> Vec<u8> {
    let mut h = Sha256::new();
    for p in paths {
        h.update(std::fs::read(p).unwrap());
    }
    h.finalize().to_vec()
}

fn invariant_suite() -> Outcome {
    let mut out = Outcome::new();
    let mut rng = rng_from_seed(8);

    // Quantizer.
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut ok = true;
    for _ in 0..200 {
        let y = ComplexMatrix::from_fn(8, 20, |_, _| {
            Complex64::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))
        });
        let q = quantize_one_bit(&SnapshotMatrix::unquantized(y)).unwrap();
        let qq = quantize_one_bit(&SnapshotMatrix::unquantized(q.matrix().clone())).unwrap();
        ok &= qq.matrix() == q.matrix();
        ok &= q
            .matrix()
            .as_slice()
            .iter()
            .all(|z| z.re.abs() == h && z.im.abs() == h && quantize_sample(*z) == *z);
    }
    out.check(ok, "quantizer idempotent with entries in {+-1/sqrt2}^2 (200 matrices)");

    // RMSPE.
    let corner = rmspe(&[89f64.to_radians()], &[-89f64.to_radians()]).unwrap();
    out.check(
        (corner - PI / 90.0).abs() < 1e-12,
        format!("RMSPE(89 deg, -89 deg) = {corner:.15} = pi/90"),
    );
    let mut ok = true;
    for _ in 0..500 {
        let k = rng.random_range(1..=5);
        let t: Vec<f64> = (0..k).map(|_| rng.random_range(-1.55..1.55)).collect();
        let e: Vec<f64> = (0..k).map(|_| rng.random_range(-1.55..1.55)).collect();
        let base = rmspe(&t, &e).unwrap();
        let mut perm = e.clone();
        perm.shuffle(&mut rng);
        let n = f64::from(rng.random_range(-3i32..=3));
        let shifted: Vec<f64> = e.iter().map(|x| x + n * PI).collect();
        ok &= (0.0..=FRAC_PI_2).contains(&base);
        ok &= (rmspe(&t, &perm).unwrap() - base).abs() < 1e-12;
        ok &= (rmspe(&t, &shifted).unwrap() - base).abs() < 1e-9;
        ok &= rmspe(&t, &t).unwrap() == 0.0;
    }
    out.check(
        ok,
        "RMSPE zero on equal sets, bounded, permutation and pi-shift invariant (500 draws)",
    );

    // End-to-end snapshot-permutation invariance.
    let model = TransMusic::new(ModelConfig::default(), 6).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let z = one_bit(&[-0.3, 0.4, 1.1], 5.0, 200, seed);
        let a = model.forward(&z).unwrap();
        let mut idx: Vec<usize> = (0..200).collect();
        idx.shuffle(&mut rng);
        let b = model.forward(&z.select_snapshots(&idx)).unwrap();
        for (x, y) in a.doas.iter().chain(&a.sn_probs).zip(b.doas.iter().chain(&b.sn_probs)) {
            worst = worst.max((x - y).abs());
        }
    }
    out.check(
        worst < 1e-9,
        format!("snapshot permutation changes outputs by {worst:.2e} < 1e-9"),
    );

    // Softmax normalization.
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let v: Vec<f64> = (0..4 * 7).map(|_| rng.random_range(-60.0..60.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(4, 7, v).unwrap());
        let y = tape.softmax(x).unwrap();
        for r in 0..4 {
            let row = tape.value(y).row(r);
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                worst = f64::INFINITY;
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let out_probs = model.forward(&one_bit(&[0.2, -0.9], 0.0, 50, 1)).unwrap().sn_probs;
    worst = worst.max((out_probs.iter().sum::<f64>() - 1.0).abs());
    out.check(worst < 1e-12, format!("softmax rows sum to 1 within {worst:.2e}"));

    // Stop-gradient.
    let z = one_bit(&[-0.2, 0.6, 1.0], 5.0, 30, 4);
    let mut tape = Tape::new();
    let p = model.store().bind(&mut tape, true);
    let fwd = model.forward_on(&mut tape, &p, &[&z]).unwrap();
    let ce = cross_entropy(&mut tape, fwd.sn_probs, &[3], 1.0).unwrap();
    tape.backward(ce).unwrap();
    let mut leaked = Vec::new();
    let mut sn_reached = false;
    for (param, &v) in model.store().params().iter().zip(p.vars()) {
        let nonzero = tape.grad(v).is_some_and(|g| g.iter().any(|x| *x != 0.0));
        if param.name.starts_with("sn.") {
            sn_reached |= nonzero;
        } else if nonzero {
            leaked.push(param.name.clone());
        }
    }
    out.check(
        leaked.is_empty() && sn_reached,
        format!("cross-entropy gradient reaches only the SN head (leaks: {leaked:?})"),
    );

    // Bit-identical reruns.
    let dir = tempfile::tempdir().unwrap();
    let data_cfg = DatasetConfig {
        count: 160,
        base_seed: 11,
        ..Default::default()
    };
    let mut digests = Vec::new();
    for name in ["a", "b"] {
        let p = dir.path().join(format!("{name}.tmds"));
        generate_dataset(&data_cfg, &p).unwrap();
        digests.push(files_digest(&[p.clone(), manifest_path(&p)]));
    }
    out.check(digests[0] == digests[1], "gen-data reruns byte-identical");

    let data = Dataset::read(&dir.path().join("a.tmds")).unwrap();
    let train_cfg = TrainConfig {
        epochs: 5,
        seed: 3,
        ..Default::default()
    };
    let mut digests = Vec::new();
    for name in ["a", "b"] {
        let ckpt = dir.path().join(format!("{name}.tmck"));
        train(&train_cfg, &ModelConfig::default(), &data, &ckpt, |_| {}).unwrap();
        digests.push(files_digest(&[ckpt.clone(), loss_csv_path(&ckpt)]));
    }
    out.check(digests[0] == digests[1], "train (5 epochs) reruns byte-identical");

    let sweep = SweepConfig {
        snapshots: vec![50, 200],
        trials: 10,
        seed: 5,
        record_timing: false,
        ..Default::default()
    };
    let mut digests = Vec::new();
    for name in ["sa", "sb"] {
        let rows = run_sweep(&sweep).unwrap();
        let o = dir.path().join(name);
        emit(&rows, &aggregate(&rows).unwrap(), &o).unwrap();
        let files: Vec<PathBuf> = [RAW_CSV, SUMMARY_CSV]
            .into_iter()
            .chain(PLOTS)
            .map(|f| o.join(f))
            .collect();
        digests.push(files_digest(&files));
    }
    out.check(digests[0] == digests[1], "sweep reruns byte-identical (csv and plots)");
    out
}
