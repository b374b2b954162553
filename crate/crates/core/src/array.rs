//! Uniform linear array simulation and complex one-bit quantization.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, ComplexMatrix};
use crate::rng::rng_from_seed;

const ANGLE_SLACK: f64 = 1e-12;

/// Antenna positions in half-wavelength units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    positions: Vec<i64>,
}

impl ArrayGeometry {
    /// ULA with `r_m = m - 1`.
    pub fn ula(m: usize) -> Result<Self> {
        Self::new((0..m as i64).collect())
    }

    pub fn new(positions: Vec<i64>) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::Config(format!(
                "an array needs at least 2 antennas, got {}",
                positions.len()
            )));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("antenna positions must be strictly increasing".into()));
        }
        Ok(Self { positions })
    }

    pub fn antennas(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[i64] {
        &self.positions
    }

    /// exp(jπ r_m sinθ) without the range check, for grid scans.
    pub fn steering_unchecked(&self, theta: f64) -> Vec<Complex64> {
        let s = theta.sin();
        self.positions
            .iter()
            .map(|&r| Complex64::from_polar(1.0, PI * r as f64 * s))
            .collect()
    }

    /// A(θ) with one steering column per angle.
    pub fn steering_matrix(&self, thetas: &[f64]) -> Result<ComplexMatrix> {
        let cols = thetas
            .iter()
            .map(|&t| steering_vector(t, self))
            .collect::<Result<Vec<_>>>()?;
        ComplexMatrix::from_columns(&cols)
    }
}

/// Array response a(θ) for spacing d = λ/2: element m is exp(jπ r_m sinθ).
pub fn steering_vector(theta: f64, geometry: &ArrayGeometry) -> Result<Vec<Complex64>> {
    if !(theta.abs() <= FRAC_PI_2 + ANGLE_SLACK) {
        return Err(Error::Domain(format!("angle {theta} rad outside [-π/2, π/2]")));
    }
    Ok(geometry.steering_unchecked(theta))
}

/// Ground truth for one simulated acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    thetas: Vec<f64>,
    snr_db: f64,
    snapshots: usize,
}

impl Scenario {
    /// `snr_db = f64::INFINITY` means noiseless.
    pub fn new(thetas: Vec<f64>, snr_db: f64, snapshots: usize) -> Result<Self> {
        if thetas.is_empty() {
            return Err(Error::Domain("a scenario needs at least one source".into()));
        }
        if snapshots == 0 {
            return Err(Error::Domain("a scenario needs at least one snapshot".into()));
        }
        if snr_db.is_nan() {
            return Err(Error::Numeric("SNR is NaN".into()));
        }
        for &t in &thetas {
            if !(t.abs() < FRAC_PI_2) {
                return Err(Error::Domain(format!("angle {t} rad outside (-π/2, π/2)")));
            }
        }
        for (i, a) in thetas.iter().enumerate() {
            if thetas[i + 1..].contains(a) {
                return Err(Error::Domain(format!("duplicate angle {a}")));
            }
        }
        Ok(Self {
            thetas,
            snr_db,
            snapshots,
        })
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn sources(&self) -> usize {
        self.thetas.len()
    }

    pub fn snr_db(&self) -> f64 {
        self.snr_db
    }

    pub fn snapshots(&self) -> usize {
        self.snapshots
    }

    /// Noise variance σ² = 10^(-SNR/10) with unit source powers.
    pub fn noise_variance(&self) -> f64 {
        10f64.powf(-self.snr_db / 10.0)
    }

    pub fn with_snapshots(&self, snapshots: usize) -> Result<Self> {
        Self::new(self.thetas.clone(), self.snr_db, snapshots)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantization {
    Unquantized,
    OneBit,
}

/// M×L samples, one column per snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix {
    data: ComplexMatrix,
    quantization: Quantization,
}

impl SnapshotMatrix {
    pub fn new(data: ComplexMatrix, quantization: Quantization) -> Result<Self> {
        if quantization == Quantization::OneBit {
            let ok = data
                .as_slice()
                .iter()
                .all(|z| z.re.abs() == FRAC_1_SQRT_2 && z.im.abs() == FRAC_1_SQRT_2);
            if !ok {
                return Err(Error::Tag("entry outside the one-bit alphabet".into()));
            }
        }
        Ok(Self { data, quantization })
    }

    pub fn unquantized(data: ComplexMatrix) -> Self {
        Self {
            data,
            quantization: Quantization::Unquantized,
        }
    }

    pub fn antennas(&self) -> usize {
        self.data.rows()
    }

    pub fn snapshots(&self) -> usize {
        self.data.cols()
    }

    pub fn quantization(&self) -> Quantization {
        self.quantization
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.data
    }

    /// Sample at antenna `m`, snapshot `t`.
    pub fn at(&self, m: usize, t: usize) -> Complex64 {
        self.data[(m, t)]
    }

    pub fn sample_covariance(&self) -> Result<ComplexMatrix> {
        linalg::sample_covariance(&self.data)
    }

    /// Keeps the listed snapshot columns in order.
    pub fn select_snapshots(&self, idx: &[usize]) -> Self {
        Self {
            data: self.data.select_columns(idx),
            quantization: self.quantization,
        }
    }

    /// Applies the configured input arm: one-bit quantization or pass-through.
    pub fn with_quantization(&self, q: Quantization) -> Result<Self> {
        match (self.quantization, q) {
            (a, b) if a == b => Ok(self.clone()),
            (Quantization::Unquantized, Quantization::OneBit) => quantize_one_bit(self),
            _ => Err(Error::Tag("one-bit data cannot be dequantized".into())),
        }
    }
}

/// Statistics of the source signals x(t).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceModel {
    /// Independent CN(0, 1) per source and snapshot.
    Gaussian,
    /// Every source emits this constant; a deterministic test hook.
    Constant(Complex64),
}

/// Y = A(θ)X + N with unit-power CN sources and CN(0, σ²I) noise.
pub fn generate_snapshots(scenario: &Scenario, geometry: &ArrayGeometry, rng_seed: u64) -> Result<SnapshotMatrix> {
    generate_snapshots_with(scenario, geometry, rng_seed, SourceModel::Gaussian)
}

pub fn generate_snapshots_with(
    scenario: &Scenario,
    geometry: &ArrayGeometry,
    rng_seed: u64,
    sources: SourceModel,
) -> Result<SnapshotMatrix> {
    let m = geometry.antennas();
    let k = scenario.sources();
    if k >= m {
        return Err(Error::Capability(format!(
            "{k} sources cannot be resolved by {m} antennas"
        )));
    }
    let l = scenario.snapshots();
    let a = geometry.steering_matrix(scenario.thetas())?;
    let noise_std = (scenario.noise_variance() / 2.0).sqrt();
    let src_std = FRAC_1_SQRT_2;
    let mut rng = rng_from_seed(rng_seed);
    let mut y = ComplexMatrix::zeros(m, l);
    let mut x = vec![Complex64::new(0.0, 0.0); k];
    // Per snapshot: K source draws then M noise draws, re before im.
    for t in 0..l {
        for xi in x.iter_mut() {
            *xi = match sources {
                SourceModel::Gaussian => Complex64::new(
                    rng.sample::<f64, _>(StandardNormal) * src_std,
                    rng.sample::<f64, _>(StandardNormal) * src_std,
                ),
                SourceModel::Constant(c) => c,
            };
        }
        for i in 0..m {
            let mut acc: Complex64 = a.row(i).iter().zip(&x).map(|(a, x)| a * x).sum();
            if noise_std > 0.0 {
                acc += Complex64::new(
                    rng.sample::<f64, _>(StandardNormal) * noise_std,
                    rng.sample::<f64, _>(StandardNormal) * noise_std,
                );
            }
            y[(i, t)] = acc;
        }
    }
    Ok(SnapshotMatrix::unquantized(y))
}

fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Q1(y) = (sign(Re y) + j sign(Im y)) / √2, with sign(0) = +1.
pub fn quantize_sample(z: Complex64) -> Complex64 {
    Complex64::new(sign(z.re) * FRAC_1_SQRT_2, sign(z.im) * FRAC_1_SQRT_2)
}

pub fn quantize_one_bit(y: &SnapshotMatrix) -> Result<SnapshotMatrix> {
    if !y.data.is_finite() {
        return Err(Error::Numeric("non-finite sample cannot be quantized".into()));
    }
    let mut data = y.data.clone();
    for z in data.as_mut_slice() {
        *z = quantize_sample(*z);
    }
    Ok(SnapshotMatrix {
        data,
        quantization: Quantization::OneBit,
    })
}

/// Distance between two angles on the π-periodic DOA circle.
pub fn wrapped_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

/// K angles i.i.d. uniform on (−π/2, π/2), ascending, optionally redrawn
/// until every pair is at least `min_separation` apart (wrapped distance).
pub fn sample_angles(k: usize, min_separation: Option<f64>, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if let Some(sep) = min_separation {
        if sep * k as f64 >= PI {
            return Err(Error::Capability(format!("cannot place {k} angles {sep} rad apart")));
        }
    }
    loop {
        let mut th: Vec<f64> = (0..k)
            .map(|_| loop {
                let t = -FRAC_PI_2 + PI * rng.random::<f64>();
                if t > -FRAC_PI_2 {
                    break t;
                }
            })
            .collect();
        th.sort_by(f64::total_cmp);
        let ok = match min_separation {
            None => th.windows(2).all(|w| w[0] < w[1]),
            Some(sep) => (0..k).all(|i| (i + 1..k).all(|j| wrapped_distance(th[i], th[j]) >= sep)),
        };
        if ok {
            return Ok(th);
        }
    }
}
