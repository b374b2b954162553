//! Model-based baselines: MUSIC, Bartlett beamformer, arcsine-law one-bit
//! MUSIC and eigenvalue-multiplicity source counting.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::array::{ArrayGeometry, Quantization, SnapshotMatrix};
use crate::error::{dim_err, Error, Result};
use crate::linalg::{hermitian_evd, ComplexMatrix};

/// Added to the MUSIC denominator so exact orthogonality stays finite.
pub const SPECTRUM_FLOOR: f64 = 1e-12;
/// 0.05° spacing over [−90°, 90°].
pub const DEFAULT_GRID: usize = 3601;
pub const DEFAULT_EIGEN_TAU: f64 = 0.2;
pub const DEFAULT_BEAM_ETA: f64 = 0.5;

/// `count` angles uniformly spaced from −π/2 to π/2 inclusive.
pub fn angle_grid(count: usize) -> Vec<f64> {
    let step = PI / (count - 1) as f64;
    (0..count).map(|i| -FRAC_PI_2 + step * i as f64).collect()
}

/// A pseudo-spectrum sampled on an angle grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumOnGrid {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl SpectrumOnGrid {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }

    /// Indices of interior points strictly above both neighbours.
    pub fn local_maxima(&self) -> Vec<usize> {
        let v = &self.values;
        (1..v.len().saturating_sub(1))
            .filter(|&i| v[i] > v[i - 1] && v[i] > v[i + 1])
            .collect()
    }
}

/// M×(M−K) exact or M×M learned noise subspace.
#[derive(Debug, Clone)]
pub struct NoiseSubspace {
    pub basis: ComplexMatrix,
    pub orthonormal: bool,
}

impl NoiseSubspace {
    pub fn exact(basis: ComplexMatrix) -> Self {
        Self {
            basis,
            orthonormal: true,
        }
    }

    pub fn augmented(basis: ComplexMatrix) -> Self {
        Self {
            basis,
            orthonormal: false,
        }
    }
}

/// Per-grid-point steering vectors split into real and imaginary parts,
/// shared by the classical spectrum and the differentiable spectrum layer.
#[derive(Debug, Clone)]
pub struct SteeringTable {
    pub grid: Vec<f64>,
    pub antennas: usize,
    /// Row-major G×M.
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl SteeringTable {
    pub fn new(geometry: &ArrayGeometry, grid_size: usize) -> Result<Self> {
        if grid_size < 2 {
            return Err(Error::Domain(format!("grid needs >= 2 points, got {grid_size}")));
        }
        let grid = angle_grid(grid_size);
        let m = geometry.antennas();
        let mut re = Vec::with_capacity(grid_size * m);
        let mut im = Vec::with_capacity(grid_size * m);
        for &psi in &grid {
            for a in geometry.steering_unchecked(psi) {
                re.push(a.re);
                im.push(a.im);
            }
        }
        Ok(Self {
            grid,
            antennas: m,
            re,
            im,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// q(ψ) = ‖E^H a(ψ)‖² = a^H E E^H a for every grid point, with E given
    /// as separate real and imaginary row-major M×C blocks.
    pub fn projection_power(&self, e_re: &[f64], e_im: &[f64], cols: usize) -> Vec<f64> {
        let m = self.antennas;
        let mut out = Vec::with_capacity(self.len());
        let mut br = vec![0.0; cols];
        let mut bi = vec![0.0; cols];
        for g in 0..self.len() {
            br.iter_mut().for_each(|x| *x = 0.0);
            bi.iter_mut().for_each(|x| *x = 0.0);
            let ar = &self.re[g * m..(g + 1) * m];
            let ai = &self.im[g * m..(g + 1) * m];
            // (a^H E)_c = Σ_m conj(a_m) E_mc
            for i in 0..m {
                let row_r = &e_re[i * cols..(i + 1) * cols];
                let row_i = &e_im[i * cols..(i + 1) * cols];
                for c in 0..cols {
                    br[c] += ar[i] * row_r[c] + ai[i] * row_i[c];
                    bi[c] += ar[i] * row_i[c] - ai[i] * row_r[c];
                }
            }
            out.push(br.iter().zip(&bi).map(|(r, i)| r * r + i * i).sum());
        }
        out
    }
}

/// P(ψ) = 1 / (a^H(ψ) E E^H a(ψ) + ε_floor).
pub fn music_spectrum(en: &NoiseSubspace, geometry: &ArrayGeometry, grid_size: usize) -> Result<SpectrumOnGrid> {
    let table = SteeringTable::new(geometry, grid_size)?;
    music_spectrum_on(en, &table)
}

pub fn music_spectrum_on(en: &NoiseSubspace, table: &SteeringTable) -> Result<SpectrumOnGrid> {
    let e = &en.basis;
    if e.rows() != table.antennas {
        return dim_err(format!(
            "noise subspace has {} rows for {} antennas",
            e.rows(),
            table.antennas
        ));
    }
    let re: Vec<f64> = e.as_slice().iter().map(|z| z.re).collect();
    let im: Vec<f64> = e.as_slice().iter().map(|z| z.im).collect();
    let values = table
        .projection_power(&re, &im, e.cols())
        .into_iter()
        .map(|q| 1.0 / (q + SPECTRUM_FLOOR))
        .collect();
    Ok(SpectrumOnGrid {
        grid: table.grid.clone(),
        values,
    })
}

/// The `k` largest strict local maxima, padded with the largest unused grid
/// points when there are fewer peaks; ties go to the smaller index. Sorted
/// ascending.
pub fn find_peaks(spec: &SpectrumOnGrid, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Domain("peak count must be >= 1".into()));
    }
    if k > spec.len() {
        return Err(Error::Domain(format!(
            "{k} peaks requested from {} grid points",
            spec.len()
        )));
    }
    let v = &spec.values;
    let by_value = |a: &usize, b: &usize| v[*b].total_cmp(&v[*a]).then(a.cmp(b));
    let mut picked = spec.local_maxima();
    picked.sort_by(by_value);
    picked.truncate(k);
    if picked.len() < k {
        let mut rest: Vec<usize> = (0..v.len()).filter(|i| !picked.contains(i)).collect();
        rest.sort_by(by_value);
        picked.extend(rest.into_iter().take(k - picked.len()));
    }
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| spec.grid[i]).collect())
}

/// Model-order estimate from descending eigenvalues: the eigenvalues within
/// a factor (1 + τ) of the smallest are taken as noise.
pub fn estimate_source_count_eigen(eigenvalues: &[f64], tau: f64) -> Result<usize> {
    if eigenvalues.len() < 2 {
        return dim_err("source counting needs at least 2 eigenvalues");
    }
    let n = eigenvalues.len();
    let clamped: Vec<f64> = eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let smallest = clamped.iter().copied().fold(f64::INFINITY, f64::min);
    let cluster = clamped.iter().filter(|&&l| l <= (1.0 + tau) * smallest).count();
    Ok((n - cluster).min(n - 1))
}

/// Angle estimates with the estimator's own model-order guess.
#[derive(Debug, Clone)]
pub struct SubspaceEstimate {
    pub angles: Vec<f64>,
    pub spectrum: SpectrumOnGrid,
    pub eigenvalues: Vec<f64>,
}

impl SubspaceEstimate {
    pub fn source_count(&self, tau: f64) -> usize {
        estimate_source_count_eigen(&self.eigenvalues, tau).unwrap_or(0)
    }
}

/// MUSIC on a covariance estimate with a known source count.
pub fn music_from_covariance(r: &ComplexMatrix, k: usize, table: &SteeringTable) -> Result<SubspaceEstimate> {
    let m = r.rows();
    if k == 0 || k >= m {
        return Err(Error::Domain(format!("MUSIC needs 1 <= K < M, got K={k}, M={m}")));
    }
    let evd = hermitian_evd(r)?;
    let en = NoiseSubspace::exact(evd.smallest(m - k));
    let spectrum = music_spectrum_on(&en, table)?;
    let angles = find_peaks(&spectrum, k)?;
    Ok(SubspaceEstimate {
        angles,
        spectrum,
        eigenvalues: evd.eigenvalues,
    })
}

pub fn music_estimate(z: &SnapshotMatrix, k: usize, geometry: &ArrayGeometry, grid_size: usize) -> Result<Vec<f64>> {
    let table = SteeringTable::new(geometry, grid_size)?;
    Ok(music_estimate_on(z, k, &table)?.angles)
}

pub fn music_estimate_on(z: &SnapshotMatrix, k: usize, table: &SteeringTable) -> Result<SubspaceEstimate> {
    check_rows(z, table)?;
    music_from_covariance(&z.sample_covariance()?, k, table)
}

/// Maps a one-bit sample covariance to the normalized unquantized one via
/// the arcsine law, applied separately to real and imaginary parts.
pub fn arcsine_covariance(rz: &ComplexMatrix) -> Result<ComplexMatrix> {
    if !rz.is_square() {
        return dim_err("arcsine law needs a square matrix");
    }
    if !rz.is_finite() {
        return Err(Error::Numeric("non-finite covariance entry".into()));
    }
    let n = rz.rows();
    let map = |x: f64| -> Result<f64> {
        if x.abs() > 1.0 + 1e-6 {
            return Err(Error::Numeric(format!(
                "covariance component {x} exceeds 1; input is not one-bit"
            )));
        }
        Ok((FRAC_PI_2 * x.clamp(-1.0, 1.0)).sin())
    };
    let mut out = ComplexMatrix::identity(n);
    for i in 0..n {
        for j in i + 1..n {
            let upper = rz[(i, j)];
            let lower = rz[(j, i)].conj();
            let avg = 0.5 * (upper + lower);
            let v = num_complex::Complex64::new(map(avg.re)?, map(avg.im)?);
            map(upper.re)?;
            map(upper.im)?;
            out[(i, j)] = v;
            out[(j, i)] = v.conj();
        }
    }
    Ok(out)
}

pub fn one_bit_music_estimate(
    z: &SnapshotMatrix,
    k: usize,
    geometry: &ArrayGeometry,
    grid_size: usize,
) -> Result<Vec<f64>> {
    let table = SteeringTable::new(geometry, grid_size)?;
    Ok(one_bit_music_estimate_on(z, k, &table)?.angles)
}

pub fn one_bit_music_estimate_on(z: &SnapshotMatrix, k: usize, table: &SteeringTable) -> Result<SubspaceEstimate> {
    if z.quantization() != Quantization::OneBit {
        return Err(Error::Tag("one-bit MUSIC needs one-bit data".into()));
    }
    check_rows(z, table)?;
    let r = arcsine_covariance(&z.sample_covariance()?)?;
    music_from_covariance(&r, k, table)
}

#[derive(Debug, Clone)]
pub struct BeamformerEstimate {
    /// Dominant peaks, ascending.
    pub angles: Vec<f64>,
    pub source_count: usize,
    pub spectrum: SpectrumOnGrid,
}

/// Bartlett spectrum a^H R̂ a / M; peaks above `eta` times the maximum count
/// as sources.
pub fn beamformer_estimate(
    z: &SnapshotMatrix,
    geometry: &ArrayGeometry,
    grid_size: usize,
) -> Result<BeamformerEstimate> {
    let table = SteeringTable::new(geometry, grid_size)?;
    beamformer_estimate_on(z, &table, DEFAULT_BEAM_ETA)
}

pub fn beamformer_estimate_on(z: &SnapshotMatrix, table: &SteeringTable, eta: f64) -> Result<BeamformerEstimate> {
    check_rows(z, table)?;
    let r = z.sample_covariance()?;
    let m = table.antennas;
    let mut values = Vec::with_capacity(table.len());
    for g in 0..table.len() {
        let a: Vec<_> = (0..m)
            .map(|i| num_complex::Complex64::new(table.re[g * m + i], table.im[g * m + i]))
            .collect();
        let ra = r.mat_vec(&a)?;
        let p: num_complex::Complex64 = a.iter().zip(&ra).map(|(x, y)| x.conj() * y).sum();
        values.push(p.re.max(0.0) / m as f64);
    }
    let spectrum = SpectrumOnGrid {
        grid: table.grid.clone(),
        values,
    };
    let max = spectrum.values.iter().copied().fold(0.0, f64::max);
    let angles: Vec<f64> = spectrum
        .local_maxima()
        .into_iter()
        .filter(|&i| spectrum.values[i] >= eta * max)
        .map(|i| spectrum.grid[i])
        .collect();
    Ok(BeamformerEstimate {
        source_count: angles.len().min(m - 1),
        angles,
        spectrum,
    })
}

fn check_rows(z: &SnapshotMatrix, table: &SteeringTable) -> Result<()> {
    if z.antennas() != table.antennas {
        return dim_err(format!(
            "snapshots have {} rows for {} antennas",
            z.antennas(),
            table.antennas
        ));
    }
    Ok(())
}

/// Tunables for the classical baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassicalConfig {
    pub grid_size: usize,
    pub eigen_tau: f64,
    pub beam_eta: f64,
}

impl Default for ClassicalConfig {
    fn default() -> Self {
        Self {
            grid_size: DEFAULT_GRID,
            eigen_tau: DEFAULT_EIGEN_TAU,
            beam_eta: DEFAULT_BEAM_ETA,
        }
    }
}
