//! The learned DOA estimator.
//!
//! Snapshots are split into real and imaginary halves and fed as L tokens of
//! width 2M to a stack of pre-norm transformer blocks. The token features are
//! averaged into one 2M-vector, an MLP maps it to an augmented M×M noise
//! subspace, and the MUSIC pseudo-spectrum of that subspace (on a fixed grid,
//! max-normalized) drives an MLP peak finder with M−1 angle outputs. A second
//! MLP reads the subspace through a stop-gradient and classifies the source
//! count over {1, …, M−1}.

use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::array::{ArrayGeometry, SnapshotMatrix};
use crate::classical::{SpectrumOnGrid, SteeringTable, SPECTRUM_FLOOR};
use crate::error::{Error, Result};
use crate::linalg::ComplexMatrix;
use crate::nn::tape::axpy;
use crate::nn::{Bound, CustomOp, EncoderBlock, Mlp, ParamStore, Tape, Tensor, Var};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub antennas: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub subspace_hidden: Vec<usize>,
    /// Grid size of the spectrum fed to the peak finder.
    pub peak_grid: usize,
    pub peak_hidden: Vec<usize>,
    pub sn_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            antennas: 8,
            blocks: 2,
            heads: 2,
            ffn_hidden: 64,
            subspace_hidden: vec![128],
            peak_grid: 361,
            peak_hidden: vec![256],
            sn_hidden: vec![64],
        }
    }
}

impl ModelConfig {
    /// Token width: real and imaginary parts of one snapshot.
    pub fn d_model(&self) -> usize {
        2 * self.antennas
    }

    /// M − 1: DOA outputs and source-count classes.
    pub fn max_sources(&self) -> usize {
        self.antennas - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.antennas < 2 {
            return Err(Error::Config("antennas must be >= 2".into()));
        }
        if self.heads == 0 || !self.d_model().is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide d_model = {}",
                self.heads,
                self.d_model()
            )));
        }
        if self.peak_grid < self.antennas {
            return Err(Error::Config(format!(
                "peak grid {} is smaller than M = {}",
                self.peak_grid, self.antennas
            )));
        }
        if self.ffn_hidden == 0
            || [&self.subspace_hidden, &self.peak_hidden, &self.sn_hidden]
                .iter()
                .any(|w| w.contains(&0))
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Everything the model produces for one snapshot matrix.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// M−1 angles in (−π/2, π/2); only the first K are meaningful.
    pub doas: Vec<f64>,
    /// Probability of K = i + 1 at index i.
    pub sn_probs: Vec<f64>,
    pub subspace: ComplexMatrix,
    /// Max-normalized spectrum seen by the peak finder.
    pub spectrum: SpectrumOnGrid,
}

impl ModelOutput {
    /// Most probable source count (ties to the smaller count).
    pub fn source_count(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.sn_probs.iter().enumerate() {
            if *p > self.sn_probs[best] {
                best = i;
            }
        }
        best + 1
    }

    pub fn first_doas(&self, k: usize) -> &[f64] {
        &self.doas[..k.min(self.doas.len())]
    }
}

/// Tape handles of one batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BatchVars {
    pub pooled: Var,
    /// [B, 2M²]: real block then imaginary block of Ẽ_n, row-major.
    pub subspace: Var,
    /// Unnormalized MUSIC values of Ẽ_n, [B, G].
    pub raw_spectrum: Var,
    pub spectrum: Var,
    pub doas: Var,
    pub sn_probs: Var,
}

#[derive(Debug, Clone)]
pub struct TransMusic {
    config: ModelConfig,
    geometry: ArrayGeometry,
    store: ParamStore,
    blocks: Vec<EncoderBlock>,
    subspace_head: Mlp,
    peak_finder: Mlp,
    sn_head: Mlp,
    table: Arc<SteeringTable>,
}

impl TransMusic {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let d = config.d_model();
        let m = config.antennas;
        let blocks = (0..config.blocks)
            .map(|i| {
                EncoderBlock::new(
                    &mut store,
                    &format!("encoder.{i}"),
                    d,
                    config.heads,
                    config.ffn_hidden,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let widths = |first: usize, hidden: &[usize], last: usize| {
            let mut w = vec![first];
            w.extend_from_slice(hidden);
            w.push(last);
            w
        };
        let subspace_head = Mlp::new(
            &mut store,
            "subspace",
            &widths(d, &config.subspace_hidden, 2 * m * m),
            &mut rng,
        )?;
        let peak_finder = Mlp::new(
            &mut store,
            "peak",
            &widths(config.peak_grid, &config.peak_hidden, m - 1),
            &mut rng,
        )?;
        let sn_head = Mlp::new(&mut store, "sn", &widths(2 * m * m, &config.sn_hidden, m - 1), &mut rng)?;
        let geometry = ArrayGeometry::ula(m)?;
        let table = Arc::new(SteeringTable::new(&geometry, config.peak_grid)?);
        Ok(Self {
            config,
            geometry,
            store,
            blocks,
            subspace_head,
            peak_finder,
            sn_head,
            table,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn geometry(&self) -> &ArrayGeometry {
        &self.geometry
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn steering_table(&self) -> &Arc<SteeringTable> {
        &self.table
    }

    /// Parameter-name prefixes of the encoder and subspace head, i.e. the
    /// part the source-number loss must not update.
    pub fn subspace_estimator_prefixes() -> &'static [&'static str] {
        &["encoder.", "subspace."]
    }

    /// Zeroes the last layer of every residual branch so each block is the
    /// identity map. A test hook.
    pub fn zero_residual_branches(&mut self) {
        for b in &self.blocks {
            let last = b.ffn.layers.last().expect("ffn has layers");
            for id in [
                b.attention.output.weight,
                b.attention.output.bias,
                last.weight,
                last.bias,
            ] {
                self.store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Tokens of a batch: rows of every matrix stacked, plus segment lengths.
    pub fn batch_tokens(&self, batch: &[&SnapshotMatrix]) -> Result<(Tensor, Arc<[usize]>)> {
        let d = self.config.d_model();
        let mut data = Vec::with_capacity(batch.iter().map(|z| z.snapshots()).sum::<usize>() * d);
        let mut segs = Vec::with_capacity(batch.len());
        for z in batch {
            if z.antennas() != self.config.antennas {
                return Err(Error::Dimension(format!(
                    "snapshots have {} antennas, model expects {}",
                    z.antennas(),
                    self.config.antennas
                )));
            }
            if z.snapshots() == 0 {
                return Err(Error::Dimension("no snapshots".into()));
            }
            data.extend(preprocess_snapshots(z)?.into_data());
            segs.push(z.snapshots());
        }
        let rows = data.len() / d;
        Ok((Tensor::matrix(rows, d, data)?, segs.into()))
    }

    /// Encoder blocks then the average unit: [ΣL, 2M] -> [B, 2M].
    pub fn encode_and_pool_on(&self, tape: &mut Tape, p: &Bound, x: Var, segments: Arc<[usize]>) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, p, h, segments.clone())?;
        }
        tape.mean_pool(h, segments)
    }

    /// Full forward pass on a tape.
    pub fn forward_on(&self, tape: &mut Tape, p: &Bound, batch: &[&SnapshotMatrix]) -> Result<BatchVars> {
        let (tokens, segments) = self.batch_tokens(batch)?;
        let x = tape.constant(tokens);
        let pooled = self.encode_and_pool_on(tape, p, x, segments)?;
        let subspace = self.subspace_head.forward(tape, p, pooled)?;
        let raw_spectrum = spectrum_layer(tape, subspace, &self.table)?;
        let spectrum = normalize_by_max(tape, raw_spectrum)?;
        let doas = self.estimate_doas_on(tape, p, spectrum)?;
        let sn_probs = self.estimate_source_number_on(tape, p, subspace)?;
        Ok(BatchVars {
            pooled,
            subspace,
            raw_spectrum,
            spectrum,
            doas,
            sn_probs,
        })
    }

    /// Peak finder: (π/2)·tanh(MLP(spectrum)).
    pub fn estimate_doas_on(&self, tape: &mut Tape, p: &Bound, spectrum: Var) -> Result<Var> {
        let raw = self.peak_finder.forward(tape, p, spectrum)?;
        tape.scaled_tanh(raw, FRAC_PI_2)
    }

    /// Source-number head behind a stop-gradient.
    pub fn estimate_source_number_on(&self, tape: &mut Tape, p: &Bound, subspace: Var) -> Result<Var> {
        let blocked = tape.stop_gradient(subspace)?;
        let logits = self.sn_head.forward(tape, p, blocked)?;
        tape.softmax(logits)
    }

    pub fn forward(&self, z: &SnapshotMatrix) -> Result<ModelOutput> {
        Ok(self.forward_batch(&[z])?.pop().expect("one output per input"))
    }

    /// Inference over a batch; outputs are independent of batch composition.
    pub fn forward_batch(&self, batch: &[&SnapshotMatrix]) -> Result<Vec<ModelOutput>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let vars = self.forward_on(&mut tape, &p, batch)?;
        let m = self.config.antennas;
        let k = m - 1;
        let g = self.table.len();
        let doas = tape.value(vars.doas).data();
        let probs = tape.value(vars.sn_probs).data();
        let sub = tape.value(vars.subspace).data();
        let spec = tape.value(vars.spectrum).data();
        Ok((0..batch.len())
            .map(|b| ModelOutput {
                doas: doas[b * k..(b + 1) * k].to_vec(),
                sn_probs: probs[b * k..(b + 1) * k].to_vec(),
                subspace: subspace_matrix(&sub[b * 2 * m * m..(b + 1) * 2 * m * m], m),
                spectrum: SpectrumOnGrid {
                    grid: self.table.grid.clone(),
                    values: spec[b * g..(b + 1) * g].to_vec(),
                },
            })
            .collect())
    }

    /// Pooled feature vector ō for one input.
    pub fn encode_and_pool(&self, tokens: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let segs: Arc<[usize]> = vec![tokens.rows()].into();
        let x = tape.constant(tokens.clone());
        let pooled = self.encode_and_pool_on(&mut tape, &p, x, segs)?;
        Ok(tape.value(pooled).data().to_vec())
    }

    /// Ẽ_n from a pooled feature vector.
    pub fn estimate_noise_subspace(&self, pooled: &[f64]) -> Result<ComplexMatrix> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(Tensor::matrix(1, pooled.len(), pooled.to_vec())?);
        let e = self.subspace_head.forward(&mut tape, &p, x)?;
        Ok(subspace_matrix(tape.value(e).data(), self.config.antennas))
    }

    /// Peak-finder angles for a normalized spectrum on the model grid.
    pub fn estimate_doas(&self, spectrum: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(Tensor::matrix(1, spectrum.len(), spectrum.to_vec())?);
        let y = self.estimate_doas_on(&mut tape, &p, x)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Source-count probabilities for a subspace estimate.
    pub fn estimate_source_number(&self, subspace: &ComplexMatrix) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(Tensor::matrix(
            1,
            subspace.rows() * subspace.cols() * 2,
            flatten_subspace(subspace),
        )?);
        let y = self.estimate_source_number_on(&mut tape, &p, x)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Writes the parameters (TMCK) and the model config (`<path>.json`).
    pub fn save(&self, path: &Path, with_optimizer: bool) -> Result<()> {
        self.store.save(path, with_optimizer)?;
        std::fs::write(config_path(path), serde_json::to_string_pretty(&self.config)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&std::fs::read_to_string(config_path(path))?)?;
        let mut model = Self::new(config, 0)?;
        let stored = ParamStore::load(path)?;
        if stored.len() != model.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                stored.len(),
                model.store.len()
            )));
        }
        model.store = stored;
        Ok(model)
    }
}

pub fn config_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Row t of the result is [Re z(t); Im z(t)].
pub fn preprocess_snapshots(z: &SnapshotMatrix) -> Result<Tensor> {
    let (m, l) = (z.antennas(), z.snapshots());
    let mut data = Vec::with_capacity(l * 2 * m);
    for t in 0..l {
        data.extend((0..m).map(|i| z.at(i, t).re));
        data.extend((0..m).map(|i| z.at(i, t).im));
    }
    Tensor::matrix(l, 2 * m, data)
}

/// 2M² reals (real block, imaginary block, each row-major) -> M×M complex.
pub fn subspace_matrix(flat: &[f64], m: usize) -> ComplexMatrix {
    let (re, im) = flat.split_at(m * m);
    ComplexMatrix::from_fn(m, m, |i, j| Complex64::new(re[i * m + j], im[i * m + j]))
}

pub fn flatten_subspace(e: &ComplexMatrix) -> Vec<f64> {
    let mut out: Vec<f64> = e.as_slice().iter().map(|z| z.re).collect();
    out.extend(e.as_slice().iter().map(|z| z.im));
    out
}

struct SpectrumOp {
    table: Arc<SteeringTable>,
    /// B·G·M entries of a^H Ẽ_n, real and imaginary.
    proj_re: Vec<f64>,
    proj_im: Vec<f64>,
}

/// Differentiable MUSIC spectrum 1/(‖Ẽ_n^H a(ψ)‖² + ε) of each row of a
/// [B, 2M²] subspace tensor, evaluated on the table grid: [B, G].
pub fn spectrum_layer(tape: &mut Tape, subspace: Var, table: &Arc<SteeringTable>) -> Result<Var> {
    let e = tape.value(subspace);
    let m = table.antennas;
    if e.cols() != 2 * m * m {
        return Err(Error::Dimension(format!(
            "spectrum layer needs rows of {} reals, got {}",
            2 * m * m,
            e.cols()
        )));
    }
    let b = e.rows();
    let g = table.len();
    let mut proj_re = vec![0.0; b * g * m];
    let mut proj_im = vec![0.0; b * g * m];
    let mut out = vec![0.0; b * g];
    for s in 0..b {
        let (er, ei) = e.row(s).split_at(m * m);
        for gi in 0..g {
            let ar = &table.re[gi * m..(gi + 1) * m];
            let ai = &table.im[gi * m..(gi + 1) * m];
            let base = (s * g + gi) * m;
            let br = &mut proj_re[base..base + m];
            let bi = &mut proj_im[base..base + m];
            for i in 0..m {
                axpy(ar[i], &er[i * m..(i + 1) * m], br);
                axpy(ai[i], &ei[i * m..(i + 1) * m], br);
                axpy(ar[i], &ei[i * m..(i + 1) * m], bi);
                axpy(-ai[i], &er[i * m..(i + 1) * m], bi);
            }
            let q: f64 = br.iter().zip(bi.iter()).map(|(r, i)| r * r + i * i).sum();
            out[s * g + gi] = 1.0 / (q + SPECTRUM_FLOOR);
        }
    }
    let op = SpectrumOp {
        table: table.clone(),
        proj_re,
        proj_im,
    };
    tape.custom(&[subspace], Tensor::matrix(b, g, out)?, Box::new(op))
}

impl CustomOp for SpectrumOp {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let m = self.table.antennas;
        let g = self.table.len();
        let b = inputs[0].rows();
        let mut de = vec![0.0; b * 2 * m * m];
        for s in 0..b {
            let (der, dei) = de[s * 2 * m * m..(s + 1) * 2 * m * m].split_at_mut(m * m);
            for gi in 0..g {
                let p = output.data()[s * g + gi];
                // dP/dq = −P², dq/dB = 2B
                let dq = -grad_out[s * g + gi] * p * p;
                if dq == 0.0 {
                    continue;
                }
                let base = (s * g + gi) * m;
                let br = &self.proj_re[base..base + m];
                let bi = &self.proj_im[base..base + m];
                let ar = &self.table.re[gi * m..(gi + 1) * m];
                let ai = &self.table.im[gi * m..(gi + 1) * m];
                for i in 0..m {
                    let (cr, ci) = (2.0 * dq * ar[i], 2.0 * dq * ai[i]);
                    let rr = &mut der[i * m..(i + 1) * m];
                    axpy(cr, br, rr);
                    axpy(-ci, bi, rr);
                    let ri = &mut dei[i * m..(i + 1) * m];
                    axpy(ci, br, ri);
                    axpy(cr, bi, ri);
                }
            }
        }
        vec![Some(de)]
    }
}

struct NormalizeMaxOp {
    argmax: Vec<usize>,
}

/// Divides each row by its maximum entry (rows must be positive).
pub fn normalize_by_max(tape: &mut Tape, x: Var) -> Result<Var> {
    let t = tape.value(x);
    let c = t.cols();
    let mut out = t.data().to_vec();
    let mut argmax = Vec::with_capacity(t.rows());
    for row in out.chunks_exact_mut(c) {
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        let mx = row[best];
        if !(mx > 0.0) {
            return Err(Error::Numeric("max-normalization of a non-positive row".into()));
        }
        row.iter_mut().for_each(|v| *v /= mx);
        argmax.push(best);
    }
    let shape = t.shape().to_vec();
    tape.custom(&[x], Tensor::new(shape, out)?, Box::new(NormalizeMaxOp { argmax }))
}

impl CustomOp for NormalizeMaxOp {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let x = inputs[0];
        let c = x.cols();
        let mut dx = vec![0.0; x.len()];
        for (r, &am) in self.argmax.iter().enumerate() {
            let mx = x.data()[r * c + am];
            let gr = &grad_out[r * c..(r + 1) * c];
            let yr = &output.data()[r * c..(r + 1) * c];
            // y_j = x_j / x_max
            let mut s = 0.0;
            for j in 0..c {
                dx[r * c + j] = gr[j] / mx;
                s += gr[j] * yr[j];
            }
            dx[r * c + am] -= s / mx;
        }
        vec![Some(dx)]
    }
}
