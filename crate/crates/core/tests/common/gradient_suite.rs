//! Finite-difference checks of every differentiable building block, shared
//! by the gradient tests and the acceptance run.

use std::sync::Arc;

use rand::Rng;
use transmusic::array::{generate_snapshots, quantize_one_bit, ArrayGeometry, Scenario};
use transmusic::classical::SteeringTable;
use transmusic::model::{normalize_by_max, spectrum_layer, ModelConfig, TransMusic};
use transmusic::nn::gradcheck::check_gradients;
use transmusic::nn::{Bound, EncoderBlock, Mlp, ParamStore, Tape, Tensor, Var};
use transmusic::rng::rng_from_seed;
use transmusic::training::{cross_entropy, rmspe_loss};
use transmusic::Result;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 10;

fn random(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Contracts an arbitrary tensor to a scalar with fixed random weights so
/// every output entry influences the loss differently.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let cols = tape.value(y).cols();
    let mut rng = rng_from_seed(seed ^ 0xABCD);
    let w = tape.constant(random(&[cols, 1], 1.0, &mut rng));
    let z = tape.linear(y, w, None)?;
    tape.sum(z)
}

/// Collects the worst relative error of every check it runs.
#[derive(Default)]
pub struct Checker {
    pub results: Vec<(String, f64)>,
}

impl Checker {
    pub fn check<F>(&mut self, name: &str, inputs: &[Tensor], f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let report = check_gradients(inputs, H, f).unwrap();
        self.results.push((name.to_string(), report.max_rel_error));
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.results.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}
pub fn linear_with_and_without_bias(c: &mut Checker) {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(seed);
        let inputs = [
            random(&[5, 4], 1.0, &mut rng),
            random(&[4, 3], 1.0, &mut rng),
            random(&[3], 1.0, &mut rng),
        ];
        c.check("linear", &inputs, |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(t, y, seed)
        });
        c.check("linear without bias", &inputs[..2], |t, v| {
            let y = t.linear(v[0], v[1], None)?;
            weighted_sum(t, y, seed)
        });
    }
}

pub fn elementwise_ops(c: &mut Checker) {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(seed);
        let inputs = [random(&[4, 6], 2.0, &mut rng), random(&[4, 6], 2.0, &mut rng)];
        c.check("relu", &inputs[..1], |t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, seed)
        });
        c.check("scaled tanh", &inputs[..1], |t, v| {
            let y = t.scaled_tanh(v[0], 1.5)?;
            weighted_sum(t, y, seed)
        });
        c.check("add and scale", &inputs, |t, v| {
            let y = t.add(v[0], v[1])?;
            let y = t.scale(y, -0.7)?;
            weighted_sum(t, y, seed)
        });
        c.check("mean", &inputs[..1], |t, v| {
            let y = t.relu(v[0])?;
            t.mean(y)
        });
    }
}

pub fn layer_norm(c: &mut Checker) {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(seed);
        let inputs = [
            random(&[5, 6], 2.0, &mut rng),
            random(&[6], 1.5, &mut rng),
            random(&[6], 1.0, &mut rng),
        ];
        c.check("layer norm", &inputs, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(t, y, seed)
        });
    }
}

pub fn softmax_rows(c: &mut Checker) {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(seed);
        let inputs = [random(&[3, 7], 3.0, &mut rng)];
        c.check("softmax", &inputs, |t, v| {
            let y = t.softmax(v[0])?;
            weighted_sum(t, y, seed)
        });
    }
}

pub fn attention_over_segments(c: &mut Checker) {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(seed);
        let inputs = [
            random(&[7, 4], 1.5, &mut rng),
            random(&[7, 4], 1.5, &mut rng),
            random(&[7, 4], 1.5, &mut rng),
        ];
        let segments: Arc<[usize]> = vec![3, 4].into();
        c.check("attention", &inputs, |t, v| {
            let y = t.attention(v[0], v[1], v[2], segments.clone(), 2)?;
            weighted_sum(t, y, seed)
        });
    }
}

pub fn mean_pool_over_segments(c: &mut Checker) {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(seed);
        let inputs = [random(&[6, 3], 1.0, &mut rng)];
        let segments: Arc<[usize]> = vec![1, 2, 3].into();
        c.check("mean pool", &inputs, |t, v| {
            let y = t.mean_pool(v[0], segments.clone())?;
            weighted_sum(t, y, seed)
        });
    }
}

/// Runs a layer whose parameters are the leading inputs and whose data is
/// the last input.
fn layer_inputs(store: &ParamStore, data: Tensor) -> Vec<Tensor> {
    let mut v: Vec<Tensor> = store.params().iter().map(|p| p.value.clone()).collect();
    v.push(data);
    v
}

pub fn mlp_layer(c: &mut Checker) {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", &[5, 7, 3], &mut rng).unwrap();
        let inputs = layer_inputs(&store, random(&[4, 5], 1.0, &mut rng));
        let n = store.len();
        c.check("mlp", &inputs, |t, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let y = mlp.forward(t, &p, v[n])?;
            weighted_sum(t, y, seed)
        });
    }
}

pub fn encoder_block(c: &mut Checker) {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let block = EncoderBlock::new(&mut store, "enc", 4, 2, 6, &mut rng).unwrap();
        let inputs = layer_inputs(&store, random(&[5, 4], 1.0, &mut rng));
        let n = store.len();
        let segments: Arc<[usize]> = vec![2, 3].into();
        c.check("encoder block", &inputs, |t, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let y = block.forward(t, &p, v[n], segments.clone())?;
            weighted_sum(t, y, seed)
        });
    }
}

pub fn spectrum_layer_and_normalization(c: &mut Checker) {
    let geom = ArrayGeometry::ula(4).unwrap();
    let table = Arc::new(SteeringTable::new(&geom, 37).unwrap());
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(seed);
        let inputs = [random(&[2, 32], 1.0, &mut rng)];
        c.check("spectrum", &inputs, |t, v| {
            let y = spectrum_layer(t, v[0], &table)?;
            weighted_sum(t, y, seed)
        });
        c.check("normalized spectrum", &inputs, |t, v| {
            let y = spectrum_layer(t, v[0], &table)?;
            let y = normalize_by_max(t, y)?;
            weighted_sum(t, y, seed)
        });
    }
}

pub fn loss_ops(c: &mut Checker) {
    for seed in 0..SEEDS {
        let mut rng = rng_from_seed(seed);
        let inputs = [random(&[2, 4], 1.2, &mut rng), random(&[2, 5], 2.0, &mut rng)];
        let truths: [&[f64]; 2] = [&[0.3, -0.5], &[0.1, 0.9, -1.2]];
        c.check("rmspe loss", &inputs[..1], |t, v| rmspe_loss(t, v[0], &truths, 0.5));
        c.check("cross entropy", &inputs[1..], |t, v| {
            let p = t.softmax(v[0])?;
            cross_entropy(t, p, &[2, 5], 0.5)
        });
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        antennas: 4,
        blocks: 2,
        heads: 2,
        ffn_hidden: 6,
        subspace_hidden: vec![10],
        peak_grid: 31,
        peak_hidden: vec![12],
        sn_hidden: vec![6],
    }
}

pub fn end_to_end_rmspe_loss(c: &mut Checker) {
    for seed in 0..SEEDS {
        let model = TransMusic::new(small_config(), seed).unwrap();
        let geom = ArrayGeometry::ula(4).unwrap();
        let sc = Scenario::new(vec![-0.4, 0.5], 5.0, 6).unwrap();
        let z = quantize_one_bit(&generate_snapshots(&sc, &geom, seed).unwrap()).unwrap();
        let inputs: Vec<Tensor> = model.store().params().iter().map(|p| p.value.clone()).collect();
        c.check("end to end", &inputs, |t, v| {
            let p = Bound::from_vars(v.to_vec());
            let out = model.forward_on(t, &p, &[&z])?;
            // The CE term is excluded: its stop-gradient makes the tape
            // gradient differ from the finite difference by design.
            rmspe_loss(t, out.doas, &[sc.thetas()], 1.0)
        });
    }
}

pub const CASES: &[(&str, fn(&mut Checker))] = &[
    ("linear_with_and_without_bias", linear_with_and_without_bias),
    ("elementwise_ops", elementwise_ops),
    ("layer_norm", layer_norm),
    ("softmax_rows", softmax_rows),
    ("attention_over_segments", attention_over_segments),
    ("mean_pool_over_segments", mean_pool_over_segments),
    ("mlp_layer", mlp_layer),
    ("encoder_block", encoder_block),
    ("spectrum_layer_and_normalization", spectrum_layer_and_normalization),
    ("loss_ops", loss_ops),
    ("end_to_end_rmspe_loss", end_to_end_rmspe_loss),
];
