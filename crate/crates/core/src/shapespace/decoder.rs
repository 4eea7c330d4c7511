//! Small fully connected SDF decoder `(x, z) ↦ s` trained auto-decoder
//! style: network weights and one latent code per training shape are
//! optimized jointly with Adam on a clamped L1 loss.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{project_latent, LatentCode, ShapeSpace, LATENT_DIM};
use crate::autodiff::Scalar;
use crate::error::{Error, Result};

pub const DECODER_SCHEMA: &str = "sdf-autolabel/decoder/v1";
const INPUT_DIM: usize = 3 + LATENT_DIM;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Row-major `out × in`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// `tanh` hidden layers followed by a linear scalar output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyDecoder {
    pub layers: Vec<Layer>,
    /// Learned codes of the training shapes, in training order.
    #[serde(default)]
    pub codes: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecoderFile {
    schema: String,
    layers: Vec<Layer>,
    codes: Vec<[f64; 3]>,
}

impl TinyDecoder {
    /// Xavier-uniform initialization with zero biases.
    pub fn init(hidden: &[usize], seed: u64) -> Result<Self> {
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::usage("decoder needs at least one non-empty hidden layer"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![INPUT_DIM];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let bound = (6.0 / (n_in + n_out) as f64).sqrt();
                Layer {
                    weights: (0..n_out)
                        .map(|_| (0..n_in).map(|_| rng.random_range(-bound..bound)).collect())
                        .collect(),
                    bias: vec![0.0; n_out],
                }
            })
            .collect();
        Ok(Self {
            layers,
            codes: Vec::new(),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.bias.len() * (l.weights[0].len() + 1))
            .sum()
    }

    pub fn eval<S: Scalar>(&self, input: [S; INPUT_DIM]) -> S {
        let mut h: Vec<S> = input.to_vec();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            h = layer
                .weights
                .iter()
                .zip(&layer.bias)
                .map(|(row, b)| {
                    let a = S::linear(row, &h, *b);
                    if li == last {
                        a
                    } else {
                        a.tanh()
                    }
                })
                .collect();
        }
        h[0]
    }

    /// Value and input gradient `∂s/∂x` at a fixed `x`, both as
    /// expressions in `z`.
    pub fn eval_with_input_gradient<S: Scalar>(&self, x: [f64; 3], z: [S; 3]) -> (S, [S; 3]) {
        let last = self.layers.len() - 1;
        let first = &self.layers[0];
        let mut h = Vec::with_capacity(first.bias.len());
        let mut dh: [Vec<S>; 3] = Default::default();
        for (row, b) in first.weights.iter().zip(&first.bias) {
            let bias = b + row[0] * x[0] + row[1] * x[1] + row[2] * x[2];
            let a = S::linear(&row[3..], &z, bias);
            if last == 0 {
                h.push(a);
                for j in 0..3 {
                    dh[j].push(a.lift(row[j]));
                }
            } else {
                let t = a.tanh();
                let slope = -(t * t) + 1.0;
                h.push(t);
                for j in 0..3 {
                    dh[j].push(slope * row[j]);
                }
            }
        }
        for (li, layer) in self.layers.iter().enumerate().skip(1) {
            let mut nh = Vec::with_capacity(layer.bias.len());
            let mut ndh: [Vec<S>; 3] = Default::default();
            for (row, b) in layer.weights.iter().zip(&layer.bias) {
                let a = S::linear(row, &h, *b);
                let da: [S; 3] = std::array::from_fn(|j| S::linear(row, &dh[j], 0.0));
                if li == last {
                    nh.push(a);
                    for j in 0..3 {
                        ndh[j].push(da[j]);
                    }
                } else {
                    let t = a.tanh();
                    let slope = -(t * t) + 1.0;
                    nh.push(t);
                    for j in 0..3 {
                        ndh[j].push(slope * da[j]);
                    }
                }
            }
            h = nh;
            dh = ndh;
        }
        (h[0], [dh[0][0], dh[1][0], dh[2][0]])
    }

    pub fn eval_f64(&self, x: [f64; 3], z: [f64; 3]) -> f64 {
        self.eval([x[0], x[1], x[2], z[0], z[1], z[2]])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&DecoderFile {
            schema: DECODER_SCHEMA.to_string(),
            layers: self.layers.clone(),
            codes: self.codes.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DecoderFile = serde_json::from_str(text)?;
        if file.schema != DECODER_SCHEMA {
            return Err(Error::data(format!("unsupported decoder schema {}", file.schema)));
        }
        let decoder = Self {
            layers: file.layers,
            codes: file.codes,
        };
        decoder.check_shapes()?;
        Ok(decoder)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn check_shapes(&self) -> Result<()> {
        let mut width = INPUT_DIM;
        for layer in &self.layers {
            if layer.weights.len() != layer.bias.len() || layer.weights.iter().any(|r| r.len() != width) {
                return Err(Error::data("decoder layer shapes are inconsistent"));
            }
            width = layer.bias.len();
        }
        if self.layers.is_empty() || width != 1 {
            return Err(Error::data("decoder must end in a single output"));
        }
        Ok(())
    }
}

/// One supervised sample: query point, index of the training shape, target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdfSample {
    pub x: [f64; 3],
    pub code: usize,
    pub s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderTrainingConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub latent_learning_rate: f64,
    /// Targets and predictions are clamped to `±clamp` before the L1 loss.
    pub clamp: f64,
    pub seed: u64,
}

impl Default for DecoderTrainingConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            epochs: 200,
            batch_size: 128,
            learning_rate: 2e-3,
            latent_learning_rate: 1e-3,
            clamp: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainingReport {
    pub epoch_loss: Vec<f64>,
    /// Clamped mean absolute error on the held-out samples.
    pub held_out_mae: f64,
}

/// Draws `per_code` samples for each code: half uniform in the query
/// cube, half jittered around the surface.
pub fn sample_training_set(space: &ShapeSpace, codes: &[LatentCode], per_code: usize, seed: u64) -> Vec<SdfSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.025).expect("valid deviation");
    let mut out = Vec::with_capacity(per_code * codes.len());
    for (ci, z) in codes.iter().enumerate() {
        let zz = z.as_array();
        for i in 0..per_code {
            let mut x: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.55..0.55));
            if i % 2 == 1 {
                for _ in 0..4 {
                    let (f, g) = space.eval_with_gradient(x, zz);
                    let gn = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                    if gn < 1e-9 {
                        break;
                    }
                    for k in 0..3 {
                        x[k] -= g[k] / gn * f;
                    }
                }
                for c in &mut x {
                    *c = (*c + jitter.sample(&mut rng)).clamp(-0.55, 0.55);
                }
            }
            out.push(SdfSample {
                x,
                code: ci,
                s: space.sdf(x, z),
            });
        }
    }
    out
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Flat parameter layout: per layer, weights row-major then biases.
fn flatten(d: &TinyDecoder) -> Vec<f64> {
    let mut out = Vec::with_capacity(d.parameter_count());
    for l in &d.layers {
        for row in &l.weights {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&l.bias);
    }
    out
}

fn unflatten(d: &mut TinyDecoder, flat: &[f64]) {
    let mut i = 0;
    for l in &mut d.layers {
        for row in &mut l.weights {
            let n = row.len();
            row.copy_from_slice(&flat[i..i + n]);
            i += n;
        }
        let n = l.bias.len();
        l.bias.copy_from_slice(&flat[i..i + n]);
        i += n;
    }
}

/// Adds `∂loss/∂θ` and `∂loss/∂input` for one sample with upstream
/// gradient `dout` on the network output.
fn backprop(d: &TinyDecoder, input: &[f64; INPUT_DIM], dout: f64, grad: &mut [f64]) -> [f64; INPUT_DIM] {
    let last = d.layers.len() - 1;
    let mut acts: Vec<Vec<f64>> = vec![input.to_vec()];
    for (li, l) in d.layers.iter().enumerate() {
        let h = acts.last().unwrap();
        let next: Vec<f64> = l
            .weights
            .iter()
            .zip(&l.bias)
            .map(|(row, b)| {
                let a = b + row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>();
                if li == last {
                    a
                } else {
                    a.tanh()
                }
            })
            .collect();
        acts.push(next);
    }
    let offsets: Vec<usize> = d
        .layers
        .iter()
        .scan(0, |acc, l| {
            let start = *acc;
            *acc += l.bias.len() * (l.weights[0].len() + 1);
            Some(start)
        })
        .collect();
    let mut delta = vec![dout];
    for li in (0..d.layers.len()).rev() {
        let l = &d.layers[li];
        let h_in = &acts[li];
        if li != last {
            let h_out = &acts[li + 1];
            for (dj, hj) in delta.iter_mut().zip(h_out) {
                *dj *= 1.0 - hj * hj;
            }
        }
        let n_in = h_in.len();
        let base = offsets[li];
        let bias_base = base + l.bias.len() * n_in;
        let mut upstream = vec![0.0; n_in];
        for (j, row) in l.weights.iter().enumerate() {
            let dj = delta[j];
            if dj == 0.0 {
                continue;
            }
            for k in 0..n_in {
                grad[base + j * n_in + k] += dj * h_in[k];
                upstream[k] += dj * row[k];
            }
            grad[bias_base + j] += dj;
        }
        delta = upstream;
    }
    std::array::from_fn(|i| delta[i])
}

fn clamped_error(pred: f64, target: f64, clamp: f64) -> (f64, f64) {
    let p = pred.clamp(-clamp, clamp);
    let t = target.clamp(-clamp, clamp);
    let diff = p - t;
    // straight-through past the clamp, so saturated outputs still move
    let slope = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    (diff.abs(), slope)
}

/// Trains a decoder on `train` with per-shape latent codes initialized
/// from `codes`; reports the clamped MAE on `held_out`.
pub fn train_decoder(
    train: &[SdfSample],
    held_out: &[SdfSample],
    codes: &[LatentCode],
    config: &DecoderTrainingConfig,
) -> Result<(TinyDecoder, TrainingReport)> {
    if train.iter().chain(held_out).any(|s| s.code >= codes.len()) {
        return Err(Error::usage("sample refers to an unknown latent code"));
    }
    if config.batch_size == 0 || !(config.clamp > 0.0) {
        return Err(Error::usage("batch size and clamp must be positive"));
    }
    let mut decoder = TinyDecoder::init(&config.hidden, config.seed)?;
    let mut latents: Vec<[f64; 3]> = codes.iter().map(|c| c.as_array()).collect();
    let mut params = flatten(&decoder);
    let mut adam = Adam::new(params.len());
    let mut latent_adam = Adam::new(3 * latents.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut grad = vec![0.0; params.len()];
    let mut latent_grad = vec![0.0; 3 * latents.len()];

    for epoch in 0..config.epochs {
        // Fisher-Yates with the seeded stream
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            latent_grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = train[i];
                let z = latents[s.code];
                let input = [s.x[0], s.x[1], s.x[2], z[0], z[1], z[2]];
                let pred = decoder.eval(input);
                let (err, slope) = clamped_error(pred, s.s, config.clamp);
                total += err;
                if slope != 0.0 {
                    let dinput = backprop(&decoder, &input, slope * scale, &mut grad);
                    for k in 0..3 {
                        latent_grad[3 * s.code + k] += dinput[3 + k];
                    }
                }
            }
            adam.step(&mut params, &grad, config.learning_rate);
            let mut flat_latents: Vec<f64> = latents.iter().flatten().copied().collect();
            latent_adam.step(&mut flat_latents, &latent_grad, config.latent_learning_rate);
            for (c, chunk) in latents.iter_mut().zip(flat_latents.chunks(3)) {
                *c = project_latent([chunk[0], chunk[1], chunk[2]])
                    .map_err(|e| Error::Training {
                        epoch,
                        detail: e.to_string(),
                    })?
                    .as_array();
            }
            unflatten(&mut decoder, &params);
        }
        let mean = total / train.len().max(1) as f64;
        if !mean.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Training {
                epoch,
                detail: format!("loss became {mean}"),
            });
        }
        epoch_loss.push(mean);
    }
    decoder.codes = latents;
    let held_out_mae = if held_out.is_empty() {
        f64::NAN
    } else {
        held_out
            .iter()
            .map(|s| {
                let pred = decoder.eval_f64(s.x, decoder.codes[s.code]);
                clamped_error(pred, s.s, config.clamp).0
            })
            .sum::<f64>()
            / held_out.len() as f64
    };
    Ok((
        decoder,
        TrainingReport {
            epoch_loss,
            held_out_mae,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{v3, Tape};
    use crate::shapespace::{BlendSpace, Shape};

    #[test]
    fn input_gradient_matches_tape() {
        let d = TinyDecoder::init(&[8, 8], 3).unwrap();
        let x = [0.1, -0.2, 0.3];
        let z = [0.6, 0.0, 0.8];
        let (f, g) = d.eval_with_input_gradient(x, z);
        let tape = Tape::new();
        let xv = tape.vars(x);
        let zv = v3::lift(&xv[0], z);
        let fv = d.eval([xv[0], xv[1], xv[2], zv[0], zv[1], zv[2]]);
        let gv = tape.backward(fv).unwrap().wrt(xv);
        assert!((f - fv.value()).abs() < 1e-14);
        for i in 0..3 {
            assert!((g[i] - gv[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn manual_backprop_matches_tape() {
        let d = TinyDecoder::init(&[5, 4], 9).unwrap();
        let input = [0.2, -0.1, 0.4, 0.0, 0.6, 0.8];
        let mut grad = vec![0.0; d.parameter_count()];
        let dinput = backprop(&d, &input, 1.0, &mut grad);
        let tape = Tape::new();
        let iv = tape.vars(input);
        let fv = d.eval(iv);
        let expected = tape.backward(fv).unwrap().wrt(iv);
        for i in 0..INPUT_DIM {
            assert!((dinput[i] - expected[i]).abs() < 1e-12);
        }
        // weight gradients: difference one parameter at a time
        let base = flatten(&d);
        for k in [0, 7, base.len() / 2, base.len() - 1] {
            let mut probe = d.clone();
            let mut p = base.clone();
            p[k] += 1e-6;
            unflatten(&mut probe, &p);
            let up = probe.eval(input);
            p[k] -= 2e-6;
            unflatten(&mut probe, &p);
            let down = probe.eval(input);
            assert!((grad[k] - (up - down) / 2e-6).abs() < 1e-6, "parameter {k}");
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut d = TinyDecoder::init(&[7, 3], 1).unwrap();
        d.codes = vec![[0.1 + 0.2, 1.0 / 3.0, -2.0f64.sqrt()]];
        let back = TinyDecoder::from_json(&d.to_json().unwrap()).unwrap();
        assert_eq!(
            flatten(&d).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            flatten(&back).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(d, back);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let space = ShapeSpace::single(Shape::sphere(0.4));
        let codes = [LatentCode::new([1.0, 0.0, 0.0]).unwrap()];
        let samples = sample_training_set(&space, &codes, 100, 0);
        let config = DecoderTrainingConfig {
            epochs: 0,
            ..Default::default()
        };
        let (d, report) = train_decoder(&samples, &samples, &codes, &config).unwrap();
        let init = TinyDecoder::init(&config.hidden, config.seed).unwrap();
        assert_eq!(d.layers, init.layers);
        assert!(report.held_out_mae.is_finite());
    }

    #[test]
    fn divergence_is_a_training_error() {
        let space = ShapeSpace::single(Shape::sphere(0.4));
        let codes = [LatentCode::new([1.0, 0.0, 0.0]).unwrap()];
        let mut samples = sample_training_set(&space, &codes, 10, 0);
        samples[0].x = [f64::NAN; 3];
        let config = DecoderTrainingConfig {
            epochs: 2,
            ..Default::default()
        };
        assert!(matches!(
            train_decoder(&samples, &[], &codes, &config),
            Err(Error::Training { .. })
        ));
    }

    #[test]
    fn two_sphere_space_trains_below_threshold() {
        let space = ShapeSpace::blend(
            BlendSpace::new(
                vec![Shape::sphere(0.4), Shape::sphere(0.25)],
                vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
                8.0,
            )
            .unwrap(),
        );
        let codes = [
            LatentCode::new([1.0, 0.0, 0.0]).unwrap(),
            LatentCode::new([0.0, 1.0, 0.0]).unwrap(),
        ];
        let train = sample_training_set(&space, &codes, 5000, 1);
        let held = sample_training_set(&space, &codes, 500, 2);
        let config = DecoderTrainingConfig {
            epochs: 200,
            ..Default::default()
        };
        let (_, report) = train_decoder(&train, &held, &codes, &config).unwrap();
        assert!(report.held_out_mae < 0.02, "{}", report.held_out_mae);
    }
}
