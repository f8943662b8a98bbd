//! Small fully-connected classifier with explicit forward/backward passes,
//! a momentum-SGD optimizer, a step learning-rate schedule, and a versioned
//! binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::Logits;

/// Network shape: input dim, hidden widths, output classes. Hidden layers use
/// the rectifier; the final layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>) -> Result<Self> {
        if layer_widths.len() < 3 {
            return Err(Error::InvalidArgument(
                "need at least input, one hidden, and output widths".into(),
            ));
        }
        if layer_widths.iter().any(|w| *w == 0) {
            return Err(Error::InvalidArgument("zero layer width".into()));
        }
        Ok(Self { layer_widths })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

/// One dense layer, row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// All parameters of an MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Glorot-uniform initialization: `U(-b, b)` with
    /// `b = sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init<R: Rng>(spec: &MlpSpec, rng: &mut R) -> Self {
        let layers = (0..spec.num_layers())
            .map(|l| {
                let in_dim = spec.layer_widths[l];
                let out_dim = spec.layer_widths[l + 1];
                let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
                let weights = (0..in_dim * out_dim)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Layer { weights, biases: vec![0.0; out_dim], in_dim, out_dim }
            })
            .collect();
        Self { spec: spec.clone(), layers }
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                weights: vec![0.0; l.weights.len()],
                biases: vec![0.0; l.biases.len()],
                in_dim: l.in_dim,
                out_dim: l.out_dim,
            })
            .collect();
        Self { spec: self.spec.clone(), layers }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::InvalidArgument("parameter count mismatch".into()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&values[off..off + nw]);
            off += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&values[off..off + nb]);
            off += nb;
        }
        Ok(())
    }
}

/// Activations recorded by `forward` for the matching `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `post[0]` is the input; `post[l]` the rectified output of layer `l-1`
    /// for hidden layers. Pre-activations kept for the rectifier mask.
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

/// Forward pass for a single feature vector.
pub fn forward(params: &MlpParams, features: &[f64]) -> Result<(Logits, ForwardCache)> {
    if features.len() != params.spec.input_dim() {
        return Err(Error::InvalidInput(format!(
            "feature dim {} != input dim {}",
            features.len(),
            params.spec.input_dim()
        )));
    }
    let n_layers = params.layers.len();
    let mut pre = Vec::with_capacity(n_layers);
    let mut post = Vec::with_capacity(n_layers + 1);
    post.push(features.to_vec());
    for (l, layer) in params.layers.iter().enumerate() {
        let x = post.last().unwrap();
        let mut z = layer.biases.clone();
        for o in 0..layer.out_dim {
            let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            z[o] += acc;
        }
        pre.push(z.clone());
        if l + 1 < n_layers {
            for v in &mut z {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        post.push(z);
    }
    let logits = Logits::new(post.last().unwrap().clone())?;
    Ok((logits, ForwardCache { pre, post }))
}

/// Backward pass: gradients of `sum(grad_logits . logits)` with respect to
/// every parameter, accumulated into `grads`.
pub fn backward(
    params: &MlpParams,
    cache: &ForwardCache,
    grad_logits: &[f64],
    grads: &mut MlpParams,
) -> Result<()> {
    let n_layers = params.layers.len();
    if cache.post.len() != n_layers + 1 {
        return Err(Error::InvalidInput("stale forward cache".into()));
    }
    if grad_logits.len() != params.spec.num_classes() {
        return Err(Error::InvalidInput("grad_logits dim mismatch".into()));
    }
    let mut delta = grad_logits.to_vec();
    for l in (0..n_layers).rev() {
        let layer = &params.layers[l];
        let input = &cache.post[l];
        let g = &mut grads.layers[l];
        for o in 0..layer.out_dim {
            g.biases[o] += delta[o];
            let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (gw, xi) in row.iter_mut().zip(input) {
                *gw += delta[o] * xi;
            }
        }
        if l > 0 {
            let mut next = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (i, w) in row.iter().enumerate() {
                    next[i] += delta[o] * w;
                }
            }
            // Rectifier mask from the previous layer's pre-activation.
            for (i, v) in next.iter_mut().enumerate() {
                if cache.pre[l - 1][i] <= 0.0 {
                    *v = 0.0;
                }
            }
            delta = next;
        }
    }
    Ok(())
}

/// Momentum buffers plus the fixed optimizer hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub buffers: MlpParams,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &MlpParams) -> Self {
        Self { buffers: params.zeros_like(), momentum: 0.9, weight_decay: 1e-4 }
    }
}

/// One momentum-SGD update:
/// `buf = momentum * buf + grad + weight_decay * param; param -= lr * buf`.
/// Weight decay applies to weights only, never biases.
pub fn sgd_step(params: &mut MlpParams, grads: &MlpParams, state: &mut OptimizerState, lr: f64) {
    for ((pl, gl), bl) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.buffers.layers)
    {
        for i in 0..pl.weights.len() {
            bl.weights[i] =
                state.momentum * bl.weights[i] + gl.weights[i] + state.weight_decay * pl.weights[i];
            pl.weights[i] -= lr * bl.weights[i];
        }
        for i in 0..pl.biases.len() {
            bl.biases[i] = state.momentum * bl.biases[i] + gl.biases[i];
            pl.biases[i] -= lr * bl.biases[i];
        }
    }
}

/// Step schedule: the learning rate starts at `initial` and is divided by
/// `decay_factor` at each milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_factor: f64,
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    pub fn new(initial: f64, decay_factor: f64, milestones: Vec<usize>) -> Result<Self> {
        if !milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument("milestones must be strictly increasing".into()));
        }
        Ok(Self { initial, decay_factor, milestones })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.milestones.iter().filter(|m| epoch >= **m).count();
        self.initial / self.decay_factor.powi(hits as i32)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"JNPLCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Save a versioned binary checkpoint: magic, version, layer widths, then the
/// flat parameter vector as little-endian f64.
pub fn save_checkpoint(params: &MlpParams, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    f.write_all(&(params.spec.layer_widths.len() as u32).to_le_bytes())?;
    for w in &params.spec.layer_widths {
        f.write_all(&(*w as u64).to_le_bytes())?;
    }
    for v in params.flat() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MlpParams> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint truncated".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    if u32::from_le_bytes(u32buf) != CHECKPOINT_VERSION {
        return Err(Error::Format("unsupported checkpoint version".into()));
    }
    f.read_exact(&mut u32buf)?;
    let n_widths = u32::from_le_bytes(u32buf) as usize;
    let mut widths = Vec::with_capacity(n_widths);
    let mut u64buf = [0u8; 8];
    for _ in 0..n_widths {
        f.read_exact(&mut u64buf)?;
        widths.push(u64::from_le_bytes(u64buf) as usize);
    }
    let spec = MlpSpec::new(widths)?;
    let mut rng_free = spec_zero_params(&spec);
    let n = rng_free.num_params();
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        f.read_exact(&mut u64buf)
            .map_err(|_| Error::Format("checkpoint truncated".into()))?;
        values.push(f64::from_le_bytes(u64buf));
    }
    rng_free.set_flat(&values)?;
    Ok(rng_free)
}

fn spec_zero_params(spec: &MlpSpec) -> MlpParams {
    let layers = (0..spec.num_layers())
        .map(|l| {
            let in_dim = spec.layer_widths[l];
            let out_dim = spec.layer_widths[l + 1];
            Layer {
                weights: vec![0.0; in_dim * out_dim],
                biases: vec![0.0; out_dim],
                in_dim,
                out_dim,
            }
        })
        .collect();
    MlpParams { spec: spec.clone(), layers }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{nl_loss, nlplus_loss, pl_loss, plplus_loss, JnplConfig};
    use crate::prob::{clamp_prob, softmax, ClassLabel, ComplementaryLabelSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_uniform_softmax() {
        let spec = MlpSpec::new(vec![3, 4, 2]).unwrap();
        let params = spec_zero_params(&spec);
        let (logits, _) = forward(&params, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(logits.values(), &[0.0, 0.0]);
        let p = softmax(&logits);
        assert_eq!(p.values(), &[0.5, 0.5]);
    }

    #[test]
    fn forward_shape_mismatch_errors() {
        let spec = MlpSpec::new(vec![3, 4, 2]).unwrap();
        let params = spec_zero_params(&spec);
        assert!(forward(&params, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn random_params_finite_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = MlpSpec::new(vec![6, 16, 16, 3]).unwrap();
        for _ in 0..50 {
            let params = MlpParams::init(&spec, &mut rng);
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-10.0..10.0)).collect();
            let (logits, _) = forward(&params, &x).unwrap();
            assert!(logits.values().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_grad_logits_zero_param_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = MlpSpec::new(vec![4, 8, 3]).unwrap();
        let params = MlpParams::init(&spec, &mut rng);
        let (_, cache) = forward(&params, &[0.1, -0.2, 0.3, 0.4]).unwrap();
        let mut grads = params.zeros_like();
        backward(&params, &cache, &[0.0, 0.0, 0.0], &mut grads).unwrap();
        assert!(grads.flat().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn linear_layer_grads_are_outer_products() {
        // Network with one hidden layer whose input never hits the rectifier
        // kink (positive pre-activations) reduces to checking the last layer.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = MlpSpec::new(vec![3, 2, 2]).unwrap();
        let mut params = spec_zero_params(&spec);
        // Identity-ish first layer with positive bias to stay in the linear
        // region.
        params.layers[0].weights = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        params.layers[0].biases = vec![5.0, 5.0];
        params.layers[1].weights = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = [0.3, 0.7, -0.1];
        let (_, cache) = forward(&params, &x).unwrap();
        let hidden = cache.post[1].clone();
        let gl = [0.25, -0.4];
        let mut grads = params.zeros_like();
        backward(&params, &cache, &gl, &mut grads).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                assert!((grads.layers[1].weights[o * 2 + i] - gl[o] * hidden[i]).abs() < 1e-12);
            }
            assert!((grads.layers[1].biases[o] - gl[o]).abs() < 1e-12);
        }
    }

    // Finite-difference oracle over every parameter of a tiny net, composed
    // with each of the four losses (stop-gradient convention on weights).
    #[test]
    fn full_pipeline_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = MlpSpec::new(vec![4, 8, 8, 3]).unwrap();
        let params = MlpParams::init(&spec, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = ClassLabel::new(1);
        let ybar = ComplementaryLabelSet::new(vec![ClassLabel::new(2)], y, 3).unwrap();
        let cfg = JnplConfig::default();

        // Detached weights frozen at the unperturbed point.
        let (logits0, _) = forward(&params, &x).unwrap();
        let p0 = softmax(&logits0);
        let w_nlp = 1.0 - clamp_prob(p0.get(ClassLabel::new(2)));
        let target = p0.argmax();
        let w_plp = crate::losses::plplus_weight(clamp_prob(p0.get(target)), cfg.n_exponent);

        type ValFn<'a> = Box<dyn Fn(&MlpParams) -> f64 + 'a>;
        let losses: Vec<(&str, ValFn, MlpParams)> = vec![
            (
                "pl",
                Box::new(|p: &MlpParams| {
                    let (l, _) = forward(p, &x).unwrap();
                    pl_loss(&l, y).unwrap().value
                }),
                {
                    let (l, cache) = forward(&params, &x).unwrap();
                    let mut g = params.zeros_like();
                    backward(&params, &cache, &pl_loss(&l, y).unwrap().grad, &mut g).unwrap();
                    g
                },
            ),
            (
                "nl",
                Box::new(|p: &MlpParams| {
                    let (l, _) = forward(p, &x).unwrap();
                    nl_loss(&l, &ybar).unwrap().value
                }),
                {
                    let (l, cache) = forward(&params, &x).unwrap();
                    let mut g = params.zeros_like();
                    backward(&params, &cache, &nl_loss(&l, &ybar).unwrap().grad, &mut g).unwrap();
                    g
                },
            ),
            (
                "nlplus",
                Box::new(|p: &MlpParams| {
                    let (l, _) = forward(p, &x).unwrap();
                    let pv = softmax(&l);
                    -w_nlp * (1.0 - clamp_prob(pv.get(ClassLabel::new(2)))).ln()
                }),
                {
                    let (l, cache) = forward(&params, &x).unwrap();
                    let mut g = params.zeros_like();
                    backward(&params, &cache, &nlplus_loss(&l, &ybar).unwrap().grad, &mut g)
                        .unwrap();
                    g
                },
            ),
            (
                "plplus",
                Box::new(|p: &MlpParams| {
                    let (l, _) = forward(p, &x).unwrap();
                    let pv = softmax(&l);
                    -w_plp * clamp_prob(pv.get(target)).ln()
                }),
                {
                    let (l, cache) = forward(&params, &x).unwrap();
                    let mut g = params.zeros_like();
                    backward(&params, &cache, &plplus_loss(&l, target, &cfg).unwrap().grad, &mut g)
                        .unwrap();
                    g
                },
            ),
        ];

        let h = 1e-5;
        for (name, value_fn, analytic) in &losses {
            let flat = params.flat();
            let aflat = analytic.flat();
            for i in 0..flat.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                let mut fp = flat.clone();
                fp[i] += h;
                plus.set_flat(&fp).unwrap();
                fp[i] -= 2.0 * h;
                minus.set_flat(&fp).unwrap();
                let fd = (value_fn(&plus) - value_fn(&minus)) / (2.0 * h);
                let tol = 1e-5 * aflat[i].abs().max(1.0);
                assert!(
                    (fd - aflat[i]).abs() <= tol,
                    "{name} param {i}: fd {fd} analytic {}",
                    aflat[i]
                );
            }
        }
    }

    #[test]
    fn sgd_noop_without_signal() {
        let spec = MlpSpec::new(vec![2, 2, 2]).unwrap();
        let mut params = spec_zero_params(&spec);
        params.layers[0].weights = vec![1.0, 2.0, 3.0, 4.0];
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = OptimizerState::new(&params);
        state.weight_decay = 0.0;
        sgd_step(&mut params, &grads, &mut state, 0.1);
        assert_eq!(params, before);
    }

    #[test]
    fn sgd_single_scalar_step() {
        let spec = MlpSpec::new(vec![1, 1, 1]).unwrap();
        let mut params = spec_zero_params(&spec);
        params.layers[0].weights = vec![1.0];
        let mut grads = params.zeros_like();
        grads.layers[0].weights = vec![1.0];
        let mut state = OptimizerState::new(&params);
        state.weight_decay = 0.0;
        sgd_step(&mut params, &grads, &mut state, 0.1);
        assert!((params.layers[0].weights[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_deterministic_over_steps() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let spec = MlpSpec::new(vec![3, 8, 2]).unwrap();
            let mut params = MlpParams::init(&spec, &mut rng);
            let mut state = OptimizerState::new(&params);
            for step in 0..100 {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let (logits, cache) = forward(&params, &x).unwrap();
                let eval = pl_loss(&logits, ClassLabel::new(step % 2)).unwrap();
                let mut grads = params.zeros_like();
                backward(&params, &cache, &eval.grad, &mut grads).unwrap();
                sgd_step(&mut params, &grads, &mut state, 0.01);
            }
            params.flat()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lr_schedule_steps_at_milestones() {
        let s = LrSchedule::new(0.01, 10.0, vec![160]).unwrap();
        assert_eq!(s.lr_at(0), 0.01);
        assert_eq!(s.lr_at(159), 0.01);
        assert!((s.lr_at(160) - 0.001).abs() < 1e-15);
        assert!(LrSchedule::new(0.1, 10.0, vec![5, 5]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = MlpSpec::new(vec![5, 8, 4]).unwrap();
        let params = MlpParams::init(&spec, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
