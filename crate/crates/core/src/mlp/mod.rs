//! From-scratch fully-connected Q-network.
//!
//! The production architecture is input -> 512 -> 512 -> 256 -> 64 -> 5 with
//! rectified-linear hidden layers and a linear output layer; one output
//! neuron per action carries its estimated Q-value. Arbitrary layer stacks
//! are supported for tests and toy problems. All math runs in double
//! precision; checkpoints store single-precision weights.
//!
//! The training loss is the Huber loss (delta = 1) between the selected
//! action's Q-value and its TD target, so gradients saturate instead of
//! exploding on large errors. Backpropagation is exact and is verified
//! against central finite differences in the test suite.

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Hidden-layer activation. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Layer widths of the production Q-network, input excluded.
pub const DQN_HIDDEN: [usize; 4] = [512, 512, 256, 64];
/// Output width: one Q-value per action.
pub const DQN_OUTPUTS: usize = 5;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("input_dim must be positive")]
    EmptyInput,
    #[error("network needs at least one layer")]
    NoLayers,
    #[error("input has {got} entries, expected {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("non-finite input at index {0}")]
    NonFiniteInput(usize),
}

/// One dense layer; weights are row-major `[out_dim x in_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Weight and bias tensors of the whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<DenseLayer>,
    pub activation: Activation,
}

impl NetworkParams {
    /// Production network for a given input width (the flattened state
    /// tensor length), deterministically initialized from the seed.
    pub fn init(input_dim: usize, seed: u64) -> Result<Self, MlpError> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(&DQN_HIDDEN);
        sizes.push(DQN_OUTPUTS);
        Self::with_layer_sizes(&sizes, seed)
    }

    /// Arbitrary layer stack `[input, hidden..., output]` with scaled
    /// uniform fan-in initialization and zero biases.
    pub fn with_layer_sizes(sizes: &[usize], seed: u64) -> Result<Self, MlpError> {
        if sizes.len() < 2 {
            return Err(MlpError::NoLayers);
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(MlpError::EmptyInput);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for pair in sizes.windows(2) {
            let (in_dim, out_dim) = (pair[0], pair[1]);
            let limit = 1.0 / (in_dim as f64).sqrt();
            let w = (0..in_dim * out_dim).map(|_| rng.gen_range(-limit..=limit)).collect();
            layers.push(DenseLayer { in_dim, out_dim, w, b: vec![0.0; out_dim] });
        }
        Ok(Self { layers, activation: Activation::Relu })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim).unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    /// `[input, hidden..., output]` widths.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.out_dim));
        sizes
    }

    /// Q-values for one input. Validates dimension and finiteness.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, MlpError> {
        if x.len() != self.input_dim() {
            return Err(MlpError::DimMismatch { got: x.len(), expected: self.input_dim() });
        }
        if let Some(idx) = x.iter().position(|v| !v.is_finite()) {
            return Err(MlpError::NonFiniteInput(idx));
        }
        let mut scratch = Scratch::for_params(self);
        self.forward_cached(x, &mut scratch);
        Ok(scratch.output().to_vec())
    }

    /// Forward pass into a reusable scratch buffer (hot path; the caller
    /// guarantees a valid input).
    pub fn forward_cached(&self, x: &[f64], scratch: &mut Scratch) {
        debug_assert_eq!(x.len(), self.input_dim());
        scratch.activations[0].copy_from_slice(x);
        for (l, layer) in self.layers.iter().enumerate() {
            let (input, output) = scratch.activation_pair(l);
            matvec_bias(&layer.w, &layer.b, input, output, layer.in_dim);
            if l + 1 < self.layers.len() {
                for v in output.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
    }
}

/// Reusable forward/backward buffers sized for one network.
#[derive(Debug, Clone)]
pub struct Scratch {
    /// `activations[0]` is the input; `activations[l + 1]` the output of
    /// layer `l` (post-activation).
    activations: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Scratch {
    pub fn for_params(params: &NetworkParams) -> Self {
        let mut activations = vec![vec![0.0; params.input_dim()]];
        activations.extend(params.layers.iter().map(|l| vec![0.0; l.out_dim]));
        let deltas = params.layers.iter().map(|l| vec![0.0; l.out_dim]).collect();
        Self { activations, deltas }
    }

    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("scratch holds at least the input")
    }

    /// Input and output slices around layer `l`.
    fn activation_pair(&mut self, l: usize) -> (&[f64], &mut [f64]) {
        let (lo, hi) = self.activations.split_at_mut(l + 1);
        (lo[l].as_slice(), hi[0].as_mut_slice())
    }
}

/// Gradient accumulator with the same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for (dw, db) in &mut self.layers {
            dw.fill(0.0);
            db.fill(0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (dw, db) in &mut self.layers {
            for v in dw.iter_mut() {
                *v *= factor;
            }
            for v in db.iter_mut() {
                *v *= factor;
            }
        }
    }
}

/// Huber loss (delta = 1) of the residual `e`.
pub fn huber_loss(e: f64) -> f64 {
    if e.abs() <= 1.0 {
        0.5 * e * e
    } else {
        e.abs() - 0.5
    }
}

/// d huber / d e: the residual clipped to [-1, 1].
pub fn huber_grad(e: f64) -> f64 {
    e.clamp(-1.0, 1.0)
}

/// Gradients of the Huber loss between `q[action_index]` and `td_target`
/// with respect to every parameter, accumulated into `grads`. Runs the
/// forward pass through `scratch` and returns the residual `q[a] - target`.
pub fn backward_into(
    params: &NetworkParams,
    x: &[f64],
    action_index: usize,
    td_target: f64,
    scratch: &mut Scratch,
    grads: &mut Gradients,
) -> f64 {
    params.forward_cached(x, scratch);
    let residual = scratch.output()[action_index] - td_target;
    let out_grad = huber_grad(residual);

    let last = params.layers.len() - 1;
    for delta in &mut scratch.deltas {
        delta.fill(0.0);
    }
    scratch.deltas[last][action_index] = out_grad;

    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        // Split off the delta of this layer so the previous one stays
        // reachable for the upstream accumulation.
        let (lower, upper) = scratch.deltas.split_at_mut(l);
        let delta = upper[0].as_slice();
        let prev_delta = if l > 0 { Some(lower[l - 1].as_mut_slice()) } else { None };
        let input = scratch.activations[l].as_slice();
        let (dw, db) = &mut grads.layers[l];

        match prev_delta {
            Some(prev) => {
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    db[o] += d;
                    let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                    let dw_row = &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for i in 0..layer.in_dim {
                        dw_row[i] += d * input[i];
                        prev[i] += d * row[i];
                    }
                }
                // Rectifier gate: the stored activation is post-ReLU, so a
                // zero activation means the unit was clamped.
                for (i, p) in prev.iter_mut().enumerate() {
                    if input[i] <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            None => {
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    db[o] += d;
                    let dw_row = &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for i in 0..layer.in_dim {
                        dw_row[i] += d * input[i];
                    }
                }
            }
        }
    }

    residual
}

/// Allocating convenience wrapper around [`backward_into`].
pub fn backward(
    params: &NetworkParams,
    x: &[f64],
    action_index: usize,
    td_target: f64,
) -> Gradients {
    let mut scratch = Scratch::for_params(params);
    let mut grads = Gradients::zeros_like(params);
    backward_into(params, x, action_index, td_target, &mut scratch, &mut grads);
    grads
}

/// RMSProp accumulators and hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    /// Running mean square per parameter, same shapes as the gradients.
    pub acc: Vec<(Vec<f64>, Vec<f64>)>,
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(params: &NetworkParams, learning_rate: f64, decay: f64) -> Self {
        Self {
            acc: params
                .layers
                .iter()
                .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
                .collect(),
            learning_rate,
            decay,
            epsilon: 1e-8,
        }
    }
}

/// One RMSProp update:
/// `acc <- decay * acc + (1 - decay) * g^2`, then
/// `p <- p - lr * g / sqrt(acc + eps)`.
pub fn rmsprop_step(params: &mut NetworkParams, opt: &mut OptimizerState, grads: &Gradients) {
    let lr = opt.learning_rate;
    let decay = opt.decay;
    let eps = opt.epsilon;
    for (layer, ((acc_w, acc_b), (dw, db))) in
        params.layers.iter_mut().zip(opt.acc.iter_mut().zip(grads.layers.iter()))
    {
        for ((p, a), &g) in layer.w.iter_mut().zip(acc_w.iter_mut()).zip(dw.iter()) {
            *a = decay * *a + (1.0 - decay) * g * g;
            *p -= lr * g / (*a + eps).sqrt();
        }
        for ((p, a), &g) in layer.b.iter_mut().zip(acc_b.iter_mut()).zip(db.iter()) {
            *a = decay * *a + (1.0 - decay) * g * g;
            *p -= lr * g / (*a + eps).sqrt();
        }
    }
}

/// `y[o] = b[o] + sum_i w[o * in_dim + i] * x[i]`, manually unrolled into
/// four accumulators (fixed summation order, so results are reproducible).
fn matvec_bias(w: &[f64], b: &[f64], x: &[f64], y: &mut [f64], in_dim: usize) {
    for (o, out) in y.iter_mut().enumerate() {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = [0.0f64; 4];
        let chunks = in_dim & !3;
        let mut i = 0;
        while i < chunks {
            acc[0] += row[i] * x[i];
            acc[1] += row[i + 1] * x[i + 1];
            acc[2] += row[i + 2] * x[i + 2];
            acc[3] += row[i + 3] * x[i + 3];
            i += 4;
        }
        let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        while i < in_dim {
            sum += row[i] * x[i];
            i += 1;
        }
        *out = b[o] + sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_net(sizes: &[usize], seed: u64) -> NetworkParams {
        NetworkParams::with_layer_sizes(sizes, seed).unwrap()
    }

    /// Central-difference gradient oracle on the Huber loss, independent of
    /// the backprop path.
    fn numerical_gradients(
        params: &NetworkParams,
        x: &[f64],
        action: usize,
        target: f64,
        h: f64,
    ) -> Gradients {
        let loss = |p: &NetworkParams| -> f64 {
            let q = p.forward(x).unwrap();
            huber_loss(q[action] - target)
        };
        let mut grads = Gradients::zeros_like(params);
        for l in 0..params.layers.len() {
            for i in 0..params.layers[l].w.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus.layers[l].w[i] += h;
                minus.layers[l].w[i] -= h;
                grads.layers[l].0[i] = (loss(&plus) - loss(&minus)) / (2.0 * h);
            }
            for i in 0..params.layers[l].b.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus.layers[l].b[i] += h;
                minus.layers[l].b[i] -= h;
                grads.layers[l].1[i] = (loss(&plus) - loss(&minus)) / (2.0 * h);
            }
        }
        grads
    }

    fn max_relative_error(analytic: &Gradients, numeric: &Gradients) -> f64 {
        let mut worst = 0.0f64;
        for (a_layer, n_layer) in analytic.layers.iter().zip(numeric.layers.iter()) {
            for (a, n) in a_layer.0.iter().chain(a_layer.1.iter()).zip(
                n_layer.0.iter().chain(n_layer.1.iter()),
            ) {
                let denom = a.abs().max(n.abs()).max(1e-8);
                worst = worst.max((a - n).abs() / denom);
            }
        }
        worst
    }

    #[test]
    fn init_produces_the_production_shapes() {
        let params = NetworkParams::init(140, 1).unwrap();
        let dims: Vec<(usize, usize)> =
            params.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect();
        assert_eq!(dims, vec![(140, 512), (512, 512), (512, 256), (256, 64), (64, 5)]);
        assert_eq!(params.output_dim(), 5);
        assert!(params.layers.iter().all(|l| l.b.iter().all(|&b| b == 0.0)));
        assert!(params
            .layers
            .iter()
            .all(|l| l.w.iter().all(|w| w.is_finite() && w.abs() <= 1.0)));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        assert_eq!(NetworkParams::init(20, 7).unwrap(), NetworkParams::init(20, 7).unwrap());
        assert_ne!(NetworkParams::init(20, 7).unwrap(), NetworkParams::init(20, 8).unwrap());
    }

    #[test]
    fn zero_input_dim_is_rejected() {
        assert!(matches!(NetworkParams::init(0, 1), Err(MlpError::EmptyInput)));
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut params = toy_net(&[3, 4, 5], 0);
        for layer in &mut params.layers {
            layer.w.fill(0.0);
            layer.b.fill(0.0);
        }
        let q = params.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(q, vec![0.0; 5]);
    }

    #[test]
    fn single_path_network_is_hand_computable() {
        let mut params = toy_net(&[1, 1, 1], 0);
        params.layers[0].w = vec![2.0];
        params.layers[0].b = vec![0.5];
        params.layers[1].w = vec![3.0];
        params.layers[1].b = vec![-1.0];
        // x=1: relu(2*1 + 0.5) = 2.5, then 3*2.5 - 1 = 6.5.
        assert_eq!(params.forward(&[1.0]).unwrap(), vec![6.5]);
        // x=-1: relu(-1.5) = 0, then -1.
        assert_eq!(params.forward(&[-1.0]).unwrap(), vec![-1.0]);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let params = toy_net(&[2, 3], 0);
        assert!(matches!(params.forward(&[1.0]), Err(MlpError::DimMismatch { .. })));
        assert!(matches!(
            params.forward(&[1.0, f64::NAN]),
            Err(MlpError::NonFiniteInput(1))
        ));
    }

    #[test]
    fn bounded_inputs_stay_finite() {
        let params = NetworkParams::init(140, 3).unwrap();
        let x: Vec<f64> = (0..140).map(|i| ((i as f64) * 0.37).sin()).collect();
        let q = params.forward(&x).unwrap();
        assert!(q.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradients_vanish_at_the_loss_minimum() {
        let params = toy_net(&[4, 6, 3], 5);
        let x = [0.3, -0.2, 0.9, 0.1];
        let q = params.forward(&x).unwrap();
        let grads = backward(&params, &x, 1, q[1]);
        for (dw, db) in &grads.layers {
            assert!(dw.iter().all(|&g| g == 0.0));
            assert!(db.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn backprop_matches_finite_differences_on_a_toy_net() {
        let params = toy_net(&[2, 3, 2], 11);
        let x = [0.7, -0.4];
        let q = params.forward(&x).unwrap();
        let target = q[0] - 0.6; // inside the quadratic Huber region
        let analytic = backward(&params, &x, 0, target);
        let numeric = numerical_gradients(&params, &x, 0, target, 1e-6);
        assert!(max_relative_error(&analytic, &numeric) < 1e-4);
    }

    /// Random toy net with non-zero biases so no unit sits exactly on the
    /// rectifier kink, where subgradients and central differences may
    /// legitimately disagree.
    fn random_toy_net(sizes: &[usize], seed: u64, rng: &mut ChaCha8Rng) -> NetworkParams {
        use rand::Rng;
        let mut params = toy_net(sizes, seed);
        for layer in &mut params.layers {
            for b in &mut layer.b {
                *b = rng.gen_range(-0.3..0.3);
            }
        }
        params
    }

    #[test]
    fn backprop_matches_finite_differences_across_random_nets() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..20 {
            let sizes = [
                rng.gen_range(2..5usize),
                rng.gen_range(2..6usize),
                rng.gen_range(2..6usize),
                rng.gen_range(2..4usize),
            ];
            let params = random_toy_net(&sizes, trial, &mut rng);
            let x: Vec<f64> = (0..sizes[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let action = rng.gen_range(0..sizes[3]);
            let q = params.forward(&x).unwrap();
            // Residuals away from the Huber kink at |e| = 1.
            let e: f64 = if rng.gen_bool(0.5) { rng.gen_range(-0.8..0.8) } else { 1.5 };
            let target = q[action] - e;
            let analytic = backward(&params, &x, action, target);
            let numeric = numerical_gradients(&params, &x, action, target, 1e-6);
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "trial {trial}: relative error {err}");
        }
    }

    #[test]
    fn huber_gradient_saturates_on_large_errors() {
        let params = toy_net(&[3, 4, 2], 2);
        let x = [0.5, -0.5, 0.25];
        let q = params.forward(&x).unwrap();
        let grads = backward(&params, &x, 1, q[1] - 7.0);
        // The output bias gradient of the selected action is the clipped
        // residual itself.
        assert_eq!(grads.layers.last().unwrap().1[1], 1.0);
        // Other actions' output rows receive nothing.
        assert_eq!(grads.layers.last().unwrap().1[0], 0.0);
        let out_layer = &grads.layers.last().unwrap().0;
        let in_dim = params.layers.last().unwrap().in_dim;
        assert!(
            out_layer[in_dim..2 * in_dim].iter().any(|&g| g != 0.0),
            "selected action's row gets gradient"
        );
        assert!(out_layer[..in_dim].iter().all(|&g| g == 0.0), "other rows get none");
    }

    #[test]
    fn rmsprop_zero_gradient_only_decays_accumulators() {
        let mut params = toy_net(&[2, 2], 3);
        let before = params.clone();
        let mut opt = OptimizerState::new(&params, 1e-5, 0.95);
        opt.acc[0].0[0] = 1.0;
        let grads = Gradients::zeros_like(&params);
        rmsprop_step(&mut params, &mut opt, &grads);
        assert_eq!(params, before);
        assert_eq!(opt.acc[0].0[0], 0.95);
    }

    #[test]
    fn rmsprop_single_step_matches_hand_computation() {
        let mut params = toy_net(&[1, 1], 0);
        params.layers[0].w[0] = 0.0;
        let mut opt = OptimizerState::new(&params, 1e-5, 0.95);
        let mut grads = Gradients::zeros_like(&params);
        grads.layers[0].0[0] = 1.0;
        rmsprop_step(&mut params, &mut opt, &grads);
        let expected = -1e-5 / (0.05f64 + 1e-8).sqrt();
        assert!((params.layers[0].w[0] - expected).abs() < 1e-12);
        assert!((opt.acc[0].0[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_step_size_approaches_lr_under_constant_gradient() {
        let mut params = toy_net(&[1, 1], 0);
        params.layers[0].w[0] = 0.0;
        let mut opt = OptimizerState::new(&params, 1e-3, 0.95);
        let mut grads = Gradients::zeros_like(&params);
        grads.layers[0].0[0] = 2.0;
        let mut last = params.layers[0].w[0];
        let mut step = 0.0;
        for _ in 0..400 {
            rmsprop_step(&mut params, &mut opt, &grads);
            step = last - params.layers[0].w[0];
            last = params.layers[0].w[0];
        }
        // acc -> g^2, so the step magnitude tends to lr * sign(g).
        assert!((step - 1e-3).abs() < 1e-5, "step was {step}");
    }

    #[test]
    fn training_reduces_loss_on_a_fixed_batch() {
        let mut params = toy_net(&[2, 8, 1], 21);
        let mut opt = OptimizerState::new(&params, 1e-3, 0.95);
        let batch: Vec<([f64; 2], f64)> =
            vec![([0.0, 0.5], 0.3), ([0.4, -0.2], -0.1), ([-0.6, 0.1], 0.5), ([0.9, 0.8], 0.0)];
        let loss_of = |p: &NetworkParams| -> f64 {
            batch
                .iter()
                .map(|(x, y)| huber_loss(p.forward(x).unwrap()[0] - y))
                .sum::<f64>()
                / batch.len() as f64
        };
        let mut scratch = Scratch::for_params(&params);
        let mut losses = vec![loss_of(&params)];
        for _ in 0..50 {
            let mut grads = Gradients::zeros_like(&params);
            for (x, y) in &batch {
                backward_into(&params, x, 0, *y, &mut scratch, &mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            rmsprop_step(&mut params, &mut opt, &grads);
            losses.push(loss_of(&params));
        }
        assert!(
            losses.last().unwrap() < &(0.5 * losses[0]),
            "loss did not drop: {:?} -> {:?}",
            losses[0],
            losses.last().unwrap()
        );
        assert!(losses.windows(2).take(10).all(|w| w[1] <= w[0] + 1e-12));
    }
}
