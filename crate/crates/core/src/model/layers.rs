//! Parameter handles for the building blocks and their tape forwards.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Bound, ParamId, ParamStore, Result, RunningStats, Tape, TensorError, Var, LAYER_NORM_EPS};

/// Uniform in `[-b, b]` with `b = 1 / sqrt(fan_in)`, the usual default for
/// linear and conv layers (Kaiming uniform with negative slope `sqrt(5)`).
pub(crate) fn kaiming_uniform(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..=bound) as f32).collect()
}

/// Affine map on the last axis: `y = x W + b`, `W` stored as `[in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn register(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight =
            store.register(&format!("{name}.weight"), vec![input, output], kaiming_uniform(rng, input, input * output), true);
        let bias = store.register(&format!("{name}.bias"), vec![output], vec![0.0; output], true);
        Self { weight, bias, input, output }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.input) {
            return Err(TensorError::Shape { op: "linear", lhs: shape, rhs: vec![self.input, self.output] });
        }
        let rows = shape.iter().product::<usize>() / self.input;
        let flat = tape.reshape(x, vec![rows, self.input])?;
        let y = tape.matmul(flat, bound.var(self.weight))?;
        let y = tape.add_bias(y, bound.var(self.bias))?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.output;
        tape.reshape(y, out_shape)
    }
}

/// 3x3 same-size convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub fn register(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = cin * 9;
        let weight =
            store.register(&format!("{name}.weight"), vec![cout, cin, 3, 3], kaiming_uniform(rng, fan_in, cout * fan_in), true);
        let bias = store.register(&format!("{name}.bias"), vec![cout], vec![0.0; cout], true);
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.conv2d_3x3(x, bound.var(self.weight), bound.var(self.bias))
    }
}

/// Batch norm with running statistics kept as non-trainable buffers.
/// `slot` indexes the [`RunningStats`] slice passed to forwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub slot: usize,
}

impl BatchNorm {
    pub fn register(store: &mut ParamStore, name: &str, channels: usize, slot: usize) -> Self {
        Self {
            gain: store.register(&format!("{name}.gain"), vec![channels], vec![1.0; channels], true),
            shift: store.register(&format!("{name}.shift"), vec![channels], vec![0.0; channels], true),
            running_mean: store.register(&format!("{name}.running_mean"), vec![channels], vec![0.0; channels], false),
            running_var: store.register(&format!("{name}.running_var"), vec![channels], vec![1.0; channels], false),
            slot,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, stats: &mut [RunningStats], x: Var, train: bool) -> Result<Var> {
        let running = stats.get_mut(self.slot).ok_or_else(|| TensorError::Invalid {
            op: "batch_norm",
            msg: format!("no running statistics for slot {}", self.slot),
        })?;
        tape.batch_norm_2d(x, bound.var(self.gain), bound.var(self.shift), running, train)
    }

    pub fn read_stats(&self, store: &ParamStore) -> RunningStats {
        let widen = |id| store.get(id).data.iter().map(|&v| v as f64).collect();
        RunningStats { mean: widen(self.running_mean), var: widen(self.running_var) }
    }

    pub fn write_stats(&self, store: &mut ParamStore, stats: &RunningStats) -> Result<()> {
        store.set_from_f64(self.running_mean, &stats.mean)?;
        store.set_from_f64(self.running_var, &stats.var)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.register(&format!("{name}.gain"), vec![dim], vec![1.0; dim], true),
            shift: store.register(&format!("{name}.shift"), vec![dim], vec![0.0; dim], true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound.var(self.gain), bound.var(self.shift), LAYER_NORM_EPS)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::register(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::register(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, bound, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, bound, h)
    }
}

/// `conv -> BN -> HardSwish`, the shallow feature extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBnAct {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnAct {
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, stats: &mut [RunningStats], x: Var, train: bool) -> Result<Var> {
        let y = self.conv.forward(tape, bound, x)?;
        let y = self.bn.forward(tape, bound, stats, y, train)?;
        tape.hardswish(y)
    }
}

/// `x + conv2(HardSwish(BN(conv1(x))))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefineBlock {
    pub conv1: Conv,
    pub bn: BatchNorm,
    pub conv2: Conv,
}

impl RefineBlock {
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, stats: &mut [RunningStats], x: Var, train: bool) -> Result<Var> {
        let y = self.conv1.forward(tape, bound, x)?;
        let y = self.bn.forward(tape, bound, stats, y, train)?;
        let y = tape.hardswish(y)?;
        let y = self.conv2.forward(tape, bound, y)?;
        tape.add(x, y)
    }
}
