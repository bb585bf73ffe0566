//! MLP in factored-parameter form: direct parameters `theta`, factor `w`,
//! gates `gamma`, multipliers `u`, and a binary prune mask per tensor.
//! Biases carry the same factored structure as weight matrices.

use crate::autodiff::{AutodiffError, Tape, Var};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer_dims must have length >= 2 with all dims >= 1, got {0:?}")]
    BadLayerDims(Vec<usize>),
    #[error("input has {got} columns, model expects {expected}")]
    InputDimMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputHead {
    Linear,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub output_head: OutputHead,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation, output_head: OutputHead) -> Result<Self, ModelError> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(ModelError::BadLayerDims(layer_dims));
        }
        Ok(Self { layer_dims, activation, output_head })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Total number of parameters (weights plus biases).
    pub fn param_count(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|d| d[0] * d[1] + d[1])
            .sum()
    }
}

/// One factored parameter tensor: effective value is `theta * mask`
/// on the direct path; the PMMP path couples `theta` to `w * gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub theta: Array2<f64>,
    pub w: Array2<f64>,
    pub gamma: Array2<f64>,
    pub u: Array2<f64>,
    pub mask: Array2<f64>,
}

impl ParamGroup {
    fn zeros(shape: (usize, usize)) -> Self {
        Self {
            theta: Array2::zeros(shape),
            w: Array2::zeros(shape),
            gamma: Array2::ones(shape),
            u: Array2::zeros(shape),
            mask: Array2::ones(shape),
        }
    }

    pub fn effective(&self) -> Array2<f64> {
        &self.theta * &self.mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: ParamGroup,
    /// Bias stored as a 1 x fan_out row vector.
    pub bias: ParamGroup,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedModel {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
    /// Noise scale in log-space; sigma = exp(log_sigma), so sigma > 0 holds
    /// unconditionally during optimization.
    pub log_sigma: f64,
    pub rng_seed: u64,
}

impl MaskedModel {
    /// Seeded init: weights uniform in +-sqrt(6/(fan_in+fan_out)), biases
    /// zero, gamma = 1, w = theta, u = 0, mask = 1, sigma = 1.
    pub fn init(spec: MlpSpec, rng: &mut ChaCha8Rng, seed: u64) -> Self {
        let mut layers = Vec::new();
        for dims in spec.layer_dims.windows(2) {
            let (fan_in, fan_out) = (dims[0], dims[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut weight = ParamGroup::zeros((fan_in, fan_out));
            weight.theta.mapv_inplace(|_| rng.gen_range(-bound..bound));
            weight.w = weight.theta.clone();
            let mut bias = ParamGroup::zeros((1, fan_out));
            bias.w = bias.theta.clone();
            layers.push(Layer { weight, bias });
        }
        Self { spec, layers, log_sigma: 0.0, rng_seed: seed }
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    /// Gate and multiplier init for the PMMP path: gamma broadcast to
    /// `p_init`, u to `u_multi`, w kept equal to theta.
    pub fn init_pmmp(&mut self, p_init: f64, u_multi: f64) {
        for layer in &mut self.layers {
            for group in [&mut layer.weight, &mut layer.bias] {
                group.gamma.fill(p_init);
                group.u.fill(u_multi);
                group.w = group.theta.clone();
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Count of nonzero effective parameters (theta * mask).
    pub fn nonzero_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .map(|g| g.effective().iter().filter(|&&v| v != 0.0).count())
            .sum()
    }

    /// Plain forward pass on effective parameters. Returns the final affine
    /// output (logits for a softmax head).
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        if x.dim().1 != self.spec.input_dim() {
            return Err(ModelError::InputDimMismatch { got: x.dim().1, expected: self.spec.input_dim() });
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut pre = h.dot(&layer.weight.effective());
            pre += &layer.bias.effective();
            h = if i < last {
                match self.spec.activation {
                    Activation::Tanh => pre.mapv(f64::tanh),
                    Activation::Relu => pre.mapv(|v| v.max(0.0)),
                }
            } else {
                pre
            };
        }
        Ok(h)
    }

    /// Top-1 accuracy in percent against integer labels.
    pub fn accuracy(&self, x: &Array2<f64>, labels: &[usize]) -> Result<f64, ModelError> {
        let logits = self.forward(x)?;
        let correct = logits
            .rows()
            .into_iter()
            .zip(labels)
            .filter(|(row, &label)| {
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                argmax == label
            })
            .count();
        Ok(100.0 * correct as f64 / labels.len() as f64)
    }

    /// Clamp gamma into [0,1] and u to >= 0 elementwise; other fields are
    /// untouched.
    pub fn pmmp_project(&mut self) {
        for layer in &mut self.layers {
            for group in [&mut layer.weight, &mut layer.bias] {
                group.gamma.mapv_inplace(|g| g.clamp(0.0, 1.0));
                group.u.mapv_inplace(|u| u.max(0.0));
            }
        }
    }

    /// Zero theta entries wherever the mask is zero.
    pub fn enforce_mask(&mut self) {
        for layer in &mut self.layers {
            for group in [&mut layer.weight, &mut layer.bias] {
                group.theta = &group.theta * &group.mask;
            }
        }
    }
}

/// Per-layer effective parameter nodes for a tape-based forward pass.
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

/// Forward pass recorded on a tape, given effective weight/bias nodes.
/// Returns the final affine output node.
pub fn mlp_forward_tape(
    tape: &mut Tape,
    spec: &MlpSpec,
    layer_vars: &[LayerVars],
    x: Var,
) -> Result<Var, ModelError> {
    if tape.value(x).dim().1 != spec.input_dim() {
        return Err(ModelError::InputDimMismatch {
            got: tape.value(x).dim().1,
            expected: spec.input_dim(),
        });
    }
    let last = layer_vars.len() - 1;
    let mut h = x;
    for (i, lv) in layer_vars.iter().enumerate() {
        let pre = tape.matmul(h, lv.weight)?;
        let pre = tape.add_row(pre, lv.bias)?;
        h = if i < last {
            match spec.activation {
                Activation::Tanh => tape.tanh(pre)?,
                Activation::Relu => tape.relu(pre)?,
            }
        } else {
            pre
        };
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// Checkpoint format (versioned JSON, exact double-precision round trip)
// ---------------------------------------------------------------------------

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Row-major entries stored as IEEE-754 bit patterns: JSON float
/// formatting is not guaranteed to round-trip doubles bit-exactly, u64
/// integers are.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayData {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<u64>,
}

impl ArrayData {
    fn from_array(a: &Array2<f64>) -> Self {
        Self { rows: a.dim().0, cols: a.dim().1, bits: a.iter().map(|v| v.to_bits()).collect() }
    }

    fn to_array(&self) -> Result<Array2<f64>, CheckpointError> {
        Array2::from_shape_vec((self.rows, self.cols), self.bits.iter().map(|&b| f64::from_bits(b)).collect())
            .map_err(|_| CheckpointError::BadShape { rows: self.rows, cols: self.cols, len: self.bits.len() })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupData {
    pub theta: ArrayData,
    pub w: ArrayData,
    pub gamma: ArrayData,
    pub u: ArrayData,
    pub mask: ArrayData,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerData {
    pub weight: GroupData,
    pub bias: GroupData,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub spec: MlpSpec,
    pub layers: Vec<LayerData>,
    /// log(sigma) as an IEEE-754 bit pattern.
    pub log_sigma_bits: u64,
    pub rng_seed: u64,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format_version {0}")]
    BadVersion(u32),
    #[error("array data of length {len} does not match {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Checkpoint {
    pub fn from_model(model: &MaskedModel) -> Self {
        let group = |g: &ParamGroup| GroupData {
            theta: ArrayData::from_array(&g.theta),
            w: ArrayData::from_array(&g.w),
            gamma: ArrayData::from_array(&g.gamma),
            u: ArrayData::from_array(&g.u),
            mask: ArrayData::from_array(&g.mask),
        };
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            spec: model.spec.clone(),
            layers: model
                .layers
                .iter()
                .map(|l| LayerData { weight: group(&l.weight), bias: group(&l.bias) })
                .collect(),
            log_sigma_bits: model.log_sigma.to_bits(),
            rng_seed: model.rng_seed,
        }
    }

    pub fn into_model(self) -> Result<MaskedModel, CheckpointError> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(CheckpointError::BadVersion(self.format_version));
        }
        let group = |g: &GroupData| -> Result<ParamGroup, CheckpointError> {
            Ok(ParamGroup {
                theta: g.theta.to_array()?,
                w: g.w.to_array()?,
                gamma: g.gamma.to_array()?,
                u: g.u.to_array()?,
                mask: g.mask.to_array()?,
            })
        };
        let layers = self
            .layers
            .iter()
            .map(|l| Ok(Layer { weight: group(&l.weight)?, bias: group(&l.bias)? }))
            .collect::<Result<Vec<_>, CheckpointError>>()?;
        Ok(MaskedModel { spec: self.spec, layers, log_sigma: f64::from_bits(self.log_sigma_bits), rng_seed: self.rng_seed })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}
