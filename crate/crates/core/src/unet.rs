//! Encoder–decoder segmentation network with concatenated skip connections.
//!
//! Layout for depth `D`, initial features `F` and `B` bottleneck layers:
//!
//! * encoder block `i` (`0..D`): two conv→BN→ReLU at `F·2^i` features, dropout,
//!   2× max pool;
//! * bottleneck: `B` conv→BN→ReLU at `F·2^D`, no dropout;
//! * decoder block `i` (`D-1..=0`): 2× transpose conv to `F·2^i`, concatenate
//!   the encoder output of the same level, two conv→BN→ReLU, dropout;
//! * 1×1×1 conv to the class logits, channel softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ActivationField, AutodiffError, BatchNormState, Graph, Mode, NodeId, Shape};
use crate::real::Real;
use crate::volume::NUM_CLASSES;

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("input size {size} along axis {axis} is not divisible by 2^{depth} = {factor}")]
    NotDivisible { axis: char, size: usize, depth: usize, factor: usize },
    #[error("invalid model spec: {0}")]
    Invalid(String),
    #[error("cannot parse model spec: {0}")]
    Parse(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum UnetError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("network input has shape {got:?}, model expects {expected:?}")]
    InputShape { expected: Shape, got: Shape },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    pub initial_features: usize,
    pub depth: usize,
    pub kernel: [usize; 3],
    pub bottleneck_layers: usize,
    pub dropout_rate: f64,
    pub input_dims: [usize; 3],
}

impl ModelSpec {
    /// F = 16, D = 4, B = 2, K = 3 on a 128³ single-channel input, 28 classes.
    pub fn full_size() -> Self {
        Self {
            in_channels: 1,
            num_classes: NUM_CLASSES,
            initial_features: 16,
            depth: 4,
            kernel: [3, 3, 3],
            bottleneck_layers: 2,
            dropout_rate: 0.2,
            input_dims: [128, 128, 128],
        }
    }

    /// D = 2, F = 8 network for 32³ phantoms.
    pub fn desk(input_dims: [usize; 3]) -> Self {
        Self { initial_features: 8, depth: 2, input_dims, ..Self::full_size() }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let bad = |m: &str| Err(SpecError::Invalid(m.to_string()));
        if self.in_channels == 0 || self.num_classes < 2 {
            return bad("need at least one input channel and two classes");
        }
        if self.initial_features == 0 || self.depth == 0 || self.bottleneck_layers == 0 {
            return bad("initial_features, depth and bottleneck_layers must be ≥ 1");
        }
        let k = self.kernel[0];
        if self.kernel.iter().any(|&v| v != k) || k % 2 == 0 {
            return bad("kernel must be cubic with odd size");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        let factor = 1usize << self.depth;
        for (axis, &size) in ['x', 'y', 'z'].iter().zip(&self.input_dims) {
            if size == 0 || size % factor != 0 {
                return Err(SpecError::NotDivisible { axis: *axis, size, depth: self.depth, factor });
            }
        }
        Ok(())
    }

    /// Feature count at encoder level `level` (the bottleneck is level `D`).
    pub fn features(&self, level: usize) -> usize {
        self.initial_features << level
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        let [x, y, z] = self.input_dims;
        Shape::new(batch, self.in_channels, x, y, z)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn from_text(text: &str) -> Result<Self, SpecError> {
        toml::from_str(text).map_err(|e| SpecError::Parse(e.to_string()))
    }

    /// Every trainable array in forward-consumption order.
    pub fn parameter_layout(&self) -> Vec<ParamDesc> {
        let k = self.kernel[0];
        let mut out = Vec::new();
        let conv = |out: &mut Vec<ParamDesc>, name: &str, cin: usize, cout: usize, k: usize| {
            out.push(ParamDesc {
                name: format!("{name}.weight"),
                shape: Shape::kernel(cout, cin, k),
                init: Init::HeUniform { fan_in: cin * k * k * k },
            });
            out.push(ParamDesc { name: format!("{name}.bias"), shape: Shape::channel_vector(cout), init: Init::Zero });
        };
        let bn = |out: &mut Vec<ParamDesc>, name: &str, c: usize| {
            out.push(ParamDesc { name: format!("{name}.gamma"), shape: Shape::channel_vector(c), init: Init::One });
            out.push(ParamDesc { name: format!("{name}.beta"), shape: Shape::channel_vector(c), init: Init::Zero });
        };
        let mut cin = self.in_channels;
        for i in 0..self.depth {
            let f = self.features(i);
            conv(&mut out, &format!("enc{i}.conv0"), cin, f, k);
            bn(&mut out, &format!("enc{i}.bn0"), f);
            conv(&mut out, &format!("enc{i}.conv1"), f, f, k);
            bn(&mut out, &format!("enc{i}.bn1"), f);
            cin = f;
        }
        let fb = self.features(self.depth);
        for j in 0..self.bottleneck_layers {
            conv(&mut out, &format!("bottleneck.conv{j}"), cin, fb, k);
            bn(&mut out, &format!("bottleneck.bn{j}"), fb);
            cin = fb;
        }
        for i in (0..self.depth).rev() {
            let f = self.features(i);
            // each output voxel of a stride-2 transpose conv sees one tap per input channel
            out.push(ParamDesc {
                name: format!("dec{i}.up.weight"),
                shape: Shape::new(cin, f, 2, 2, 2),
                init: Init::HeUniform { fan_in: cin },
            });
            out.push(ParamDesc { name: format!("dec{i}.up.bias"), shape: Shape::channel_vector(f), init: Init::Zero });
            conv(&mut out, &format!("dec{i}.conv0"), 2 * f, f, k);
            bn(&mut out, &format!("dec{i}.bn0"), f);
            conv(&mut out, &format!("dec{i}.conv1"), f, f, k);
            bn(&mut out, &format!("dec{i}.bn1"), f);
            cin = f;
        }
        conv(&mut out, "head", cin, self.num_classes, 1);
        out
    }

    /// Names and widths of the batch-norm layers in forward order.
    pub fn batch_norm_layout(&self) -> Vec<(String, usize)> {
        self.parameter_layout()
            .into_iter()
            .filter_map(|p| p.name.strip_suffix(".gamma").map(|n| (n.to_string(), p.shape.channels)))
            .collect()
    }
}

/// Number of trainable scalars (running statistics are not counted).
pub fn count_parameters(spec: &ModelSpec) -> usize {
    spec.parameter_layout().iter().map(|p| p.shape.len()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    HeUniform { fan_in: usize },
    Zero,
    One,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDesc {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

/// Named trainable arrays in forward-consumption order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    pub names: Vec<String>,
    pub values: Vec<ActivationField<T>>,
    /// Seed the values were initialized from.
    pub seed: u64,
}

impl<T: Real> ParameterStore<T> {
    /// He-uniform conv weights `U(−√(6/fan_in), √(6/fan_in))`, zero biases,
    /// unit BN scale, zero BN shift. Draws happen in layout order.
    pub fn initialize(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut values = Vec::new();
        for p in spec.parameter_layout() {
            let v = match p.init {
                Init::HeUniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let vals = (0..p.shape.len()).map(|_| T::from_f64_lossy(rng.random_range(-bound..bound))).collect();
                    ActivationField::new(p.shape, vals)
                }
                Init::Zero => ActivationField::zeros(p.shape),
                Init::One => ActivationField::filled(p.shape, T::one()),
            };
            names.push(p.name);
            values.push(v);
        }
        Self { names, values, seed }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.values.iter().map(|v| v.values.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ActivationField<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ActivationField<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.values[i])
    }
}

/// Dropout behaviour of a forward pass.
pub enum Dropout<'a> {
    Off,
    /// Active with `rate`, masks drawn from `rng`.
    On { rate: f64, rng: &'a mut ChaCha8Rng },
}

/// Result of [`UNet::forward`].
pub struct ForwardPass {
    pub logits: NodeId,
    pub probabilities: NodeId,
    /// Graph nodes of the parameters, in store order.
    pub params: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    pub spec: ModelSpec,
    pub params: ParameterStore<T>,
    /// Batch-norm layer names and running statistics, in forward order.
    pub batch_norm: Vec<(String, BatchNormState)>,
}

impl<T: Real> UNet<T> {
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self, SpecError> {
        spec.validate()?;
        let params = ParameterStore::initialize(&spec, seed);
        let batch_norm = spec.batch_norm_layout().into_iter().map(|(n, c)| (n, BatchNormState::new(c))).collect();
        Ok(Self { spec, params, batch_norm })
    }

    /// Appends the network to `g`. Parameters become trainable leaves when
    /// `trainable`, constants otherwise.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        x: NodeId,
        mode: Mode,
        dropout: Dropout<'_>,
        trainable: bool,
    ) -> Result<ForwardPass, UnetError> {
        let xs = g.shape(x);
        let expected = self.spec.input_shape(xs.batch);
        if xs != expected {
            return Err(UnetError::InputShape { expected, got: xs });
        }
        let params: Vec<NodeId> = self
            .params
            .values
            .iter()
            .map(|v| if trainable { g.parameter(v.clone()) } else { g.input(v.clone()) })
            .collect();
        let mut p = params.iter().copied();
        let mut bn = self.batch_norm.iter_mut().map(|(_, s)| s);
        let (rate, mut rng) = match dropout {
            Dropout::Off => (0.0, None),
            Dropout::On { rate, rng } => (rate, Some(rng)),
        };
        let mut drop = |g: &mut Graph<T>, h: NodeId| -> Result<NodeId, AutodiffError> {
            match rng.as_deref_mut() {
                Some(r) => g.dropout(h, rate, r),
                None => Ok(h),
            }
        };

        let mut h = x;
        let mut skips = Vec::with_capacity(self.spec.depth);
        for _ in 0..self.spec.depth {
            h = conv_bn_relu(g, h, &mut p, &mut bn, mode)?;
            h = conv_bn_relu(g, h, &mut p, &mut bn, mode)?;
            h = drop(g, h)?;
            skips.push(h);
            h = g.max_pool3d(h)?;
        }
        for _ in 0..self.spec.bottleneck_layers {
            h = conv_bn_relu(g, h, &mut p, &mut bn, mode)?;
        }
        for skip in skips.into_iter().rev() {
            let (w, b) = (take(&mut p), take(&mut p));
            h = g.transpose_conv3d(h, w, b)?;
            h = g.concat_channels(skip, h)?;
            h = conv_bn_relu(g, h, &mut p, &mut bn, mode)?;
            h = conv_bn_relu(g, h, &mut p, &mut bn, mode)?;
            h = drop(g, h)?;
        }
        let (w, b) = (take(&mut p), take(&mut p));
        let logits = g.conv3d(h, w, b)?;
        let probabilities = g.softmax_channels(logits);
        Ok(ForwardPass { logits, probabilities, params })
    }

    /// Softmax output for `input` (shape `spec.input_shape(batch)`) without
    /// gradient tracking.
    pub fn infer(&mut self, input: ActivationField<T>, mode: Mode, dropout: Dropout<'_>) -> Result<ActivationField<T>, UnetError> {
        let mut g = Graph::new();
        let x = g.input(input);
        let fp = self.forward(&mut g, x, mode, dropout, false)?;
        Ok(g.value(fp.probabilities).clone())
    }

    pub fn cast<U: Real>(&self) -> UNet<U> {
        UNet {
            spec: self.spec,
            params: ParameterStore {
                names: self.params.names.clone(),
                values: self.params.values.iter().map(|v| v.cast()).collect(),
                seed: self.params.seed,
            },
            batch_norm: self.batch_norm.clone(),
        }
    }
}

fn take(p: &mut impl Iterator<Item = NodeId>) -> NodeId {
    p.next().expect("parameter layout exhausted")
}

fn conv_bn_relu<'s, T: Real>(
    g: &mut Graph<T>,
    h: NodeId,
    p: &mut impl Iterator<Item = NodeId>,
    bn: &mut impl Iterator<Item = &'s mut BatchNormState>,
    mode: Mode,
) -> Result<NodeId, AutodiffError> {
    let (w, b) = (take(p), take(p));
    let c = g.conv3d(h, w, b)?;
    let (gamma, beta) = (take(p), take(p));
    let n = g.batch_norm(c, gamma, beta, bn.next().expect("batch-norm layout exhausted"), mode)?;
    Ok(g.relu(n))
}
