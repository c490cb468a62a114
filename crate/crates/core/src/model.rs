//! Classifier architectures, training, and the intermediate feature
//! representation used by the detector.

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::{Padding, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid layer index {index} (model has {count} layers)")]
    InvalidLayer { index: usize, count: usize },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("batch size {batch} exceeds dataset size {len}")]
    BatchTooLarge { batch: usize, len: usize },
    #[error("input shape {got:?} does not match model input {expected:?}")]
    InputShape { got: Vec<usize>, expected: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Linear,
}

/// One layer of a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        activation: Activation,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    AvgPool {
        size: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        units: usize,
        activation: Activation,
    },
}

/// Architecture description: composable layer list plus input/output shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// C, H, W
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Shape of the data flowing between layers.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Flow {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl ModelSpec {
    /// Walk the layer list and return the activation shape after each layer.
    /// Errors when consecutive layers do not compose or the final width is
    /// not `num_classes`.
    pub fn validate(&self) -> Result<Vec<usize>, ModelError> {
        let mut flow = Flow::Chw(
            self.input_shape[0],
            self.input_shape[1],
            self.input_shape[2],
        );
        let mut widths = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            flow = match (layer, &flow) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                        ..
                    },
                    Flow::Chw(_, h, w),
                ) => {
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return Err(ModelError::InvalidSpec(format!(
                            "layer {i}: conv dimensions must be positive"
                        )));
                    }
                    let (oh, ow) = match padding {
                        Padding::Valid => {
                            if kernel > h || kernel > w {
                                return Err(ModelError::InvalidSpec(format!(
                                    "layer {i}: kernel {kernel} exceeds input {h}x{w}"
                                )));
                            }
                            ((h - kernel) / stride + 1, (w - kernel) / stride + 1)
                        }
                        Padding::Same => (h.div_ceil(*stride), w.div_ceil(*stride)),
                    };
                    Flow::Chw(*out_channels, oh, ow)
                }
                (LayerSpec::MaxPool { size, stride }, Flow::Chw(c, h, w))
                | (LayerSpec::AvgPool { size, stride }, Flow::Chw(c, h, w)) => {
                    if *size == 0 || *stride == 0 || size > h || size > w {
                        return Err(ModelError::InvalidSpec(format!(
                            "layer {i}: pool window {size} does not fit {h}x{w}"
                        )));
                    }
                    Flow::Chw(*c, (h - size) / stride + 1, (w - size) / stride + 1)
                }
                (LayerSpec::Flatten, Flow::Chw(c, h, w)) => Flow::Flat(c * h * w),
                (LayerSpec::Flatten, Flow::Flat(d)) => Flow::Flat(*d),
                (LayerSpec::Dense { units, .. }, Flow::Flat(_)) => {
                    if *units == 0 {
                        return Err(ModelError::InvalidSpec(format!(
                            "layer {i}: dense width must be positive"
                        )));
                    }
                    Flow::Flat(*units)
                }
                (LayerSpec::Dense { .. }, Flow::Chw(..)) => {
                    return Err(ModelError::InvalidSpec(format!(
                        "layer {i}: dense layer needs flattened input"
                    )));
                }
                (l, Flow::Flat(_)) => {
                    return Err(ModelError::InvalidSpec(format!(
                        "layer {i}: {l:?} needs spatial input"
                    )));
                }
            };
            widths.push(match &flow {
                Flow::Chw(c, h, w) => c * h * w,
                Flow::Flat(d) => *d,
            });
        }
        match widths.last() {
            Some(&w) if w == self.num_classes => Ok(widths),
            Some(&w) => Err(ModelError::InvalidSpec(format!(
                "final layer width {w} != num_classes {}",
                self.num_classes
            ))),
            None => Err(ModelError::InvalidSpec("empty layer list".into())),
        }
    }

    /// Activation index of the default feature representation g(x): the
    /// hidden activation feeding the final dense layer.
    pub fn default_feature_layer(&self) -> usize {
        debug_assert!(self.layers.len() >= 2);
        self.layers.len() - 2
    }

    /// Flattened width of each layer's activation.
    pub fn layer_widths(&self) -> Result<Vec<usize>, ModelError> {
        self.validate()
    }

    /// Closed-form trainable parameter count.
    pub fn parameter_count(&self) -> Result<usize, ModelError> {
        self.validate()?;
        let mut count = 0usize;
        let mut in_dim = Flow::Chw(
            self.input_shape[0],
            self.input_shape[1],
            self.input_shape[2],
        );
        for layer in &self.layers {
            match (layer, &in_dim) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        ..
                    },
                    Flow::Chw(c, ..),
                ) => {
                    count += out_channels * c * kernel * kernel + out_channels;
                }
                (LayerSpec::Dense { units, .. }, Flow::Flat(d)) => {
                    count += units * d + units;
                }
                _ => {}
            }
            in_dim = self.next_flow(layer, &in_dim);
        }
        Ok(count)
    }

    fn next_flow(&self, layer: &LayerSpec, flow: &Flow) -> Flow {
        match (layer, flow) {
            (
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                },
                Flow::Chw(_, h, w),
            ) => {
                let (oh, ow) = match padding {
                    Padding::Valid => ((h - kernel) / stride + 1, (w - kernel) / stride + 1),
                    Padding::Same => (h.div_ceil(*stride), w.div_ceil(*stride)),
                };
                Flow::Chw(*out_channels, oh, ow)
            }
            (LayerSpec::MaxPool { size, stride }, Flow::Chw(c, h, w))
            | (LayerSpec::AvgPool { size, stride }, Flow::Chw(c, h, w)) => {
                Flow::Chw(*c, (h - size) / stride + 1, (w - size) / stride + 1)
            }
            (LayerSpec::Flatten, Flow::Chw(c, h, w)) => Flow::Flat(c * h * w),
            (LayerSpec::Dense { units, .. }, _) => Flow::Flat(*units),
            (_, f) => f.clone(),
        }
    }
}

/// The architecture used for the 28x28 grayscale digit task: two 5x5 conv
/// blocks with 2x2 max pooling, a 512-wide hidden dense layer, and a 10-way
/// output.
pub fn mnist_cnn_spec() -> ModelSpec {
    ModelSpec {
        name: "mnist_cnn".into(),
        input_shape: [1, 28, 28],
        num_classes: 10,
        layers: vec![
            LayerSpec::Conv {
                out_channels: 16,
                kernel: 5,
                stride: 1,
                padding: Padding::Valid,
                activation: Activation::Relu,
            },
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::Conv {
                out_channels: 32,
                kernel: 5,
                stride: 1,
                padding: Padding::Valid,
                activation: Activation::Relu,
            },
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                units: 512,
                activation: Activation::Relu,
            },
            LayerSpec::Dense {
                units: 10,
                activation: Activation::Linear,
            },
        ],
    }
}

pub fn mlp_spec(input_dim: usize, hidden: &[usize], num_classes: usize) -> ModelSpec {
    let mut layers = vec![LayerSpec::Flatten];
    for &h in hidden {
        layers.push(LayerSpec::Dense {
            units: h,
            activation: Activation::Relu,
        });
    }
    layers.push(LayerSpec::Dense {
        units: num_classes,
        activation: Activation::Linear,
    });
    ModelSpec {
        name: format!("mlp_{input_dim}x{hidden:?}x{num_classes}"),
        input_shape: [1, 1, input_dim],
        num_classes,
        layers,
    }
}

/// Trained (or trainable) classifier: spec plus named parameter tensors.
pub struct Model {
    pub spec: ModelSpec,
    pub params: BTreeMap<String, Tensor>,
    pub trained_epochs: usize,
}

impl Model {
    /// Kaiming-uniform weights, zero biases, seeded.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Model, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut flow = Flow::Chw(spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]);
        for (i, layer) in spec.layers.iter().enumerate() {
            match (layer, &flow) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        ..
                    },
                    Flow::Chw(c, ..),
                ) => {
                    let fan_in = c * kernel * kernel;
                    let bound = (6.0 / fan_in as f32).sqrt();
                    let w: Vec<f32> = (0..out_channels * c * kernel * kernel)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect();
                    params.insert(
                        format!("layer{i}.weight"),
                        Tensor::leaf(&[*out_channels, *c, *kernel, *kernel], w, true)?,
                    );
                    params.insert(
                        format!("layer{i}.bias"),
                        Tensor::leaf(&[*out_channels], vec![0.0; *out_channels], true)?,
                    );
                }
                (LayerSpec::Dense { units, .. }, Flow::Flat(d)) => {
                    let bound = (6.0 / *d as f32).sqrt();
                    let w: Vec<f32> = (0..d * units)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect();
                    params.insert(
                        format!("layer{i}.weight"),
                        Tensor::leaf(&[*d, *units], w, true)?,
                    );
                    params.insert(
                        format!("layer{i}.bias"),
                        Tensor::leaf(&[*units], vec![0.0; *units], true)?,
                    );
                }
                _ => {}
            }
            flow = spec.next_flow(layer, &flow);
        }
        Ok(Model {
            spec,
            params,
            trained_epochs: 0,
        })
    }

    /// Independent copy with detached parameter tensors.
    pub fn deep_clone(&self) -> Model {
        let params = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.detach(true)))
            .collect();
        Model {
            spec: self.spec.clone(),
            params,
            trained_epochs: self.trained_epochs,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        let expected: Vec<usize> = self.spec.input_shape.to_vec();
        if x.shape().len() != 4 || x.shape()[1..] != expected[..] {
            return Err(ModelError::InputShape {
                got: x.shape().to_vec(),
                expected,
            });
        }
        Ok(())
    }

    /// Forward pass returning the activation after every layer; the last
    /// entry is the logits.
    pub fn forward_activations(&self, x: &Tensor) -> Result<Vec<Tensor>, ModelError> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.spec.layers.len());
        let mut cur = x.clone();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Conv {
                    stride,
                    padding,
                    activation,
                    ..
                } => {
                    let w = &self.params[&format!("layer{i}.weight")];
                    let b = &self.params[&format!("layer{i}.bias")];
                    let z = cur.conv2d(w, *stride, *padding)?.add_bias(b)?;
                    match activation {
                        Activation::Relu => z.relu(),
                        Activation::Linear => z,
                    }
                }
                LayerSpec::MaxPool { size, stride } => cur.maxpool2d(*size, *stride)?,
                LayerSpec::AvgPool { size, stride } => cur.avgpool2d(*size, *stride)?,
                LayerSpec::Flatten => cur.flatten()?,
                LayerSpec::Dense { activation, .. } => {
                    let w = &self.params[&format!("layer{i}.weight")];
                    let b = &self.params[&format!("layer{i}.bias")];
                    let z = cur.matmul(w)?.add_bias(b)?;
                    match activation {
                        Activation::Relu => z.relu(),
                        Activation::Linear => z,
                    }
                }
            };
            acts.push(cur.clone());
        }
        Ok(acts)
    }

    /// Logits for a batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.forward_activations(x)?.pop().expect("nonempty model"))
    }

    /// Flattened activation at `layer` (default: the hidden activation
    /// feeding the final dense layer).
    pub fn feature_representation(
        &self,
        x: &Tensor,
        layer: Option<usize>,
    ) -> Result<Tensor, ModelError> {
        let idx = layer.unwrap_or_else(|| self.spec.default_feature_layer());
        if idx >= self.spec.layers.len() {
            return Err(ModelError::InvalidLayer {
                index: idx,
                count: self.spec.layers.len(),
            });
        }
        let acts = self.forward_activations(x)?;
        Ok(acts[idx].flatten()?)
    }

    /// Argmax class per input, evaluated in bounded-size chunks.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>, ModelError> {
        self.check_input(x)?;
        let n = x.shape()[0];
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let end = (start + PREDICT_CHUNK).min(n);
            let chunk = slice_batch(x, start, end);
            let logits = self.forward(&chunk)?;
            out.extend(logits.argmax_rows());
        }
        Ok(out)
    }

    /// Softmax confidence rows for a batch.
    pub fn confidences(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.forward(x)?.softmax()?)
    }

    /// Fraction of the dataset classified correctly.
    pub fn accuracy(&self, data: &Dataset) -> Result<f32, ModelError> {
        if data.is_empty() {
            return Err(ModelError::InvalidDataset(
                "accuracy on an empty dataset".into(),
            ));
        }
        let preds = self.predict(&data.inputs)?;
        let hits = preds
            .iter()
            .zip(&data.labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok(hits as f32 / data.len() as f32)
    }

    /// Content hash of the parameter tensors (names + little-endian bytes).
    pub fn params_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, p) in &self.params {
            hasher.update(name.as_bytes());
            for v in p.data().iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

const PREDICT_CHUNK: usize = 250;

/// Copy rows [start, end) of a batched tensor.
pub fn slice_batch(x: &Tensor, start: usize, end: usize) -> Tensor {
    let row: usize = x.shape()[1..].iter().product();
    let data = x.data()[start * row..end * row].to_vec();
    let mut shape = vec![end - start];
    shape.extend_from_slice(&x.shape()[1..]);
    Tensor::new(&shape, data).unwrap()
}

/// Labeled image set with pixels in [0,1], NCHW.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self, ModelError> {
        if inputs.shape().len() != 4 {
            return Err(ModelError::InvalidDataset(format!(
                "inputs must be NCHW, got {:?}",
                inputs.shape()
            )));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(ModelError::InvalidDataset(format!(
                "{} inputs vs {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(ModelError::InvalidDataset(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if inputs.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(ModelError::InvalidDataset(
                "pixel values outside [0,1]".into(),
            ));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [
            self.inputs.shape()[1],
            self.inputs.shape()[2],
            self.inputs.shape()[3],
        ]
    }

    /// New dataset from the given row indices.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let row: usize = self.inputs.shape()[1..].iter().product();
        let src = self.inputs.data();
        let mut data = Vec::with_capacity(idx.len() * row);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        drop(src);
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.inputs.shape()[1..]);
        Dataset {
            inputs: Tensor::new(&shape, data).unwrap(),
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Split into [0, n) and [n, len).
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let head: Vec<usize> = (0..n.min(self.len())).collect();
        let tail: Vec<usize> = (n.min(self.len())..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// All samples whose label differs from `label`.
    pub fn filter_label_ne(&self, label: usize) -> Dataset {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.labels[i] != label)
            .collect();
        self.subset(&idx)
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset, ModelError> {
        if self.inputs.shape()[1..] != other.inputs.shape()[1..]
            || self.num_classes != other.num_classes
        {
            return Err(ModelError::InvalidDataset(
                "concat of incompatible datasets".into(),
            ));
        }
        let mut data = self.inputs.to_vec();
        data.extend_from_slice(&other.inputs.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut shape = vec![self.len() + other.len()];
        shape.extend_from_slice(&self.inputs.shape()[1..]);
        Ok(Dataset {
            inputs: Tensor::new(&shape, data).unwrap(),
            labels,
            num_classes: self.num_classes,
        })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// epochs=5, batch=32, Adam at lr 0.001.
    pub fn standard(seed: u64) -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(0.001),
            seed,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f32,
    pub accuracy: f32,
}

/// Minimize cross entropy over the dataset. Deterministic for a fixed seed:
/// per-epoch shuffling and all updates flow from `config.seed`.
pub fn train(model: &mut Model, data: &Dataset, config: &TrainConfig) -> Result<TrainLog, ModelError> {
    if data.is_empty() {
        return Err(ModelError::InvalidDataset("training on empty dataset".into()));
    }
    if config.batch_size > data.len() {
        return Err(ModelError::BatchTooLarge {
            batch: config.batch_size,
            len: data.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Optimizer::new(config.optimizer);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..config.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0f64;
        let mut hits = 0usize;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = data.subset(chunk);
            let x = batch.inputs.detach(false);
            let logits = model.forward(&x)?;
            let loss = logits.cross_entropy_with_logits(&batch.labels)?.mean_all();
            loss.backward()?;
            optimizer.step(self_params(model))?;
            epoch_loss += loss.item() as f64 * chunk.len() as f64;
            for (p, l) in logits.argmax_rows().iter().zip(&batch.labels) {
                if p == l {
                    hits += 1;
                }
            }
            seen += chunk.len();
        }
        model.trained_epochs += 1;
        log.epochs.push(EpochStats {
            loss: (epoch_loss / seen as f64) as f32,
            accuracy: hits as f32 / seen as f32,
        });
    }
    Ok(log)
}

fn self_params(model: &Model) -> impl Iterator<Item = (&str, &Tensor)> {
    model.params.iter().map(|(k, v)| (k.as_str(), v))
}

/// Fisher-Yates with our own rng trait bounds kept narrow.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}
