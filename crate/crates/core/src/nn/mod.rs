//! Feature extractor `g`, projection head, and linear classifier `h`.
//!
//! A [`Model`] owns every parameter as a flat list of tensors. To run it on a
//! [`Graph`], bind the parameters with [`Model::bind`] (choosing which groups
//! receive gradients) and call [`Model::forward`].

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Padding, Tensor, TensorError, Var};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("input shape {got:?} does not match model input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("capture layer {layer} outside 1..={depth}")]
    CaptureOutOfRange { layer: usize, depth: usize },
    #[error("feature width {got} does not match feature_dim {expected}")]
    FeatureWidth { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint: unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint: file truncated")]
    Truncated,
    #[error("checkpoint: parameter layout mismatch: {0}")]
    CheckpointShape(String),
    #[error("checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(std::io::Error),
}

impl From<std::io::Error> for NnError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            NnError::Truncated
        } else {
            NnError::Io(e)
        }
    }
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

/// One extractor stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        padding: Padding,
    },
    Fc {
        out: usize,
    },
    Relu,
    MaxPool2,
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSpec {
    /// Hidden width; `None` uses the feature width.
    #[serde(default)]
    pub hidden: Option<usize>,
    pub out: usize,
}

impl Default for ProjectionSpec {
    fn default() -> Self {
        Self { hidden: None, out: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Per-sample input shape: `[c, h, w]` for images, `[d]` for vectors.
    pub input: Vec<usize>,
    pub extractor: Vec<LayerSpec>,
    #[serde(default)]
    pub projection: ProjectionSpec,
    pub num_classes: usize,
}

/// Parameter ownership of the three sub-networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Extractor,
    Projection,
    Classifier,
}

/// Which parameter groups receive gradients when bound to a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub extractor: bool,
    pub projection: bool,
    pub classifier: bool,
}

impl Trainable {
    pub const NONE: Self = Self {
        extractor: false,
        projection: false,
        classifier: false,
    };
    pub const ALL: Self = Self {
        extractor: true,
        projection: true,
        classifier: true,
    };
    /// `g` and `h` only; the projection head is idle outside pre-training.
    pub const NETWORK: Self = Self {
        extractor: true,
        projection: false,
        classifier: true,
    };
    /// `g` and the projection head (contrastive pre-training).
    pub const ENCODER: Self = Self {
        extractor: true,
        projection: true,
        classifier: false,
    };
    pub const CLASSIFIER: Self = Self {
        extractor: false,
        projection: false,
        classifier: true,
    };

    pub fn contains(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Extractor => self.extractor,
            ParamGroup::Projection => self.projection,
            ParamGroup::Classifier => self.classifier,
        }
    }
}

impl ModelSpec {
    /// conv3x3(16) → ReLU → pool → conv3x3(32) → ReLU → pool → flatten → fc(64) → ReLU.
    pub fn image_cnn(input: [usize; 3], num_classes: usize) -> Self {
        Self::image_cnn_with(input, num_classes, [16, 32], 64)
    }

    /// [`ModelSpec::image_cnn`] with chosen conv widths and fc width.
    pub fn image_cnn_with(input: [usize; 3], num_classes: usize, channels: [usize; 2], fc: usize) -> Self {
        let conv = |out_channels| LayerSpec::Conv {
            out_channels,
            kernel: 3,
            padding: Padding::Same,
        };
        Self {
            input: input.to_vec(),
            extractor: vec![
                conv(channels[0]),
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                conv(channels[1]),
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::Flatten,
                LayerSpec::Fc { out: fc },
                LayerSpec::Relu,
            ],
            projection: ProjectionSpec::default(),
            num_classes,
        }
    }

    /// fc(64) → ReLU → fc(32) → ReLU.
    pub fn mlp(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input: vec![input_dim],
            extractor: vec![
                LayerSpec::Fc { out: 64 },
                LayerSpec::Relu,
                LayerSpec::Fc { out: 32 },
                LayerSpec::Relu,
            ],
            projection: ProjectionSpec::default(),
            num_classes,
        }
    }

    pub fn depth(&self) -> usize {
        self.extractor.len()
    }

    /// Per-sample output shape of every extractor layer.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input.is_empty() || self.input.iter().any(|&d| d == 0) {
            return Err(NnError::Spec(format!("input shape {:?} has an empty extent", self.input)));
        }
        let mut cur = self.input.clone();
        let mut out = Vec::with_capacity(self.extractor.len());
        for (i, layer) in self.extractor.iter().enumerate() {
            let bad = |msg: String| NnError::Spec(format!("layer {}: {msg}", i + 1));
            cur = match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    padding,
                } => {
                    let &[_, h, w] = cur.as_slice() else {
                        return Err(bad(format!("conv needs a [c, h, w] input, got {cur:?}")));
                    };
                    if *out_channels == 0 || *kernel == 0 {
                        return Err(bad("conv with zero channels or kernel".into()));
                    }
                    match padding {
                        Padding::Same if kernel % 2 == 1 => vec![*out_channels, h, w],
                        Padding::Same => return Err(bad("same padding needs an odd kernel".into())),
                        Padding::Valid if h >= *kernel && w >= *kernel => {
                            vec![*out_channels, h + 1 - kernel, w + 1 - kernel]
                        }
                        Padding::Valid => return Err(bad(format!("kernel {kernel} larger than {h}x{w}"))),
                    }
                }
                LayerSpec::Fc { out } => {
                    if cur.len() != 1 {
                        return Err(bad(format!("fc needs a flat input, got {cur:?}")));
                    }
                    if *out == 0 {
                        return Err(bad("fc with zero outputs".into()));
                    }
                    vec![*out]
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool2 => {
                    let &[c, h, w] = cur.as_slice() else {
                        return Err(bad(format!("max_pool2 needs [c, h, w], got {cur:?}")));
                    };
                    if h < 2 || w < 2 {
                        return Err(bad(format!("cannot pool {h}x{w}")));
                    }
                    vec![c, h / 2, w / 2]
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Penultimate width `D`.
    pub fn feature_dim(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        let last = shapes.last().cloned().unwrap_or_else(|| self.input.clone());
        if last.len() != 1 {
            return Err(NnError::Spec(format!("extractor output {last:?} is not flat")));
        }
        Ok(last[0])
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_dim()?;
        if self.num_classes == 0 {
            return Err(NnError::Spec("num_classes must be positive".into()));
        }
        if self.projection.out == 0 || self.projection.hidden == Some(0) {
            return Err(NnError::Spec("projection widths must be positive".into()));
        }
        Ok(())
    }

    /// Shapes and owning groups of every parameter tensor, in storage order.
    pub fn param_layout(&self) -> Result<Vec<(ParamGroup, Vec<usize>)>> {
        self.validate()?;
        let shapes = self.layer_shapes()?;
        let mut layout = Vec::new();
        let mut prev = self.input.clone();
        for (layer, shape) in self.extractor.iter().zip(&shapes) {
            match layer {
                LayerSpec::Conv {
                    out_channels, kernel, ..
                } => {
                    layout.push((ParamGroup::Extractor, vec![*out_channels, prev[0], *kernel, *kernel]));
                    layout.push((ParamGroup::Extractor, vec![*out_channels]));
                }
                LayerSpec::Fc { out } => {
                    layout.push((ParamGroup::Extractor, vec![prev[0], *out]));
                    layout.push((ParamGroup::Extractor, vec![*out]));
                }
                _ => {}
            }
            prev = shape.clone();
        }
        let d = self.feature_dim()?;
        let hidden = self.projection.hidden.unwrap_or(d);
        layout.push((ParamGroup::Projection, vec![d, hidden]));
        layout.push((ParamGroup::Projection, vec![hidden]));
        layout.push((ParamGroup::Projection, vec![hidden, self.projection.out]));
        layout.push((ParamGroup::Projection, vec![self.projection.out]));
        layout.push((ParamGroup::Classifier, vec![d, self.num_classes]));
        layout.push((ParamGroup::Classifier, vec![self.num_classes]));
        Ok(layout)
    }
}

/// Which activations [`Model::forward`] records.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Capture {
    /// 1-based extractor layer indices.
    pub layers: Vec<usize>,
    pub logits: bool,
}

impl Capture {
    pub fn logits() -> Self {
        Self {
            layers: Vec::new(),
            logits: true,
        }
    }

    pub fn features() -> Self {
        Self::default()
    }

    pub fn all(depth: usize) -> Self {
        Self {
            layers: (1..=depth).collect(),
            logits: true,
        }
    }
}

/// Activations recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct LayerActivations {
    /// `(layer index, activation)` for each captured extractor layer.
    pub layers: Vec<(usize, Var)>,
    /// `g(x)`, the last extractor output.
    pub penultimate: Var,
    /// `f(x) = h(g(x))` when requested.
    pub logits: Option<Var>,
}

/// Model parameters bound to a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// A named activation of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRef {
    /// 1-based extractor layer.
    Layer(usize),
    Penultimate,
    Logits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    spec: ModelSpec,
    params: Vec<Tensor<S>>,
    groups: Vec<ParamGroup>,
    seed: u64,
}

const EVAL_CHUNK: usize = 256;

impl<S: Scalar> Model<S> {
    /// Fan-in scaled uniform initialisation (`U(-b, b)`, `b = sqrt(6 / fan_in)`),
    /// zero biases.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let layout = spec.param_layout()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layout.len());
        let mut groups = Vec::with_capacity(layout.len());
        for (group, shape) in layout {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 1 {
                vec![S::zero(); n]
            } else {
                let fan_in: usize = match shape.len() {
                    2 => shape[0],
                    _ => shape[1..].iter().product(),
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| S::lit(rng.gen_range(-bound..bound))).collect()
            };
            params.push(Tensor::new(shape, data)?);
            groups.push(group);
        }
        Ok(Self {
            spec,
            params,
            groups,
            seed,
        })
    }

    pub(crate) fn from_parts(spec: ModelSpec, params: Vec<Tensor<S>>, seed: u64) -> Result<Self> {
        let layout = spec.param_layout()?;
        if layout.len() != params.len() {
            return Err(NnError::CheckpointShape(format!(
                "expected {} tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (i, ((_, shape), p)) in layout.iter().zip(&params).enumerate() {
            if shape.as_slice() != p.shape() {
                return Err(NnError::CheckpointShape(format!(
                    "tensor {i}: expected {shape:?}, found {:?}",
                    p.shape()
                )));
            }
        }
        let groups = layout.into_iter().map(|(g, _)| g).collect();
        Ok(Self {
            spec,
            params,
            groups,
            seed,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    /// Parameters of one group, in storage order.
    pub fn group_params(&self, group: ParamGroup) -> Vec<&Tensor<S>> {
        self.params
            .iter()
            .zip(&self.groups)
            .filter(|(_, g)| **g == group)
            .map(|(p, _)| p)
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim().expect("validated at construction")
    }

    pub fn depth(&self) -> usize {
        self.spec.depth()
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            spec: self.spec.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            groups: self.groups.clone(),
            seed: self.seed,
        }
    }

    /// Records every parameter on `g`; groups in `trainable` become gradient leaves.
    pub fn bind(&self, g: &mut Graph<S>, trainable: Trainable) -> Bound {
        let vars = self
            .params
            .iter()
            .zip(&self.groups)
            .map(|(p, grp)| g.leaf(p.clone(), trainable.contains(*grp)))
            .collect();
        Bound { vars }
    }

    fn check_input(&self, t: &Tensor<S>) -> Result<()> {
        if t.shape()[1..] != self.spec.input[..] {
            let mut expected = vec![t.rows()];
            expected.extend(&self.spec.input);
            return Err(NnError::InputShape {
                expected,
                got: t.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Runs `g` (and `h` when `capture.logits`) on a batch `[n, ...input]`.
    pub fn forward(&self, g: &mut Graph<S>, p: &Bound, x: Var, capture: &Capture) -> Result<LayerActivations> {
        self.check_input(g.value(x))?;
        let depth = self.depth();
        if let Some(&bad) = capture.layers.iter().find(|&&l| l == 0 || l > depth) {
            return Err(NnError::CaptureOutOfRange { layer: bad, depth });
        }
        let mut cur = x;
        let mut pi = 0;
        let mut layers = Vec::new();
        for (i, layer) in self.spec.extractor.iter().enumerate() {
            cur = match layer {
                LayerSpec::Conv { padding, .. } => {
                    let out = g.conv2d(cur, p.vars[pi], p.vars[pi + 1], *padding)?;
                    pi += 2;
                    out
                }
                LayerSpec::Fc { .. } => {
                    let out = self.affine(g, cur, p.vars[pi], p.vars[pi + 1])?;
                    pi += 2;
                    out
                }
                LayerSpec::Relu => g.relu(cur)?,
                LayerSpec::MaxPool2 => g.max_pool2(cur)?,
                LayerSpec::Flatten => g.flatten(cur)?,
            };
            if capture.layers.contains(&(i + 1)) {
                layers.push((i + 1, cur));
            }
        }
        let penultimate = cur;
        let logits = if capture.logits {
            Some(self.classify(g, p, penultimate)?)
        } else {
            None
        };
        Ok(LayerActivations {
            layers,
            penultimate,
            logits,
        })
    }

    fn affine(&self, g: &mut Graph<S>, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = g.matmul(x, w)?;
        Ok(g.add_row_bias(xw, b)?)
    }

    fn head_vars(&self, p: &Bound, group: ParamGroup) -> Vec<Var> {
        p.vars
            .iter()
            .zip(&self.groups)
            .filter(|(_, g)| **g == group)
            .map(|(v, _)| *v)
            .collect()
    }

    fn check_features(&self, g: &Graph<S>, features: Var) -> Result<()> {
        let t = g.value(features);
        let d = self.feature_dim();
        if t.shape().len() != 2 || t.shape()[1] != d {
            return Err(NnError::FeatureWidth {
                expected: d,
                got: t.row_len(),
            });
        }
        Ok(())
    }

    /// Linear classifier `h` on penultimate features.
    pub fn classify(&self, g: &mut Graph<S>, p: &Bound, features: Var) -> Result<Var> {
        self.check_features(g, features)?;
        let h = self.head_vars(p, ParamGroup::Classifier);
        self.affine(g, features, h[0], h[1])
    }

    /// Projection head: two affine maps with a ReLU between, then row-wise
    /// L2 normalisation.
    pub fn project(&self, g: &mut Graph<S>, p: &Bound, features: Var) -> Result<Var> {
        self.check_features(g, features)?;
        let ph = self.head_vars(p, ParamGroup::Projection);
        let hidden = self.affine(g, features, ph[0], ph[1])?;
        let hidden = g.relu(hidden)?;
        let z = self.affine(g, hidden, ph[2], ph[3])?;
        Ok(g.l2_normalize(z)?)
    }

    /// Activation `layer` for a batch, evaluated without gradients.
    pub fn activations(&self, x: &Tensor<S>, layer: LayerRef) -> Result<Tensor<S>> {
        self.check_input(x)?;
        let mut parts = Vec::new();
        let idx: Vec<usize> = (0..x.rows()).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let batch = x.select_rows(chunk)?;
            let mut g = Graph::new();
            let p = self.bind(&mut g, Trainable::NONE);
            let xv = g.constant(batch);
            let capture = match layer {
                LayerRef::Layer(l) => Capture {
                    layers: vec![l],
                    logits: false,
                },
                LayerRef::Penultimate => Capture::features(),
                LayerRef::Logits => Capture::logits(),
            };
            let acts = self.forward(&mut g, &p, xv, &capture)?;
            let v = match layer {
                LayerRef::Layer(_) => acts.layers[0].1,
                LayerRef::Penultimate => acts.penultimate,
                LayerRef::Logits => acts.logits.expect("requested"),
            };
            parts.push(g.value(v).clone());
        }
        let refs: Vec<&Tensor<S>> = parts.iter().collect();
        Ok(Tensor::concat_rows(&refs)?)
    }

    pub fn logits(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.activations(x, LayerRef::Logits)
    }

    /// Normalised projection-head embeddings.
    pub fn embeddings(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let feats = self.activations(x, LayerRef::Penultimate)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, Trainable::NONE);
        let f = g.constant(feats);
        let z = self.project(&mut g, &p, f)?;
        Ok(g.value(z).clone())
    }

    /// `argmax_i f(x)_i`, lowest index on ties.
    pub fn predict(&self, x: &Tensor<S>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }
}

/// Row-wise argmax with lowest-index tie-break.
pub fn argmax_rows<S: Scalar>(t: &Tensor<S>) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model(d: usize) -> Model<f64> {
        let spec = ModelSpec {
            input: vec![d],
            extractor: vec![LayerSpec::Fc { out: d }],
            projection: ProjectionSpec {
                hidden: Some(d),
                out: d,
            },
            num_classes: d,
        };
        let mut m = Model::<f64>::new(spec, 0).unwrap();
        for p in m.params_mut() {
            let shape = p.shape().to_vec();
            let data = if shape.len() == 2 {
                (0..shape[0] * shape[1]).map(|i| if i / shape[1] == i % shape[1] { 1.0 } else { 0.0 }).collect()
            } else {
                vec![0.0; shape[0]]
            };
            *p = Tensor::new(shape, data).unwrap();
        }
        m
    }

    #[test]
    fn default_cnn_chains_to_64_features() {
        let spec = ModelSpec::image_cnn([1, 28, 28], 10);
        assert_eq!(spec.feature_dim().unwrap(), 64);
        let shapes = spec.layer_shapes().unwrap();
        assert_eq!(shapes[2], vec![16, 14, 14]);
        assert_eq!(shapes[6], vec![32 * 7 * 7]);
        assert_eq!(ModelSpec::mlp(2, 2).feature_dim().unwrap(), 32);
    }

    #[test]
    fn unflattened_fc_is_rejected() {
        let mut spec = ModelSpec::image_cnn([1, 8, 8], 2);
        spec.extractor.remove(6);
        assert!(matches!(spec.validate(), Err(NnError::Spec(_))));
    }

    #[test]
    fn zero_classifier_predicts_class_zero() {
        let mut m = Model::<f32>::new(ModelSpec::mlp(3, 4), 1).unwrap();
        for (p, grp) in m.params.iter_mut().zip(&m.groups) {
            if *grp == ParamGroup::Classifier {
                p.data_mut().fill(0.0);
            }
        }
        let x = Tensor::from_f64(vec![2, 3], &[0.1, 0.5, -2.0, 3.0, 1.0, 0.0]).unwrap();
        let logits = m.logits(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(m.predict(&x).unwrap(), vec![0, 0]);
    }

    #[test]
    fn identity_network_predicts_larger_coordinate() {
        let m = identity_model(2);
        let x = Tensor::from_f64(vec![1, 2], &[0.2, 0.9]).unwrap();
        assert_eq!(m.predict(&x).unwrap(), vec![1]);
    }

    #[test]
    fn capture_outside_depth_errors() {
        let spec = ModelSpec {
            input: vec![2],
            extractor: vec![LayerSpec::Fc { out: 2 }, LayerSpec::Relu],
            projection: ProjectionSpec::default(),
            num_classes: 2,
        };
        let m = Model::<f64>::new(spec, 0).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g, Trainable::NONE);
        let x = g.constant(Tensor::from_f64(vec![1, 2], &[0.0, 1.0]).unwrap());
        let cap = Capture {
            layers: vec![3],
            logits: false,
        };
        assert!(matches!(
            m.forward(&mut g, &p, x, &cap),
            Err(NnError::CaptureOutOfRange { layer: 3, depth: 2 })
        ));
    }

    #[test]
    fn identity_projection_normalises_three_four() {
        let m = identity_model(2);
        let x = Tensor::from_f64(vec![1, 2], &[3.0, 4.0]).unwrap();
        let z = m.embeddings(&x).unwrap();
        assert!((z.data()[0] - 0.6).abs() < 1e-15);
        assert!((z.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn embeddings_are_unit_rows() {
        let m = Model::<f32>::new(ModelSpec::mlp(5, 3), 7).unwrap();
        let x = Tensor::from_f64(vec![3, 5], &(0..15).map(|i| (i as f64).sin()).collect::<Vec<_>>()).unwrap();
        let z = m.embeddings(&x).unwrap();
        for r in 0..3 {
            let n: f32 = z.row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn wrong_input_shape_errors() {
        let m = Model::<f32>::new(ModelSpec::mlp(5, 3), 7).unwrap();
        let x = Tensor::zeros(vec![2, 4]).unwrap();
        assert!(matches!(m.logits(&x), Err(NnError::InputShape { .. })));
    }
}
