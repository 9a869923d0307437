//! Feature extractor `g` and normalized classifier `f`.
//!
//! The extractor is an MLP with relu between layers and a linear bottleneck.
//! The classifier is a bias-free linear head over l2-normalized features,
//! divided by a temperature. After source pretraining its rows have unit norm
//! and serve as class anchors; during adaptation it is frozen.

use std::fmt;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const DEFAULT_TEMPERATURE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Tensor,
    /// `1 × out`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    /// `classes × bottleneck`
    pub weight: Tensor,
    pub temperature: f64,
    frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub extractor: FeatureExtractor,
    pub classifier: Classifier,
}

/// SHA-256 over the shapes and little-endian bytes of a parameter set.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ParamDigest([u8; 32]);

impl ParamDigest {
    pub fn of<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let mut h = Sha256::new();
        for t in tensors {
            h.update(t.to_le_bytes());
        }
        Self(h.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for ParamDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Class anchors: read-only copy of the classifier rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    rows: Tensor,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn anchor(&self, class: usize) -> &[f64] {
        self.rows.row(class)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.rows
    }
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(fan_in, fan_out, data).expect("sized")
}

/// Glorot-uniform weights and zero biases for an extractor with layer sizes
/// `dims` (input first, bottleneck last) and a `classes × bottleneck` head.
pub fn init_params(seed: u64, dims: &[usize], classes: usize) -> Result<Model> {
    if dims.len() < 2 {
        return Err(Error::config("dims", "need at least input and bottleneck sizes"));
    }
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(Error::config("dims", format!("dimension {i} is zero")));
    }
    if classes == 0 {
        return Err(Error::config("classes", "must be at least 1"));
    }
    let mut rng = seed::rng(seed, &[seed::stream::INIT]);
    let layers = dims
        .windows(2)
        .map(|w| Linear {
            weight: glorot(&mut rng, w[0], w[1]),
            bias: Tensor::zeros(1, w[1]),
        })
        .collect();
    let bottleneck = *dims.last().expect("non-empty");
    let weight = glorot(&mut rng, bottleneck, classes).transpose();
    Ok(Model {
        extractor: FeatureExtractor { layers },
        classifier: Classifier::new(weight, DEFAULT_TEMPERATURE),
    })
}

impl FeatureExtractor {
    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.cols()
    }

    /// Layer sizes, input first.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(|l| l.weight.cols()))
            .collect()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn digest(&self) -> ParamDigest {
        ParamDigest::of(self.params())
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundExtractor<'t> {
        BoundExtractor {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.leaf(l.weight.clone(), trainable),
                        tape.leaf(l.bias.clone(), trainable),
                    )
                })
                .collect(),
        }
    }

    /// Forward pass outside any optimisation (no gradient tracking).
    pub fn extract_features(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let z = bound.forward(tape.constant(x.clone()))?;
        Ok((*z.value()).clone())
    }
}

/// Extractor parameters recorded on a tape.
pub struct BoundExtractor<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> BoundExtractor<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let in_dim = self.layers[0].0.shape().0;
        if x.shape().1 != in_dim {
            return Err(Error::Dimension {
                op: "extract_features",
                left: x.shape(),
                right: (x.shape().0, in_dim),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(*w)?.add_row(*b)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Parameter variables in the same order as [`FeatureExtractor::params`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn grads(&self) -> Vec<Tensor> {
        self.vars().iter().map(|v| v.grad()).collect()
    }
}

impl Classifier {
    pub fn new(weight: Tensor, temperature: f64) -> Self {
        Self {
            weight,
            temperature,
            frozen: false,
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn digest(&self) -> ParamDigest {
        ParamDigest::of([&self.weight])
    }

    /// Marks the head as frozen and returns its digest for later comparison.
    pub fn freeze(&mut self) -> ParamDigest {
        self.frozen = true;
        self.digest()
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Rescales each weight row to unit l2 norm.
    pub fn normalize_rows(&mut self) {
        for r in 0..self.weight.rows() {
            let row = self.weight.row_mut(r);
            let norm = crate::tensor::l2_norm(row);
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
    }

    pub fn anchors(&self) -> AnchorSet {
        AnchorSet {
            rows: self.weight.clone(),
        }
    }

    /// Records the weight on the tape; a frozen head never requires a gradient.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundClassifier<'t> {
        BoundClassifier {
            weight: tape.leaf(self.weight.clone(), trainable && !self.frozen),
            temperature: self.temperature,
        }
    }

    pub fn classify(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let logits = bound.forward(tape.constant(z.clone()))?;
        Ok((*logits.value()).clone())
    }
}

pub struct BoundClassifier<'t> {
    pub weight: Var<'t>,
    temperature: f64,
}

impl<'t> BoundClassifier<'t> {
    /// `normalize(z) · Cᵀ / T`.
    pub fn forward(&self, z: Var<'t>) -> Result<Var<'t>> {
        let d = self.weight.shape().1;
        if z.shape().1 != d {
            return Err(Error::Dimension {
                op: "classify",
                left: z.shape(),
                right: (z.shape().0, d),
            });
        }
        Ok(z
            .l2_normalize_rows()
            .matmul(self.weight.t())?
            .scale(1.0 / self.temperature))
    }
}

impl Model {
    pub fn digest(&self) -> ParamDigest {
        ParamDigest::of(self.extractor.params().chain([&self.classifier.weight]))
    }

    /// Row-wise class probabilities.
    pub fn predict_probs(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let g = self.extractor.bind(&tape, false);
        let f = self.classifier.bind(&tape, false);
        let p = f.forward(g.forward(tape.constant(x.clone()))?)?.softmax_rows()?;
        Ok((*p.value()).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict_probs(x)?.argmax_rows())
    }
}

/// Convenience for recording the full `softmax(f(g(x)))` pipeline.
pub fn forward_probs<'t>(
    g: &BoundExtractor<'t>,
    f: &BoundClassifier<'t>,
    x: Var<'t>,
) -> Result<Var<'t>> {
    f.forward(g.forward(x)?)?.softmax_rows()
}
