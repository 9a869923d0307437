//! SGD with momentum and L2 weight decay.
//!
//! Update per parameter: `v ← μ·v + g + λ·w`, `w ← w − lr·v`.

use crate::error::{Error, Result};
use crate::model::{FeatureExtractor, Model};
use crate::tensor::Tensor;

/// Learning rates of the three parameter groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub backbone: f64,
    pub bottleneck: f64,
    pub classifier: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    lrs: Vec<f64>,
    velocity: Vec<Tensor>,
    momentum: f64,
    weight_decay: f64,
}

/// Per-tensor learning rates for an extractor: every layer but the last is
/// backbone, the last is the bottleneck.
fn extractor_rates(g: &FeatureExtractor, rates: GroupRates) -> Vec<f64> {
    let last = g.layers.len() - 1;
    (0..g.layers.len())
        .flat_map(|i| {
            let lr = if i == last { rates.bottleneck } else { rates.backbone };
            [lr, lr]
        })
        .collect()
}

impl OptimState {
    pub fn new(shapes: &[(usize, usize)], lrs: Vec<f64>, momentum: f64, weight_decay: f64) -> Result<Self> {
        if lrs.len() != shapes.len() {
            return Err(Error::Contract(format!(
                "{} learning rates for {} parameters",
                lrs.len(),
                shapes.len()
            )));
        }
        Ok(Self {
            lrs,
            velocity: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            momentum,
            weight_decay,
        })
    }

    /// State over the extractor parameters followed by the classifier weight.
    pub fn for_model(model: &Model, rates: GroupRates, momentum: f64, weight_decay: f64) -> Result<Self> {
        let mut shapes: Vec<_> = model.extractor.params().map(Tensor::shape).collect();
        shapes.push(model.classifier.weight.shape());
        let mut lrs = extractor_rates(&model.extractor, rates);
        lrs.push(rates.classifier);
        Self::new(&shapes, lrs, momentum, weight_decay)
    }

    /// State over the extractor parameters only.
    pub fn for_extractor(g: &FeatureExtractor, rates: GroupRates, momentum: f64, weight_decay: f64) -> Result<Self> {
        let shapes: Vec<_> = g.params().map(Tensor::shape).collect();
        Self::new(&shapes, extractor_rates(g, rates), momentum, weight_decay)
    }

    pub fn len(&self) -> usize {
        self.velocity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocity.is_empty()
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor]) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} buffers, got {} parameters and {} gradients",
                self.velocity.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (w, g)) in params.into_iter().zip(grads).enumerate() {
            let v = &mut self.velocity[i];
            if w.shape() != v.shape() || g.shape() != v.shape() {
                return Err(Error::Dimension {
                    op: "sgd_step",
                    left: w.shape(),
                    right: g.shape(),
                });
            }
            let lr = self.lrs[i];
            for ((vi, wi), gi) in v.data_mut().iter_mut().zip(w.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                if lr != 0.0 {
                    *wi -= lr * *vi;
                }
            }
        }
        Ok(())
    }
}
