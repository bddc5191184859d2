//! Layer-list models with a softmax cross-entropy head.

use serde::{Deserialize, Serialize};

use ctxnorm::{Error, Fill, Result, Rng, Tensor};

use crate::layers::{conv3x3_backward, conv3x3_forward, dense_backward, dense_forward};
use crate::norm_layer::{Mode, NormCache, NormKind, NormLayer, NormSpec};

const LEAKY_SLOPE: f64 = 0.01;
const HEAD_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { out: usize },
    Conv3x3 { out: usize },
    Relu,
    LeakyRelu,
    Norm(NormSpec),
    Flatten,
    /// Final dense layer producing class logits.
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    /// A flat feature vector.
    pub fn flat(dim: usize) -> Self {
        Self { channels: dim, height: 1, width: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputShape,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// `dense(h)-norm-relu` per hidden width, then the classifier.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize, norm: NormSpec) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.extend([LayerSpec::Dense { out: h }, LayerSpec::Norm(norm.clone()), LayerSpec::Relu]);
        }
        layers.push(LayerSpec::Classifier);
        Self { input: InputShape::flat(input_dim), classes, layers }
    }

    /// `conv3x3(16)-norm-relu` twice, flatten, `dense(64)-norm-relu`,
    /// classifier.
    pub fn small_cnn(input: InputShape, classes: usize, norm: NormSpec) -> Self {
        let block = |layer| [layer, LayerSpec::Norm(norm.clone()), LayerSpec::Relu];
        let mut layers = Vec::new();
        layers.extend(block(LayerSpec::Conv3x3 { out: 16 }));
        layers.extend(block(LayerSpec::Conv3x3 { out: 16 }));
        layers.push(LayerSpec::Flatten);
        layers.extend(block(LayerSpec::Dense { out: 64 }));
        layers.push(LayerSpec::Classifier);
        Self { input, classes, layers }
    }

    /// Replaces the spec of every norm layer.
    pub fn with_norm(mut self, norm: &NormSpec) -> Self {
        for layer in &mut self.layers {
            if let LayerSpec::Norm(spec) = layer {
                *spec = norm.clone();
            }
        }
        self
    }

    pub fn needs_contexts(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Norm(s) if s.kind.needs_contexts()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense { w: Tensor, b: Tensor },
    Conv3x3 { w: Tensor, b: Tensor, height: usize, width: usize },
    Relu,
    LeakyRelu,
    Norm(NormLayer),
    Flatten,
    Classifier { w: Tensor, b: Tensor },
}

#[derive(Debug, Clone)]
enum LayerCache {
    Input(Tensor),
    Norm(NormCache),
    Shape(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    caches: Vec<LayerCache>,
    /// Softmax probabilities `[N, classes]`.
    pub probs: Tensor,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor> {
    Tensor::create(shape, Fill::Normal { mean: 0.0, std: (2.0 / fan_in as f64).sqrt() }, Some(rng))
}

/// Builds the model. Layer `i` draws its initial values from stream `i` of
/// `seed`, so two specs that differ only in their norm layers share every
/// other weight.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    if spec.classes < 2 {
        return Err(Error::Config("a classifier needs at least 2 classes".into()));
    }
    let heads = spec.layers.iter().filter(|l| matches!(l, LayerSpec::Classifier)).count();
    if heads != 1 || spec.layers.last() != Some(&LayerSpec::Classifier) {
        return Err(Error::Config("the model needs exactly one classifier, as its last layer".into()));
    }
    let InputShape { channels, height, width } = spec.input;
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::Config(format!("bad input shape {:?}", spec.input)));
    }
    // Current activation: channels, spatial extent, and whether it is still
    // an image.
    let (mut c, mut l, mut spatial) = (channels, height * width, true);
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, ls) in spec.layers.iter().enumerate() {
        let mut rng = Rng::with_stream(seed, i as u64 + 1);
        let layer = match ls {
            LayerSpec::Dense { out } | LayerSpec::Conv3x3 { out } if *out == 0 => {
                return Err(Error::Config(format!("layer {i} has zero outputs")));
            }
            LayerSpec::Dense { out } => {
                let inputs = c * l;
                (c, l, spatial) = (*out, 1, false);
                Layer::Dense { w: he_normal(&[*out, inputs], inputs, &mut rng)?, b: Tensor::zeros(&[*out]) }
            }
            LayerSpec::Conv3x3 { out } => {
                if !spatial {
                    return Err(Error::Config(format!("conv3x3 at layer {i} follows a flattened activation")));
                }
                let taps = c * 9;
                c = *out;
                Layer::Conv3x3 { w: he_normal(&[*out, taps], taps, &mut rng)?, b: Tensor::zeros(&[*out]), height, width }
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::LeakyRelu => Layer::LeakyRelu,
            LayerSpec::Norm(ns) => Layer::Norm(NormLayer::build(ns, c, &mut rng)?),
            LayerSpec::Flatten => {
                (c, l, spatial) = (c * l, 1, false);
                Layer::Flatten
            }
            LayerSpec::Classifier => {
                let inputs = c * l;
                // A small head keeps untrained predictions near uniform.
                let std = HEAD_SCALE / (inputs as f64).sqrt();
                Layer::Classifier {
                    w: Tensor::create(&[spec.classes, inputs], Fill::Normal { mean: 0.0, std }, Some(&mut rng))?,
                    b: Tensor::zeros(&[spec.classes]),
                }
            }
        };
        layers.push(layer);
    }
    Ok(Model { spec: spec.clone(), layers })
}

/// Row-wise softmax and the mean cross-entropy against `labels`.
fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let n = logits.shape()[0];
    let k = logits.len() / n.max(1);
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
    }
    let mut probs = vec![0.0; n * k];
    let mut loss = 0.0;
    for (i, (row, out)) in logits.data().chunks(k).zip(probs.chunks_mut(k)).enumerate() {
        if labels[i] >= k {
            return Err(Error::Config(format!("label {} outside 0..{k}", labels[i])));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for (o, v) in out.iter_mut().zip(row) {
            *o = (v - max).exp() / total;
        }
        loss -= row[labels[i]] - max - total.ln();
    }
    Ok((loss / n as f64, Tensor::from_vec(&[n, k], probs)?))
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

impl Model {
    pub fn norm_kind(&self) -> NormKind {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Norm(n) if n.kind() != NormKind::None => Some(n.kind()),
                _ => None,
            })
            .unwrap_or(NormKind::None)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let InputShape { channels, height, width } = self.spec.input;
        let (_, c, l) = x.dims3()?;
        if c != channels || l != height * width {
            return Err(Error::Shape(format!("model expects [N, {channels}, {}], got {:?}", height * width, x.shape())));
        }
        Ok(())
    }

    /// Logits `[N, classes, 1]` and per-layer caches.
    fn forward(&mut self, x: &Tensor, ids: Option<&[usize]>, mode: Mode) -> Result<(Tensor, Vec<LayerCache>)> {
        self.check_input(x)?;
        if self.spec.needs_contexts() && ids.is_none() {
            return Err(Error::Config("this model has context layers and needs context ids".into()));
        }
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (next, cache) = match layer {
                Layer::Dense { w, b } | Layer::Classifier { w, b } => (dense_forward(&h, w, b)?, LayerCache::Input(h)),
                Layer::Conv3x3 { w, b, height, width } => {
                    (conv3x3_forward(&h, w, b, *height, *width)?, LayerCache::Input(h))
                }
                Layer::Relu => (h.map(|v| v.max(0.0)), LayerCache::Input(h)),
                Layer::LeakyRelu => (h.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v }), LayerCache::Input(h)),
                Layer::Norm(norm) => {
                    let (y, cache) = norm.forward(&h, ids, mode)?;
                    (y, LayerCache::Norm(cache))
                }
                Layer::Flatten => {
                    let shape = h.shape().to_vec();
                    let n = shape[0];
                    let flat = h.len() / n.max(1);
                    (h.reshape(&[n, flat, 1])?, LayerCache::Shape(shape))
                }
            };
            caches.push(cache);
            h = next;
        }
        Ok((h, caches))
    }

    /// Logits only, as `[N, classes]`.
    pub fn logits(&mut self, x: &Tensor, ids: Option<&[usize]>, mode: Mode) -> Result<Tensor> {
        let (y, _) = self.forward(x, ids, mode)?;
        let n = y.shape()[0];
        y.reshape(&[n, self.spec.classes])
    }

    /// Mean cross-entropy of a batch.
    pub fn forward_loss(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        ids: Option<&[usize]>,
        mode: Mode,
    ) -> Result<(f64, ForwardCache)> {
        let (logits, caches) = self.forward(x, ids, mode)?;
        let (loss, probs) = softmax_cross_entropy(&logits, labels)?;
        let predictions = probs.data().chunks(self.spec.classes).map(argmax).collect();
        Ok((loss, ForwardCache { caches, probs, labels: labels.to_vec(), predictions }))
    }

    /// Gradients of the mean loss for every parameter, in
    /// [`Model::params_mut`] order.
    pub fn backward(&self, cache: &ForwardCache) -> Result<Vec<Tensor>> {
        let n = cache.labels.len();
        let k = self.spec.classes;
        let mut g = cache.probs.clone();
        for (i, &label) in cache.labels.iter().enumerate() {
            g.data_mut()[i * k + label] -= 1.0;
        }
        let mut g = g.map(|v| v / n as f64).reshape(&[n, k, 1])?;
        let mut grads: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        for (layer, lc) in self.layers.iter().zip(&cache.caches).rev() {
            let (dx, pg) = match (layer, lc) {
                (Layer::Dense { w, .. } | Layer::Classifier { w, .. }, LayerCache::Input(x)) => {
                    let (dx, dw, db) = dense_backward(x, w, &g)?;
                    (dx, vec![dw, db])
                }
                (Layer::Conv3x3 { w, height, width, .. }, LayerCache::Input(x)) => {
                    let (dx, dw, db) = conv3x3_backward(x, w, &g, *height, *width)?;
                    (dx, vec![dw, db])
                }
                (Layer::Relu, LayerCache::Input(x)) => {
                    let mut dx = g.clone();
                    dx.data_mut().iter_mut().zip(x.data()).for_each(|(d, &v)| if v <= 0.0 { *d = 0.0 });
                    (dx, Vec::new())
                }
                (Layer::LeakyRelu, LayerCache::Input(x)) => {
                    let mut dx = g.clone();
                    dx.data_mut().iter_mut().zip(x.data()).for_each(|(d, &v)| if v <= 0.0 { *d *= LEAKY_SLOPE });
                    (dx, Vec::new())
                }
                (Layer::Norm(norm), LayerCache::Norm(nc)) => norm.backward(nc, &g)?,
                (Layer::Flatten, LayerCache::Shape(shape)) => (g.clone().reshape(shape)?, Vec::new()),
                _ => unreachable!("cache does not match its layer"),
            };
            grads.push(pg);
            g = dx;
        }
        Ok(grads.into_iter().rev().flatten().collect())
    }

    /// Every trainable tensor, paired with whether weight decay applies to
    /// it (dense and conv weights only).
    pub fn params_mut(&mut self) -> Vec<(&mut Tensor, bool)> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { w, b } | Layer::Classifier { w, b } | Layer::Conv3x3 { w, b, .. } => {
                    out.push((w, true));
                    out.push((b, false));
                }
                Layer::Norm(norm) => out.extend(norm.params_mut().into_iter().map(|t| (t, false))),
                Layer::Relu | Layer::LeakyRelu | Layer::Flatten => {}
            }
        }
        out
    }

    /// Snapshot of every trainable tensor.
    pub fn params(&mut self) -> Vec<Tensor> {
        self.params_mut().into_iter().map(|(t, _)| t.clone()).collect()
    }

    /// The ACN layers' mixture weights, for simplex monitoring.
    pub fn acn_lambdas(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Norm(NormLayer::Adaptive(p)) => Some(p.lambdas()),
                _ => None,
            })
            .collect()
    }
}
