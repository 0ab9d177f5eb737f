//! Small convolutional multi-label classifier.
//!
//! `conv3x3 -> relu [-> maxpool2]` blocks, then global average pooling over the
//! last block's activations and a linear head. The last block's activations
//! are exposed so attention maps can be built from them.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    #[serde(default)]
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub blocks: Vec<ConvBlock>,
    pub num_classes: usize,
}

impl ModelSpec {
    /// Four blocks of 16, 32, 64, 64 channels, pooling after the first two:
    /// 8x8 attention maps on 32x32 input.
    pub fn toy(num_classes: usize) -> Self {
        ModelSpec {
            in_channels: 3,
            height: 32,
            width: 32,
            blocks: vec![
                ConvBlock { out_channels: 16, pool: true },
                ConvBlock { out_channels: 32, pool: true },
                ConvBlock { out_channels: 64, pool: false },
                ConvBlock { out_channels: 64, pool: false },
            ],
            num_classes,
        }
    }

    /// `[channels, h, w]` of the last conv block's output.
    pub fn feature_shape(&self) -> [usize; 3] {
        let (mut h, mut w) = (self.height, self.width);
        for b in &self.blocks {
            if b.pool {
                h /= 2;
                w /= 2;
            }
        }
        let k = self.blocks.last().map_or(self.in_channels, |b| b.out_channels);
        [k, h, w]
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Invalid(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.blocks.is_empty() || self.in_channels == 0 {
            return Err(Error::Invalid("model needs input channels and at least one conv block".into()));
        }
        if self.blocks.iter().any(|b| b.out_channels == 0) {
            return Err(Error::Invalid("conv block with zero channels".into()));
        }
        let (mut h, mut w) = (self.height, self.width);
        for b in &self.blocks {
            if b.pool {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Invalid(format!("cannot 2x2-pool a {h}x{w} map")));
                }
                h /= 2;
                w /= 2;
            }
        }
        if h < 4 || w < 4 {
            return Err(Error::Invalid(format!("attention maps would be {h}x{w}; need at least 4x4")));
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![b.out_channels, c_in, 3, 3]));
            out.push((format!("conv{i}.bias"), vec![b.out_channels]));
            c_in = b.out_channels;
        }
        out.push(("head.weight".into(), vec![self.num_classes, c_in]));
        out.push(("head.bias".into(), vec![self.num_classes]));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Param>,
}

impl Model {
    /// Uniform fan-in initialization (He-uniform for convs, `1/sqrt(fan_in)`
    /// for the head), zero biases. Deterministic per seed.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = if name.starts_with("head") {
                        (1.0 / fan_in as f64).sqrt()
                    } else {
                        (6.0 / fan_in as f64).sqrt()
                    };
                    Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
                };
                Param { name, value }
            })
            .collect();
        Ok(Model { spec, params })
    }

    /// Rebuilds a model from stored parameters, checking them against `spec`.
    pub fn from_params(spec: ModelSpec, params: Vec<Param>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::shape(
                "model",
                format!("spec needs {} parameters, got {}", expected.len(), params.len()),
            ));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if name != &p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::shape(
                    "model",
                    format!("expected {name} {shape:?}, got {} {:?}", p.name, p.value.shape()),
                ));
            }
        }
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Places every parameter in `graph` as a trainable leaf. All streams of a
    /// training step share the returned binding.
    pub fn bind(&self, graph: &Graph) -> BoundModel<'_> {
        let vars = self.params.iter().map(|p| graph.param(p.value.clone())).collect();
        BoundModel {
            model: self,
            graph: graph.clone(),
            vars,
            forwards: Cell::new(0),
        }
    }

    /// Like [`Model::bind`] but with parameters as constants.
    pub fn bind_frozen(&self, graph: &Graph) -> BoundModel<'_> {
        let vars = self.params.iter().map(|p| graph.constant(p.value.clone())).collect();
        BoundModel {
            model: self,
            graph: graph.clone(),
            vars,
            forwards: Cell::new(0),
        }
    }
}

/// Pixel value that maps to zero in network input space.
pub const INPUT_MEAN: f64 = 0.5;

/// Network input for a `[0,1]` image: every value shifted by [`INPUT_MEAN`].
/// Erasing a region of the input therefore fills it with the mean color.
pub fn preprocess(image: &Tensor) -> Tensor {
    image.map(|v| v - INPUT_MEAN)
}

/// Output of one forward pass.
pub struct Forward {
    /// `[N, classes]`
    pub logits: Var,
    /// `[N, K, h, w]` activations of the last conv block.
    pub features: Var,
}

pub struct BoundModel<'m> {
    model: &'m Model,
    graph: Graph,
    vars: Vec<Var>,
    forwards: Cell<usize>,
}

impl<'m> BoundModel<'m> {
    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn params(&self) -> &[Var] {
        &self.vars
    }

    /// Number of forward passes run through this binding.
    pub fn forward_count(&self) -> usize {
        self.forwards.get()
    }

    /// Runs the classifier on `[N,C,H,W]` or `[C,H,W]` images.
    pub fn forward(&self, images: &Var) -> Result<Forward> {
        let spec = &self.model.spec;
        let shape = images.shape();
        let x = match shape.as_slice() {
            [c, h, w] => images.reshape(&[1, *c, *h, *w])?,
            [_, _, _, _] => images.clone(),
            _ => return Err(Error::shape("forward", format!("expected image batch, got {shape:?}"))),
        };
        let xs = x.shape();
        if xs[1..] != [spec.in_channels, spec.height, spec.width] {
            return Err(Error::shape(
                "forward",
                format!(
                    "model expects {}x{}x{} images, got {:?}",
                    spec.in_channels, spec.height, spec.width, &xs[1..]
                ),
            ));
        }
        self.forwards.set(self.forwards.get() + 1);
        let n = xs[0];
        let mut h = x;
        for (i, block) in spec.blocks.iter().enumerate() {
            let (w, b) = (&self.vars[2 * i], &self.vars[2 * i + 1]);
            let y = h.conv2d(w, 1, 1)?;
            let ys = y.shape();
            let bias = b.reshape(&[1, ys[1], 1, 1])?.expand(&ys)?;
            h = y.add(&bias)?.relu()?;
            if block.pool {
                h = h.max_pool2d(2)?;
            }
        }
        let features = h;
        let nb = 2 * spec.blocks.len();
        let (hw, hb) = (&self.vars[nb], &self.vars[nb + 1]);
        let pooled = features.global_avg_pool()?;
        let logits = pooled.matmul(&hw.transpose()?)?;
        let bias = hb.reshape(&[1, spec.num_classes])?.expand(&[n, spec.num_classes])?;
        let logits = logits.add(&bias)?;
        Ok(Forward { logits, features })
    }

    /// Class probabilities for one `[0,1]` image, with recording off.
    pub fn probabilities(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.graph.no_grad(|| {
            let x = self.graph.constant(preprocess(image));
            let f = self.forward(&x)?;
            Ok(f.logits.sigmoid()?.value().data().to_vec())
        })
    }
}
