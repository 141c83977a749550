//! Classifier architectures.
//!
//! Every model is split into a body producing the feature vector `F(X)` and
//! a final linear head producing `logits = F(X) · W + b` with
//! `W: [feature_dim, num_classes]`. Class probabilities are the softmax of
//! the logits.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::{argmax, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    /// Three hidden ReLU layers of 200 units; features are the third hidden
    /// layer's activations.
    #[serde(rename = "mlp-200")]
    Mlp200,
    /// LeNet-5 shaped conv stack whose feature layer has exactly two units
    /// (linear, no activation) so features can be scattered directly.
    #[serde(rename = "lenet-2d")]
    Lenet2d,
    /// Classic LeNet-5 shape, 84-unit ReLU feature layer.
    #[serde(rename = "lenet-standard")]
    LenetStandard,
}

/// Weight initialization; biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    #[default]
    Glorot,
    /// Uniform in `±1 / sqrt(fan_in)`: smaller initial activations.
    FanIn,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Self::Mlp200, Self::Lenet2d, Self::LenetStandard];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mlp200 => "mlp-200",
            Self::Lenet2d => "lenet-2d",
            Self::LenetStandard => "lenet-standard",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Self::Mlp200 => 1,
            Self::Lenet2d => 2,
            Self::LenetStandard => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.tag() == tag)
            .ok_or_else(|| Error::UnknownArchitecture(format!("tag {tag}")))
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownArchitecture(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub variant: Architecture,
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl ArchitectureDescriptor {
    pub fn mnist(variant: Architecture) -> Self {
        Self {
            variant,
            input_shape: [1, 28, 28],
            num_classes: 10,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
enum Layer {
    Linear { w: usize, b: usize },
    Conv { w: usize, b: usize, padding: usize },
    MaxPool,
    Relu,
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    desc: ArchitectureDescriptor,
    params: Vec<Param>,
    body: Vec<Layer>,
    head_w: usize,
    head_b: usize,
    feature_dim: usize,
}

/// Graph handles produced by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub features: Var,
    pub logits: Var,
    /// Parameter leaves, in [`Model::params`] order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub features: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

struct Builder<'r> {
    rng: &'r mut rng::Rng,
    init: Init,
    params: Vec<Param>,
    layers: Vec<Layer>,
}

impl Builder<'_> {
    fn weights(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let limit = match self.init {
            Init::Glorot => libm::sqrt(6.0 / (fan_in + fan_out) as f64),
            Init::FanIn => 1.0 / libm::sqrt(fan_in as f64),
        };
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = self.rng.gen_range(-limit..limit);
        }
        t
    }

    fn push_param(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Layer {
        let w = self.weights(&[fan_in, fan_out], fan_in, fan_out);
        let w = self.push_param(format!("{name}.weight"), w);
        let b = self.push_param(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Layer::Linear { w, b }
    }

    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, k: usize, padding: usize) -> Layer {
        let w = self.weights(&[out_c, in_c, k, k], in_c * k * k, out_c * k * k);
        let w = self.push_param(format!("{name}.weight"), w);
        let b = self.push_param(format!("{name}.bias"), Tensor::zeros(&[out_c]));
        Layer::Conv { w, b, padding }
    }
}

impl Model {
    /// Builds a freshly initialized model; identical seeds give identical
    /// parameters.
    pub fn build(desc: ArchitectureDescriptor, seed: u64) -> Result<Self> {
        Self::build_with(desc, seed, Init::Glorot)
    }

    pub fn build_with(desc: ArchitectureDescriptor, seed: u64, init: Init) -> Result<Self> {
        if desc.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                desc.num_classes
            )));
        }
        if desc.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "input shape {:?} has a zero dimension",
                desc.input_shape
            )));
        }
        let mut r = rng::rng(rng::derive(seed, rng::stream::INIT, 0));
        let mut b = Builder {
            rng: &mut r,
            init,
            params: Vec::new(),
            layers: Vec::new(),
        };
        let [c, h, w] = desc.input_shape;
        let feature_dim = match desc.variant {
            Architecture::Mlp200 => {
                let mut fan_in = c * h * w;
                b.layers.push(Layer::Flatten);
                for i in 1..=3 {
                    let l = b.linear(&format!("fc{i}"), fan_in, 200);
                    b.layers.push(l);
                    b.layers.push(Layer::Relu);
                    fan_in = 200;
                }
                200
            }
            Architecture::Lenet2d | Architecture::LenetStandard => {
                // conv5x5(pad 2) -> pool -> conv5x5 -> pool
                let (h2, w2) = (h / 2, w / 2);
                if h2 < 6 || w2 < 6 {
                    return Err(Error::Config(format!(
                        "LeNet needs inputs of at least 12x12, got {h}x{w}"
                    )));
                }
                let (h4, w4) = ((h2 - 4) / 2, (w2 - 4) / 2);
                let l = b.conv("conv1", c, 6, 5, 2);
                b.layers.extend([l, Layer::Relu, Layer::MaxPool]);
                let l = b.conv("conv2", 6, 16, 5, 0);
                b.layers.extend([l, Layer::Relu, Layer::MaxPool, Layer::Flatten]);
                let l = b.linear("fc1", 16 * h4 * w4, 120);
                b.layers.extend([l, Layer::Relu]);
                if desc.variant == Architecture::Lenet2d {
                    let l = b.linear("fc2", 120, 2);
                    b.layers.push(l);
                    2
                } else {
                    let l = b.linear("fc2", 120, 84);
                    b.layers.extend([l, Layer::Relu]);
                    84
                }
            }
        };
        let Layer::Linear { w: head_w, b: head_b } =
            b.linear("classifier", feature_dim, desc.num_classes)
        else {
            unreachable!()
        };
        let Builder { params, layers, .. } = b;
        Ok(Self {
            desc,
            params,
            body: layers,
            head_w,
            head_b,
            feature_dim,
        })
    }

    /// Rebuilds a model from named parameters, e.g. a loaded checkpoint.
    /// Every architecture parameter must be present with the right shape.
    pub fn from_params(desc: ArchitectureDescriptor, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::build(desc, 0)?;
        let mut named = named;
        for p in &mut model.params {
            let pos = named
                .iter()
                .position(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{}`", p.name)))?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "from_params",
                    detail: format!(
                        "`{}` has shape {:?}, architecture expects {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    ),
                });
            }
            p.value = t;
        }
        if let Some((name, _)) = named.first() {
            return Err(Error::Config(format!("unexpected parameter `{name}`")));
        }
        Ok(model)
    }

    pub fn descriptor(&self) -> &ArchitectureDescriptor {
        &self.desc
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.desc.num_classes
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

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Final layer weights `W: [feature_dim, num_classes]` and bias.
    pub fn head(&self) -> (&Tensor, &Tensor) {
        (&self.params[self.head_w].value, &self.params[self.head_b].value)
    }

    /// Zeroes the final linear layer.
    pub fn zero_head(&mut self) {
        for idx in [self.head_w, self.head_b] {
            self.params[idx].value.data_mut().fill(0.0);
        }
    }

    /// Records the forward pass on `g`. `x` is `[B, C, H, W]` or `[B, C*H*W]`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var, param_grads: bool) -> Result<Forward> {
        let xs = g.shape(x).to_vec();
        let [c, h, w] = self.desc.input_shape;
        if xs.is_empty() || xs[1..].iter().product::<usize>() != c * h * w {
            return Err(Error::Shape {
                op: "forward",
                detail: format!(
                    "input {xs:?} does not match architecture input [B, {c}, {h}, {w}]"
                ),
            });
        }
        let batch = xs[0];
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.leaf(&p.value, param_grads))
            .collect();
        let mut cur = if xs.len() == 4 {
            x
        } else {
            g.reshape(x, &[batch, c, h, w])?
        };
        for layer in &self.body {
            cur = match *layer {
                Layer::Linear { w, b } => {
                    let y = g.matmul(cur, params[w])?;
                    g.add_bias(y, params[b])?
                }
                Layer::Conv { w, b, padding } => g.conv2d(cur, params[w], params[b], padding)?,
                Layer::MaxPool => g.max_pool2d(cur)?,
                Layer::Relu => g.relu(cur),
                Layer::Flatten => g.flatten(cur)?,
            };
        }
        let features = cur;
        let y = g.matmul(features, params[self.head_w])?;
        let logits = g.add_bias(y, params[self.head_b])?;
        Ok(Forward {
            features,
            logits,
            params,
        })
    }

    /// Features, logits and class probabilities for a batch, without
    /// recording gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        let mut g = Graph::new();
        let xv = g.leaf(x, false);
        let f = self.forward(&mut g, xv, false)?;
        let lsm = g.log_softmax(f.logits)?;
        let probs = g.tensor(lsm).map(libm::exp);
        Ok(Prediction {
            features: g.tensor(f.features),
            logits: g.tensor(f.logits),
            probs,
        })
    }

    /// Predicted class per row; ties resolve to the lowest index.
    pub fn predict_class(&self, x: &Tensor) -> Result<Vec<usize>> {
        let p = self.predict(x)?;
        Ok(classes(&p.logits))
    }
}

/// Row-wise argmax of `[B, n]` scores (logits or probabilities).
pub fn classes(scores: &Tensor) -> Vec<usize> {
    let n = scores.row_len();
    if n == 0 {
        return vec![0; scores.batch_size()];
    }
    scores.data().chunks(n).map(argmax).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_200_parameter_count() {
        let m = Model::build(ArchitectureDescriptor::mnist(Architecture::Mlp200), 0).unwrap();
        assert_eq!(
            m.param_count(),
            784 * 200 + 200 + 200 * 200 + 200 + 200 * 200 + 200 + 200 * 10 + 10
        );
        assert_eq!(m.param_count(), 239_410);
        assert_eq!(m.feature_dim(), 200);
    }

    #[test]
    fn lenet_variants() {
        let m = Model::build(ArchitectureDescriptor::mnist(Architecture::Lenet2d), 0).unwrap();
        assert_eq!(m.feature_dim(), 2);
        let s = Model::build(ArchitectureDescriptor::mnist(Architecture::LenetStandard), 0).unwrap();
        assert_eq!(s.feature_dim(), 84);
        // classic LeNet-5 count: 156 + 2416 + 48120 + 10164 + 850
        assert_eq!(s.param_count(), 61_706);
    }

    #[test]
    fn same_seed_same_params() {
        let d = ArchitectureDescriptor::mnist(Architecture::Lenet2d);
        let a = Model::build(d, 11).unwrap();
        let b = Model::build(d, 11).unwrap();
        let c = Model::build(d, 12).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn unknown_variant() {
        assert_eq!(
            "vgg-19".parse::<Architecture>(),
            Err(Error::UnknownArchitecture("vgg-19".into()))
        );
        assert_eq!("lenet-2d".parse::<Architecture>(), Ok(Architecture::Lenet2d));
    }

    #[test]
    fn init_bounds() {
        let desc = ArchitectureDescriptor::mnist(Architecture::Mlp200);
        let g = Model::build_with(desc, 5, Init::Glorot).unwrap();
        let f = Model::build_with(desc, 5, Init::FanIn).unwrap();
        let max = |m: &Model, n: &str| m.param(n).unwrap().data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        // fc1 is 784 -> 200
        let glorot = libm::sqrt(6.0 / 984.0);
        let fan_in = 1.0 / 28.0;
        assert!(max(&g, "fc1.weight") <= glorot && max(&g, "fc1.weight") > 0.95 * glorot);
        assert!(max(&f, "fc1.weight") <= fan_in && max(&f, "fc1.weight") > 0.95 * fan_in);
        assert!(f.param("fc1.bias").unwrap().data().iter().all(|&b| b == 0.0));
        assert_eq!(Model::build(desc, 5).unwrap().params(), g.params());
    }

    #[test]
    fn zero_head_gives_uniform_probs() {
        let d = ArchitectureDescriptor {
            variant: Architecture::Mlp200,
            input_shape: [1, 4, 4],
            num_classes: 10,
        };
        let mut m = Model::build(d, 3).unwrap();
        m.zero_head();
        let x = Tensor::full(&[2, 1, 4, 4], 0.3);
        let p = m.predict(&x).unwrap();
        for v in p.probs.data() {
            assert!((v - 0.1).abs() < 1e-15);
        }
        assert_eq!(m.predict_class(&x).unwrap(), vec![0, 0]);
    }

    #[test]
    fn input_shape_mismatch() {
        let m = Model::build(ArchitectureDescriptor::mnist(Architecture::Mlp200), 0).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 1, 8, 8])).is_err());
    }

    #[test]
    fn from_params_validates() {
        let d = ArchitectureDescriptor::mnist(Architecture::Lenet2d);
        let m = Model::build(d, 5).unwrap();
        let named: Vec<_> = m.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        let back = Model::from_params(d, named.clone()).unwrap();
        assert_eq!(back.params(), m.params());

        let mut missing = named.clone();
        missing.pop();
        assert!(Model::from_params(d, missing).is_err());

        let mut extra = named;
        extra.push(("bogus".into(), Tensor::scalar(1.0)));
        assert!(Model::from_params(d, extra).is_err());
    }
}
