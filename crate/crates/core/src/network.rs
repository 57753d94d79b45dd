//! Sequential model container, architecture presets and whole-network
//! forward/backward.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{
    softmax_loss, BatchNorm, Conv2d, Flatten, FullyConnected, Layer, MaxPool2d, Relu,
    SoftmaxCrossEntropy,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    LenetBn,
    LenetBnMini,
    Vgg11Bn,
    Vgg13Bn,
    Vgg16Bn,
    Vgg19Bn,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::LenetBn,
        Preset::LenetBnMini,
        Preset::Vgg11Bn,
        Preset::Vgg13Bn,
        Preset::Vgg16Bn,
        Preset::Vgg19Bn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::LenetBn => "lenet-bn",
            Preset::LenetBnMini => "lenet-bn-mini",
            Preset::Vgg11Bn => "vgg11-bn",
            Preset::Vgg13Bn => "vgg13-bn",
            Preset::Vgg16Bn => "vgg16-bn",
            Preset::Vgg19Bn => "vgg19-bn",
        }
    }

    /// Expands the preset into an explicit layer list ending in a `classes`-way FC.
    pub fn layers(self, classes: usize) -> Vec<LayerSpec> {
        use LayerSpec::*;
        let conv_block = |out: usize, kernel: usize, padding: usize| {
            [
                Conv {
                    out_channels: out,
                    kernel,
                    stride: 1,
                    padding,
                },
                Bn,
                Relu,
            ]
        };
        let fc_block = |out: usize| [Fc { out }, Bn, Relu];
        match self {
            Preset::LenetBn | Preset::LenetBnMini => {
                let (c1, c2, f1, f2) = if self == Preset::LenetBn {
                    (20, 50, 500, 500)
                } else {
                    (6, 16, 120, 84)
                };
                let mut v = Vec::new();
                v.extend(conv_block(c1, 5, 0));
                v.push(Maxpool { window: 2 });
                v.extend(conv_block(c2, 5, 0));
                v.push(Maxpool { window: 2 });
                v.push(Flatten);
                v.extend(fc_block(f1));
                v.extend(fc_block(f2));
                v.push(Fc { out: classes });
                v
            }
            _ => {
                let cfg: &[usize] = match self {
                    Preset::Vgg11Bn => &[64, 0, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0],
                    Preset::Vgg13Bn => {
                        &[64, 64, 0, 128, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0]
                    }
                    Preset::Vgg16Bn => &[
                        64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0,
                    ],
                    _ => &[
                        64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512,
                        512, 512, 512, 0,
                    ],
                };
                let mut v = Vec::new();
                for &c in cfg {
                    if c == 0 {
                        v.push(Maxpool { window: 2 });
                    } else {
                        v.extend(conv_block(c, 3, 1));
                    }
                }
                v.push(Flatten);
                v.push(Fc { out: classes });
                v
            }
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown preset '{s}'")))
    }
}

fn default_stride() -> usize {
    1
}

/// One entry of an explicit architecture list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Fc {
        out: usize,
    },
    Bn,
    Relu,
    Maxpool {
        window: usize,
    },
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchSpec {
    Preset(Preset),
    Layers(Vec<LayerSpec>),
}

impl ArchSpec {
    pub fn layer_specs(&self, classes: usize) -> Vec<LayerSpec> {
        match self {
            ArchSpec::Preset(p) => p.layers(classes),
            ArchSpec::Layers(v) => v.clone(),
        }
    }
}

/// Raw regular-backpropagation gradient of one parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub layer: usize,
    pub grad: Tensor,
}

/// Everything one training-mode forward/backward pass produces.
#[derive(Debug, Clone)]
pub struct BackwardBundle {
    pub loss: f64,
    pub grads: Vec<ParamGrad>,
    /// Gradient with respect to each layer's input, indexed by layer, when requested.
    pub input_grads: Option<Vec<Tensor>>,
}

impl BackwardBundle {
    pub fn grad_for(&self, layer: usize) -> Option<&Tensor> {
        self.grads.iter().find(|g| g.layer == layer).map(|g| &g.grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    /// `shapes[i]` is the per-sample input shape of layer `i`; the last entry is the logits shape.
    shapes: Vec<Vec<usize>>,
    classes: usize,
    head: SoftmaxCrossEntropy,
}

impl Network {
    /// Builds and initializes a network from a preset or an explicit layer list.
    pub fn build(
        arch: &ArchSpec,
        input_shape: &[usize],
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let specs = arch.layer_specs(classes);
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape.to_vec();
        for (i, spec) in specs.iter().enumerate() {
            let junction = || format!("layer {i} ({spec:?}) with input {shape:?}");
            let fail = |e: Error| Error::Construction {
                junction: junction(),
                detail: e.to_string(),
            };
            let layer = match *spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let &[c, _, _] = shape.as_slice() else {
                        return Err(fail(Error::dim("conv", "needs an image input")));
                    };
                    Layer::Conv2d(
                        Conv2d::init(c, out_channels, kernel, stride, padding, rng).map_err(fail)?,
                    )
                }
                LayerSpec::Fc { out } => {
                    let &[f] = shape.as_slice() else {
                        return Err(fail(Error::dim("fc", "needs a vector input; add a flatten")));
                    };
                    Layer::FullyConnected(FullyConnected::init(f, out, rng))
                }
                LayerSpec::Bn => Layer::BatchNorm(BatchNorm::new(shape[0])),
                LayerSpec::Relu => Layer::Relu(Relu::new()),
                LayerSpec::Maxpool { window } => {
                    Layer::MaxPool2d(MaxPool2d::new(window).map_err(fail)?)
                }
                LayerSpec::Flatten => Layer::Flatten(Flatten::new()),
            };
            shape = layer.output_shape(&shape).map_err(fail)?;
            layers.push(layer);
        }
        Network::from_layers(layers, input_shape, classes)
    }

    /// Assembles already-initialized layers, checking every junction.
    pub fn from_layers(layers: Vec<Layer>, input_shape: &[usize], classes: usize) -> Result<Self> {
        if !matches!(input_shape.len(), 1 | 3) {
            return Err(Error::Construction {
                junction: "input".into(),
                detail: format!("input shape must be [features] or [c, h, w], got {input_shape:?}"),
            });
        }
        let mut shapes = vec![input_shape.to_vec()];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().expect("nonempty"))
                .map_err(|e| Error::Construction {
                    junction: format!("layer {i} ({})", layer.kind()),
                    detail: e.to_string(),
                })?;
            if let Layer::BatchNorm(_) = layer {
                let after_param = i > 0 && layers[i - 1].is_parametric();
                let before_act = layers.get(i + 1).map_or(true, |l| matches!(l, Layer::Relu(_)));
                if !after_param || !before_act {
                    return Err(Error::Construction {
                        junction: format!("layer {i} (bn)"),
                        detail: "batch norm must sit between a parametric layer and its activation"
                            .into(),
                    });
                }
            }
            shapes.push(next);
        }
        let out = shapes.last().expect("nonempty");
        if out.as_slice() != [classes] {
            return Err(Error::Construction {
                junction: "output".into(),
                detail: format!("network produces {out:?}, expected [{classes}] logits"),
            });
        }
        Ok(Network {
            layers,
            shapes,
            classes,
            head: SoftmaxCrossEntropy::new(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    /// Per-sample input shape of layer `i` (`i == len` gives the logits shape).
    pub fn shape_before(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn parametric_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_parametric())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().filter_map(Layer::weights).map(Tensor::len).sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let input = self.input_shape();
        let ok = match input.len() {
            1 => batch.rank() == 2 && batch.shape()[0] == input[0],
            _ => batch.rank() == 4 && &batch.shape()[1..] == input,
        };
        if !ok {
            return Err(Error::dim(
                "Network",
                format!("batch shape {:?} does not fit input {input:?}", batch.shape()),
            ));
        }
        Ok(())
    }

    /// Training-mode forward pass to the logits.
    pub fn forward(&mut self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, true)?;
        }
        Ok(x)
    }

    /// Evaluation-mode forward pass to the logits.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            x = layer.infer(&x)?;
        }
        Ok(x)
    }

    pub fn forward_backward(&mut self, batch: &Tensor, labels: &[usize]) -> Result<BackwardBundle> {
        self.forward_backward_with(batch, labels, false)
    }

    /// Loss and exact gradients; optionally keeps the gradient on every layer's input.
    pub fn forward_backward_with(
        &mut self,
        batch: &Tensor,
        labels: &[usize],
        keep_input_grads: bool,
    ) -> Result<BackwardBundle> {
        let logits = self.forward(batch)?;
        let loss = self.head.forward(&logits, labels)?;
        let mut grad = self.head.backward()?;
        let mut grads = Vec::new();
        let mut input_grads = keep_input_grads.then(Vec::new);
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            if i == 0 && input_grads.is_none() {
                // the gradient on the data itself is never used
                if let Some(w) = layer.weight_gradient(&grad)? {
                    grads.push(ParamGrad { layer: i, grad: w });
                }
                break;
            }
            let g = layer.backward(&grad)?;
            if let Some(w) = g.weights {
                grads.push(ParamGrad { layer: i, grad: w });
            }
            grad = g.input;
            if let Some(v) = input_grads.as_mut() {
                v.push(grad.clone());
            }
        }
        grads.reverse();
        if let Some(v) = input_grads.as_mut() {
            v.reverse();
        }
        Ok(BackwardBundle {
            loss,
            grads,
            input_grads,
        })
    }

    /// Top-1 accuracy and mean loss over a dataset in evaluation mode.
    pub fn evaluate(&self, dataset: &Dataset) -> Result<Evaluation> {
        const CHUNK: usize = 256;
        let count = dataset.len();
        if count == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut correct = 0usize;
        let mut loss_sum = 0.0;
        let indices: Vec<usize> = (0..count).collect();
        for chunk in indices.chunks(CHUNK) {
            let (images, labels) = dataset.gather(chunk)?;
            let logits = self.infer(&images)?;
            let (_, loss) = softmax_loss(&logits, &labels)?;
            loss_sum += loss * chunk.len() as f64;
            correct += count_correct(&logits, &labels);
        }
        Ok(Evaluation {
            accuracy: correct as f64 / count as f64,
            loss: loss_sum / count as f64,
        })
    }
}

pub(crate) fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let (classes, batch) = (logits.shape()[0], logits.shape()[1]);
    let z = logits.data();
    labels
        .iter()
        .enumerate()
        .filter(|&(n, &y)| {
            let mut best = 0;
            for c in 1..classes {
                if z[c * batch + n] > z[best * batch + n] {
                    best = c;
                }
            }
            best == y
        })
        .count()
}
