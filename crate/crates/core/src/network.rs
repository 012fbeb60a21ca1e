//! The truncated VGG-19 chain: forward passes that capture feature maps and
//! back-propagation of per-capture gradients down to the image.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{self, ConvWeights, Tensor};
use crate::weights::{LayerShape, WeightSet};

/// Capture layers used by default: `conv1_1` (read after its ReLU) and the
/// outputs of the first four pooling layers.
pub const DEFAULT_CAPTURE: [&str; 5] = ["conv1_1", "pool1", "pool2", "pool3", "pool4"];

/// Convolutions per VGG-19 block and the block's channel width.
const VGG19_BLOCKS: [(usize, u32); 5] = [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Relu,
    AvgPool,
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv {
        name: String,
        weights: Arc<ConvWeights<T>>,
    },
    Relu {
        name: String,
    },
    AvgPool {
        name: String,
    },
}

impl<T> Layer<T> {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv { name, .. } | Layer::Relu { name } | Layer::AvgPool { name } => name,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv { .. } => LayerKind::Conv,
            Layer::Relu { .. } => LayerKind::Relu,
            Layer::AvgPool { .. } => LayerKind::AvgPool,
        }
    }
}

/// Names and kinds of the full VGG-19 convolutional trunk (16 convolutions,
/// each followed by a ReLU, and 5 average-pooling layers).
pub fn vgg19_layout() -> Vec<(String, LayerKind)> {
    let mut out = Vec::new();
    for (b, &(convs, _)) in VGG19_BLOCKS.iter().enumerate() {
        for i in 1..=convs {
            out.push((format!("conv{}_{}", b + 1, i), LayerKind::Conv));
            out.push((format!("relu{}_{}", b + 1, i), LayerKind::Relu));
        }
        out.push((format!("pool{}", b + 1), LayerKind::AvgPool));
    }
    out
}

/// Published VGG-19 shapes of every convolution, in chain order.
pub fn vgg19_conv_shapes() -> Vec<LayerShape> {
    let mut out = Vec::new();
    let mut c_in = 3;
    for (b, &(convs, width)) in VGG19_BLOCKS.iter().enumerate() {
        for i in 1..=convs {
            out.push(LayerShape {
                name: format!("conv{}_{}", b + 1, i),
                c_out: width,
                c_in,
            });
            c_in = width;
        }
    }
    out
}

/// Normalizes capture names: case is ignored and `PoolingK` means `poolK`.
pub fn canonical_layer_name(name: &str) -> String {
    let lower = name.trim().to_ascii_lowercase();
    match lower.strip_prefix("pooling") {
        Some(rest) => format!("pool{rest}"),
        None => lower,
    }
}

/// Index of the layer whose output a capture name reads. Convolution
/// captures read the output of the ReLU that follows them.
fn resolve_capture(layout: &[(String, LayerKind)], name: &str) -> Result<usize> {
    let idx = layout
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::config(format!("unknown capture layer `{name}`")))?;
    if layout[idx].1 == LayerKind::Conv {
        if let Some((_, LayerKind::Relu)) = layout.get(idx + 1) {
            return Ok(idx + 1);
        }
    }
    Ok(idx)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Capture {
    pub name: String,
    /// The capture reads the output of `layers[layer_index]`.
    pub layer_index: usize,
}

/// An immutable single-chain network with a set of capture layers.
#[derive(Clone, Debug)]
pub struct NetworkSpec<T> {
    layers: Vec<Layer<T>>,
    captures: Vec<Capture>,
}

impl<T: Real> NetworkSpec<T> {
    /// Builds a chain from explicit layers, truncated after the deepest
    /// capture.
    pub fn new<S: AsRef<str>>(mut layers: Vec<Layer<T>>, capture: &[S]) -> Result<Self> {
        let layout: Vec<_> = layers.iter().map(|l| (l.name().to_owned(), l.kind())).collect();
        let mut seen = std::collections::HashSet::new();
        for (n, _) in &layout {
            if !seen.insert(n.as_str()) {
                return Err(Error::config(format!("duplicate layer name `{n}`")));
            }
        }
        let captures = resolve_captures(&layout, capture)?;
        let deepest = captures.iter().map(|c| c.layer_index).max().unwrap();
        layers.truncate(deepest + 1);

        let mut channels = 3;
        for l in &layers {
            if let Layer::Conv { name, weights } = l {
                if weights.c_in() != channels {
                    return Err(Error::weights(
                        name,
                        format!("c_in = {} but {} channels arrive", weights.c_in(), channels),
                    ));
                }
                channels = weights.c_out();
            }
        }
        Ok(NetworkSpec { layers, captures })
    }

    /// Builds a chain following `layout`, taking convolution weights from
    /// `weights` by name. Channel widths come from the weights, so reduced
    /// width test networks use the same path.
    pub fn from_layout<S: AsRef<str>>(
        layout: &[(String, LayerKind)],
        weights: &WeightSet,
        capture: &[S],
    ) -> Result<Self> {
        let captures = resolve_captures(layout, capture)?;
        let deepest = captures.iter().map(|c| c.layer_index).max().unwrap();
        let mut layers = Vec::with_capacity(deepest + 1);
        for (name, kind) in &layout[..=deepest] {
            layers.push(match kind {
                LayerKind::Conv => {
                    let rec = weights
                        .record(name)
                        .ok_or_else(|| Error::weights(name, "record missing"))?;
                    Layer::Conv {
                        name: name.clone(),
                        weights: Arc::new(rec.to_conv()?),
                    }
                }
                LayerKind::Relu => Layer::Relu { name: name.clone() },
                LayerKind::AvgPool => Layer::AvgPool { name: name.clone() },
            });
        }
        let names: Vec<&str> = capture.iter().map(|s| s.as_ref()).collect();
        NetworkSpec::new(layers, &names)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn captures(&self) -> &[Capture] {
        &self.captures
    }

    pub fn capture_names(&self) -> impl Iterator<Item = &str> {
        self.captures.iter().map(|c| c.name.as_str())
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.kind() == kind).count()
    }

    /// Runs the chain, keeping every intermediate activation.
    pub fn forward_capture(&self, image: &Tensor<T>) -> Result<ForwardTrace<T>> {
        if image.channels() != 3 {
            return Err(Error::config(format!(
                "network input must have 3 channels, got {}",
                image.channels()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(image.clone());
        for layer in &self.layers {
            let x = activations.last().unwrap();
            let y = match layer {
                Layer::Conv { weights, .. } => tensor::conv2d_forward(x, weights)?,
                Layer::Relu { .. } => tensor::relu_forward(x),
                Layer::AvgPool { .. } => tensor::avgpool_forward(x)?,
            };
            activations.push(y);
        }
        Ok(ForwardTrace {
            activations,
            captures: self.captures.clone(),
        })
    }

    /// Back-propagates per-capture feature gradients to the image. Each
    /// capture gradient is added to the gradient arriving from deeper layers
    /// at the point where its feature map is read.
    pub fn backward_to_image(
        &self,
        trace: &ForwardTrace<T>,
        capture_grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<Tensor<T>> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::config("trace does not belong to this network"));
        }
        let mut injected: Vec<Vec<&Tensor<T>>> = vec![Vec::new(); self.layers.len()];
        for (name, g) in capture_grads {
            let cap = self
                .captures
                .iter()
                .find(|c| &c.name == name)
                .ok_or_else(|| Error::config(format!("`{name}` is not a capture layer")))?;
            let f = &trace.activations[cap.layer_index + 1];
            if !g.same_shape(f) {
                return Err(Error::config(format!(
                    "gradient for `{name}` has shape {:?}, feature map is {:?}",
                    g.shape(),
                    f.shape()
                )));
            }
            injected[cap.layer_index].push(g);
        }

        let mut grad: Option<Tensor<T>> = None;
        for (k, layer) in self.layers.iter().enumerate().rev() {
            for g in &injected[k] {
                match grad.as_mut() {
                    Some(acc) => acc.axpy(T::one(), g)?,
                    None => grad = Some((*g).clone()),
                }
            }
            let Some(g) = grad.take() else { continue };
            let input = &trace.activations[k];
            grad = Some(match layer {
                Layer::Conv { weights, .. } => tensor::conv2d_backward_data(&g, weights)?,
                Layer::Relu { .. } => tensor::relu_backward(&g, input)?,
                Layer::AvgPool { .. } => {
                    tensor::avgpool_backward(&g, input.height(), input.width())?
                }
            });
        }
        let (c, h, w) = trace.activations[0].shape();
        Ok(grad.unwrap_or_else(|| Tensor::zeros(c, h, w)))
    }
}

fn resolve_captures<S: AsRef<str>>(
    layout: &[(String, LayerKind)],
    capture: &[S],
) -> Result<Vec<Capture>> {
    if capture.is_empty() {
        return Err(Error::config("at least one capture layer is required"));
    }
    let mut out: Vec<Capture> = Vec::with_capacity(capture.len());
    for raw in capture {
        let name = canonical_layer_name(raw.as_ref());
        if out.iter().any(|c| c.name == name) {
            return Err(Error::config(format!("capture layer `{name}` listed twice")));
        }
        let layer_index = resolve_capture(layout, &name)?;
        out.push(Capture { name, layer_index });
    }
    Ok(out)
}

/// Builds VGG-19 with average pooling, truncated after the deepest capture.
/// Every convolution up to that point must have its published shape.
pub fn build_truncated_vgg19<T: Real, S: AsRef<str>>(
    weights: &WeightSet,
    capture: &[S],
) -> Result<NetworkSpec<T>> {
    let layout = vgg19_layout();
    let captures = resolve_captures(&layout, capture)?;
    let deepest = captures.iter().map(|c| c.layer_index).max().unwrap();
    let needed = layout[..=deepest]
        .iter()
        .filter(|(_, k)| *k == LayerKind::Conv)
        .count();
    for want in vgg19_conv_shapes().into_iter().take(needed) {
        let got = weights
            .record(&want.name)
            .ok_or_else(|| Error::weights(&want.name, "record missing"))?;
        if got.c_out != want.c_out || got.c_in != want.c_in {
            return Err(Error::weights(
                &want.name,
                format!(
                    "shape ({}, {}) but VGG-19 has ({}, {})",
                    got.c_out, got.c_in, want.c_out, want.c_in
                ),
            ));
        }
    }
    NetworkSpec::from_layout(&layout, weights, capture)
}

/// Activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    /// `activations[0]` is the input; `activations[k + 1]` is the output of
    /// layer `k`.
    activations: Vec<Tensor<T>>,
    captures: Vec<Capture>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn feature(&self, name: &str) -> Option<&Tensor<T>> {
        self.captures
            .iter()
            .find(|c| c.name == name)
            .map(|c| &self.activations[c.layer_index + 1])
    }

    /// Captured feature maps in capture order.
    pub fn features(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.captures
            .iter()
            .map(|c| (c.name.as_str(), &self.activations[c.layer_index + 1]))
    }

    /// `(m_l, N_l)`: number of feature maps and number of spatial positions.
    pub fn dims(&self, name: &str) -> Option<(usize, usize)> {
        self.feature(name).map(|f| (f.channels(), f.plane_len()))
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.activations[0]
    }

    pub fn activations(&self) -> &[Tensor<T>] {
        &self.activations
    }
}

#[cfg(test)]
pub(crate) mod test_nets {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::weights::ConvRecord;

    /// Random weights for the first `convs` VGG-19 convolutions with every
    /// width replaced by `width`.
    pub fn narrow_vgg_weights(seed: u64, convs: usize, width: u32) -> WeightSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = vgg19_conv_shapes()
            .into_iter()
            .take(convs)
            .enumerate()
            .map(|(i, s)| {
                let c_in = if i == 0 { 3 } else { width };
                let std = (2.0 / (9.0 * c_in as f64)).sqrt();
                let normal = Normal::new(0.0, std).unwrap();
                let kernel = (0..width * c_in * 9)
                    .map(|_| normal.sample(&mut rng) as f32)
                    .collect();
                let bias = (0..width).map(|_| normal.sample(&mut rng) as f32 * 0.1).collect();
                ConvRecord::new(s.name, width, c_in, kernel, bias)
            })
            .collect();
        WeightSet::new([0.0; 3], records)
    }
}
