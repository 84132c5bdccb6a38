//! The two objectness regressors, their initialization, inference and
//! backpropagation, plus the dense-to-convolutional conversion that lets the
//! smaller network score whole images in one pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvSpec, Padding, Tensor};

/// The side length of the square patches both networks are trained on.
pub const PATCH: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv(ConvSpec),
    MaxPool { size: usize },
    Dense { out: usize },
    Relu,
    Sigmoid,
}

impl LayerSpec {
    pub fn is_trainable(&self) -> bool {
        matches!(self, LayerSpec::Conv(_) | LayerSpec::Dense { .. })
    }
}

/// An ordered layer stack together with its canonical patch input extent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

fn spatial(shape: &[usize], layer: usize) -> Result<(usize, usize, usize)> {
    match shape {
        &[c, h, w] => Ok((c, h, w)),
        other => Err(Error::invalid(
            "NetworkSpec",
            format!("layer {layer} needs a C x H x W input, got shape {other:?}"),
        )),
    }
}

impl NetworkSpec {
    /// Shape of the data after each layer, for an arbitrary input extent.
    pub fn shapes_for(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut cur = input.to_vec();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Conv(spec) => {
                    let (_, h, w) = spatial(&cur, idx)?;
                    let (oh, ow) = spec.output_extent(h, w)?;
                    vec![spec.out_channels, oh, ow]
                }
                LayerSpec::MaxPool { size } => {
                    let (c, h, w) = spatial(&cur, idx)?;
                    if h / size == 0 || w / size == 0 {
                        return Err(Error::invalid(
                            "NetworkSpec",
                            format!("layer {idx}: {h}x{w} input too small for {size}x{size} pooling"),
                        ));
                    }
                    vec![c, h / size, w / size]
                }
                LayerSpec::Dense { out } => vec![*out],
                LayerSpec::Relu | LayerSpec::Sigmoid => cur,
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// Shapes for the canonical input extent.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        self.shapes_for(&self.input.to_vec())
    }

    /// Total number of weight and bias elements across all layers.
    pub fn param_count(&self) -> Result<usize> {
        let shapes = self.output_shapes()?;
        let mut count = 0usize;
        let mut prev: Vec<usize> = self.input.to_vec();
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            match layer {
                LayerSpec::Conv(spec) => {
                    let c = prev[0];
                    count += spec.out_channels * c * spec.kernel_h * spec.kernel_w
                        + spec.out_channels;
                }
                LayerSpec::Dense { out } => {
                    let n: usize = prev.iter().product();
                    count += out * n + out;
                }
                _ => {}
            }
            prev = shape.clone();
        }
        Ok(count)
    }
}

/// Weight and bias tensors for one layer; both empty for stateless layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn stateless() -> Self {
        LayerParams {
            weights: Tensor::empty(),
            bias: Tensor::empty(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Vec<LayerParams>,
}

/// Records everything a backward pass needs: the input each layer saw, pool
/// argmax positions, and the final output.
pub struct Tape {
    inputs: Vec<Tensor>,
    argmax: Vec<Option<Vec<u32>>>,
    pub output: Tensor,
}

impl Network {
    /// Builds the network with uniform weights in
    /// `±sqrt(6 / (fan_in + fan_out))` and zero biases, drawn from a
    /// seed-determined stream in layer order.
    pub fn initialized(spec: NetworkSpec, seed: u64) -> Result<Network> {
        let shapes = spec.output_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(spec.layers.len());
        let mut prev: Vec<usize> = spec.input.to_vec();
        for (layer, shape) in spec.layers.iter().zip(&shapes) {
            let p = match layer {
                LayerSpec::Conv(cs) => {
                    let c = prev[0];
                    let fan_in = c * cs.kernel_h * cs.kernel_w;
                    let fan_out = cs.out_channels * cs.kernel_h * cs.kernel_w;
                    LayerParams {
                        weights: glorot(
                            &mut rng,
                            &[cs.out_channels, c, cs.kernel_h, cs.kernel_w],
                            fan_in,
                            fan_out,
                        ),
                        bias: Tensor::zeros(&[cs.out_channels]),
                    }
                }
                LayerSpec::Dense { out } => {
                    let n: usize = prev.iter().product();
                    LayerParams {
                        weights: glorot(&mut rng, &[*out, n], n, *out),
                        bias: Tensor::zeros(&[*out]),
                    }
                }
                _ => LayerParams::stateless(),
            };
            params.push(p);
            prev = shape.clone();
        }
        Ok(Network { spec, params })
    }

    pub fn from_parts(spec: NetworkSpec, params: Vec<LayerParams>) -> Result<Network> {
        if params.len() != spec.layers.len() {
            return Err(Error::invalid(
                "Network::from_parts",
                format!(
                    "{} parameter records for {} layers",
                    params.len(),
                    spec.layers.len()
                ),
            ));
        }
        let net = Network { spec, params };
        net.check_param_shapes()?;
        Ok(net)
    }

    fn check_param_shapes(&self) -> Result<()> {
        let shapes = self.spec.output_shapes()?;
        let mut prev: Vec<usize> = self.spec.input.to_vec();
        for (idx, (layer, shape)) in self.spec.layers.iter().zip(&shapes).enumerate() {
            let p = &self.params[idx];
            match layer {
                LayerSpec::Conv(cs) => {
                    let want = [cs.out_channels, prev[0], cs.kernel_h, cs.kernel_w];
                    if p.weights.shape() != want || p.bias.shape() != [cs.out_channels] {
                        return Err(Error::invalid(
                            "Network",
                            format!("layer {idx} parameters do not match its convolution spec"),
                        ));
                    }
                }
                LayerSpec::Dense { out } => {
                    let n: usize = prev.iter().product();
                    if p.weights.shape() != [*out, n] || p.bias.shape() != [*out] {
                        return Err(Error::invalid(
                            "Network",
                            format!("layer {idx} parameters do not match its dense spec"),
                        ));
                    }
                }
                _ => {
                    if !p.is_empty() {
                        return Err(Error::invalid(
                            "Network",
                            format!("layer {idx} is stateless but carries parameters"),
                        ));
                    }
                }
            }
            prev = shape.clone();
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(LayerParams::len).sum()
    }

    /// Runs the stack on an input of any compatible extent.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut cur = input.clone();
        for (idx, layer) in self.spec.layers.iter().enumerate() {
            let p = &self.params[idx];
            cur = match layer {
                LayerSpec::Conv(cs) => tensor::conv2d_forward(&cur, &p.weights, &p.bias, cs)?,
                LayerSpec::MaxPool { size } => tensor::maxpool2d_forward(&cur, *size)?.0,
                LayerSpec::Dense { .. } => tensor::dense_forward(&cur, &p.weights, &p.bias)?,
                LayerSpec::Relu => tensor::relu(&cur),
                LayerSpec::Sigmoid => tensor::sigmoid(&cur),
            };
        }
        Ok(cur)
    }

    /// Scores one patch of the canonical extent; output is in (0, 1).
    pub fn forward_patch(&self, patch: &Tensor) -> Result<f32> {
        if patch.shape() != self.spec.input {
            return Err(Error::invalid(
                "forward_patch",
                format!(
                    "expected a {}x{}x{} patch, got {:?}",
                    self.spec.input[0],
                    self.spec.input[1],
                    self.spec.input[2],
                    patch.shape()
                ),
            ));
        }
        let out = self.forward(patch)?;
        if out.len() != 1 {
            return Err(Error::invalid(
                "forward_patch",
                format!("network emits {} values, not a scalar score", out.len()),
            ));
        }
        Ok(out.data()[0])
    }

    /// Forward pass that records per-layer inputs for [`Network::backward`].
    pub fn forward_train(&self, input: &Tensor) -> Result<Tape> {
        let mut cur = input.clone();
        let mut inputs = Vec::with_capacity(self.spec.layers.len());
        let mut argmax = Vec::with_capacity(self.spec.layers.len());
        for (idx, layer) in self.spec.layers.iter().enumerate() {
            let p = &self.params[idx];
            let mut pooled_idx = None;
            let next = match layer {
                LayerSpec::Conv(cs) => tensor::conv2d_forward(&cur, &p.weights, &p.bias, cs)?,
                LayerSpec::MaxPool { size } => {
                    let (out, idxs) = tensor::maxpool2d_forward(&cur, *size)?;
                    pooled_idx = Some(idxs);
                    out
                }
                LayerSpec::Dense { .. } => tensor::dense_forward(&cur, &p.weights, &p.bias)?,
                LayerSpec::Relu => tensor::relu(&cur),
                LayerSpec::Sigmoid => tensor::sigmoid(&cur),
            };
            inputs.push(cur);
            argmax.push(pooled_idx);
            cur = next;
        }
        Ok(Tape {
            inputs,
            argmax,
            output: cur,
        })
    }

    /// Gradients w.r.t. every parameter tensor and the network input.
    pub fn backward(&self, tape: &Tape, grad_output: &Tensor) -> Result<(Vec<LayerParams>, Tensor)> {
        if tape.inputs.len() != self.spec.layers.len() {
            return Err(Error::invalid("backward", "tape does not match this network"));
        }
        let mut grads = vec![LayerParams::stateless(); self.spec.layers.len()];
        let mut grad = grad_output.clone();
        for idx in (0..self.spec.layers.len()).rev() {
            let layer_in = &tape.inputs[idx];
            let p = &self.params[idx];
            grad = match &self.spec.layers[idx] {
                LayerSpec::Conv(cs) => {
                    let (gi, gw, gb) = tensor::conv2d_backward(layer_in, &p.weights, cs, &grad)?;
                    grads[idx] = LayerParams {
                        weights: gw,
                        bias: gb,
                    };
                    gi
                }
                LayerSpec::MaxPool { .. } => {
                    let idxs = tape.argmax[idx]
                        .as_ref()
                        .ok_or_else(|| Error::invalid("backward", "tape is missing pool indices"))?;
                    tensor::maxpool2d_backward(layer_in.shape(), idxs, &grad)?
                }
                LayerSpec::Dense { .. } => {
                    let (gi, gw, gb) = tensor::dense_backward(layer_in, &p.weights, &grad)?;
                    grads[idx] = LayerParams {
                        weights: gw,
                        bias: gb,
                    };
                    gi
                }
                LayerSpec::Relu => tensor::relu_backward(layer_in, &grad)?,
                LayerSpec::Sigmoid => {
                    let out = if idx + 1 < tape.inputs.len() {
                        &tape.inputs[idx + 1]
                    } else {
                        &tape.output
                    };
                    tensor::sigmoid_backward(out, &grad)?
                }
            };
        }
        Ok((grads, grad))
    }

    /// Rewrites every dense layer as an equivalent valid convolution so the
    /// network can slide over inputs larger than its training patch. The
    /// final trainable layer must be a dense layer reading a `C x 24 x 24`
    /// feature map; its `out x (C*24*24)` weight matrix is reinterpreted as
    /// an `out x C x 24 x 24` kernel (channel-major row-major order, the
    /// same order the dense layer consumed its input in), so the converted
    /// network reproduces patch scores exactly.
    pub fn fc_to_conv(&self) -> Result<Network> {
        let shapes = self.spec.output_shapes()?;
        let last_trainable = self
            .spec
            .layers
            .iter()
            .rposition(LayerSpec::is_trainable)
            .ok_or_else(|| Error::invalid("fc_to_conv", "network has no trainable layers"))?;
        let input_of = |idx: usize| -> &[usize] {
            if idx == 0 {
                &self.spec.input
            } else {
                &shapes[idx - 1]
            }
        };
        match (&self.spec.layers[last_trainable], input_of(last_trainable)) {
            (LayerSpec::Dense { .. }, &[_, 24, 24]) => {}
            (layer, shape) => {
                return Err(Error::invalid(
                    "fc_to_conv",
                    format!(
                        "conversion requires the final trainable layer to be dense over a \
                         C x 24 x 24 feature map; found {layer:?} over {shape:?}"
                    ),
                ));
            }
        }

        let mut layers = Vec::with_capacity(self.spec.layers.len());
        let mut params = Vec::with_capacity(self.params.len());
        for (idx, layer) in self.spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Dense { out } => {
                    let (c, h, w) = match input_of(idx) {
                        &[c, h, w] => (c, h, w),
                        // A dense layer after another converted dense sees
                        // that layer's 1x1 map.
                        &[n] => (n, 1, 1),
                        other => {
                            return Err(Error::invalid(
                                "fc_to_conv",
                                format!("dense layer {idx} has unsupported input shape {other:?}"),
                            ))
                        }
                    };
                    let spec = ConvSpec::new(*out, h, w, Padding::Valid);
                    let weights = self.params[idx].weights.clone().reshaped(&[*out, c, h, w])?;
                    layers.push(LayerSpec::Conv(spec));
                    params.push(LayerParams {
                        weights,
                        bias: self.params[idx].bias.clone(),
                    });
                }
                other => {
                    layers.push(*other);
                    params.push(self.params[idx].clone());
                }
            }
        }
        Ok(Network {
            spec: NetworkSpec {
                input: self.spec.input,
                layers,
            },
            params,
        })
    }
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_vec(shape, data).expect("shape/data length agree by construction")
}

/// LeNet-style patch scorer: two valid 5x5 convolution + pool stages, then
/// two dense layers.
pub fn build_cnn(seed: u64) -> Result<Network> {
    let spec = NetworkSpec {
        input: [1, PATCH, PATCH],
        layers: vec![
            LayerSpec::Conv(ConvSpec::new(32, 5, 5, Padding::Valid)),
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Conv(ConvSpec::new(32, 5, 5, Padding::Valid)),
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Dense { out: 96 },
            LayerSpec::Relu,
            LayerSpec::Dense { out: 1 },
            LayerSpec::Sigmoid,
        ],
    };
    Network::initialized(spec, seed)
}

/// Small scorer built from 3x3 + 1x1 same-padded convolution stages; its one
/// dense layer reads a 24x24 map, which is what makes [`Network::fc_to_conv`]
/// applicable.
pub fn build_fcn_tiny(seed: u64) -> Result<Network> {
    let spec = NetworkSpec {
        input: [1, PATCH, PATCH],
        layers: vec![
            LayerSpec::Conv(ConvSpec::new(24, 3, 3, Padding::Same)),
            LayerSpec::Relu,
            LayerSpec::Conv(ConvSpec::new(24, 1, 1, Padding::Same)),
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Conv(ConvSpec::new(24, 3, 3, Padding::Same)),
            LayerSpec::Relu,
            LayerSpec::Conv(ConvSpec::new(24, 1, 1, Padding::Same)),
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Dense { out: 1 },
            LayerSpec::Sigmoid,
        ],
    };
    Network::initialized(spec, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_patch(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..PATCH * PATCH).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[1, PATCH, PATCH], data).unwrap()
    }

    #[test]
    fn cnn_layer_listing_and_param_count() {
        let net = build_cnn(1).unwrap();
        let kinds: Vec<_> = net.spec.layers.iter().collect();
        assert_eq!(kinds.len(), 10);
        assert!(matches!(kinds[0], LayerSpec::Conv(c) if c.out_channels == 32 && c.kernel_h == 5));
        assert!(matches!(kinds[3], LayerSpec::Conv(_)));
        assert!(matches!(kinds[6], LayerSpec::Dense { out: 96 }));
        assert!(matches!(kinds[8], LayerSpec::Dense { out: 1 }));
        // 832 + 25,632 + 1,354,848 + 97 under valid padding.
        assert_eq!(net.spec.param_count().unwrap(), 1_381_409);
        assert_eq!(net.param_count(), 1_381_409);
    }

    #[test]
    fn fcn_param_count_and_extents() {
        let net = build_fcn_tiny(1).unwrap();
        assert_eq!(net.spec.param_count().unwrap(), 20_473);
        assert_eq!(net.param_count(), 20_473);
        let spatial: Vec<usize> = net
            .spec
            .output_shapes()
            .unwrap()
            .iter()
            .filter(|s| s.len() == 3)
            .map(|s| s[1])
            .collect();
        assert_eq!(spatial, [96, 96, 96, 96, 48, 48, 48, 48, 48, 24]);
    }

    #[test]
    fn trivial_param_counts() {
        let empty = NetworkSpec {
            input: [1, 96, 96],
            layers: vec![],
        };
        assert_eq!(empty.param_count().unwrap(), 0);
        let single_fc = NetworkSpec {
            input: [1, 5, 5],
            layers: vec![LayerSpec::Dense { out: 1 }],
        };
        assert_eq!(single_fc.param_count().unwrap(), 26);
    }

    #[test]
    fn forward_patch_range_and_determinism() {
        for net in [build_cnn(42).unwrap(), build_fcn_tiny(42).unwrap()] {
            let patch = random_patch(5);
            let a = net.forward_patch(&patch).unwrap();
            let b = net.forward_patch(&patch).unwrap();
            assert!(a > 0.0 && a < 1.0);
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn forward_patch_rejects_wrong_extent() {
        let net = build_fcn_tiny(0).unwrap();
        let wrong = Tensor::zeros(&[1, 64, 64]);
        assert!(net.forward_patch(&wrong).is_err());
    }

    #[test]
    fn zero_weights_score_half() {
        let mut net = build_fcn_tiny(0).unwrap();
        for p in &mut net.params {
            p.weights.data_mut().fill(0.0);
            p.bias.data_mut().fill(0.0);
        }
        let score = net.forward_patch(&Tensor::zeros(&[1, PATCH, PATCH])).unwrap();
        assert_eq!(score, 0.5);
    }

    #[test]
    fn seeded_init_reproducible_and_seed_sensitive() {
        let a = build_fcn_tiny(9).unwrap();
        let b = build_fcn_tiny(9).unwrap();
        let c = build_fcn_tiny(10).unwrap();
        assert_eq!(a.params[0].weights, b.params[0].weights);
        assert_ne!(a.params[0].weights, c.params[0].weights);
        assert!(a.params[0].bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn converted_network_matches_patch_network() {
        let net = build_fcn_tiny(3).unwrap();
        let conv = net.fc_to_conv().unwrap();
        for seed in 0..100 {
            let patch = random_patch(seed);
            let want = net.forward_patch(&patch).unwrap();
            let got = conv.forward(&patch).unwrap();
            assert_eq!(got.shape(), &[1, 1, 1]);
            assert!(
                (got.data()[0] - want).abs() <= 1e-5,
                "patch {seed}: {} vs {want}",
                got.data()[0]
            );
        }
    }

    #[test]
    fn converted_network_slides_over_wider_inputs() {
        let net = build_fcn_tiny(4).unwrap().fc_to_conv().unwrap();
        for k in [0usize, 1, 3] {
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            let w = PATCH + 4 * k;
            let data = (0..PATCH * w).map(|_| rng.gen_range(0.0..1.0)).collect();
            let image = Tensor::from_vec(&[1, PATCH, w], data).unwrap();
            let out = net.forward(&image).unwrap();
            assert_eq!(out.shape(), &[1, 1, 1 + k]);
        }
    }

    #[test]
    fn converted_zero_network_is_constant_bias() {
        let mut net = build_fcn_tiny(0).unwrap();
        for p in &mut net.params {
            p.weights.data_mut().fill(0.0);
        }
        let dense = net.params.iter_mut().rfind(|p| !p.is_empty()).unwrap();
        dense.bias.data_mut()[0] = 0.3;
        let conv = net.fc_to_conv().unwrap();
        let image = random_patch(8);
        let out = conv.forward(&image).unwrap();
        let want = 1.0 / (1.0 + (-0.3f32).exp());
        assert!((out.data()[0] - want).abs() < 1e-6);
    }

    #[test]
    fn conversion_rejects_unsuitable_networks() {
        // Final dense reads a 21x21 map here, not 24x24.
        assert!(build_cnn(0).unwrap().fc_to_conv().is_err());

        let spec = NetworkSpec {
            input: [1, PATCH, PATCH],
            layers: vec![
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv(ConvSpec::new(4, 3, 3, Padding::Same)),
                LayerSpec::Sigmoid,
            ],
        };
        let net = Network::initialized(spec, 0).unwrap();
        assert!(net.fc_to_conv().is_err());
    }

    #[test]
    fn whole_network_gradient_matches_finite_differences() {
        let spec = NetworkSpec {
            input: [1, 10, 10],
            layers: vec![
                LayerSpec::Conv(ConvSpec::new(2, 3, 3, Padding::Same)),
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv(ConvSpec::new(3, 3, 3, Padding::Valid)),
                LayerSpec::Relu,
                LayerSpec::Dense { out: 4 },
                LayerSpec::Relu,
                LayerSpec::Dense { out: 1 },
                LayerSpec::Sigmoid,
            ],
        };
        let net = Network::initialized(spec, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let input = Tensor::from_vec(
            &[1, 10, 10],
            (0..100).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();

        let tape = net.forward_train(&input).unwrap();
        let cotangent = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let (grads, grad_in) = net.backward(&tape, &cotangent).unwrap();

        let eval = |net: &Network| net.forward(&input).unwrap().data()[0] as f64;
        let h = 1e-3f32;
        for idx in 0..net.spec.layers.len() {
            for field in 0..2 {
                let len = if field == 0 {
                    net.params[idx].weights.len()
                } else {
                    net.params[idx].bias.len()
                };
                for el in 0..len {
                    let mut plus = net.clone();
                    let mut minus = net.clone();
                    for (n, sign) in [(&mut plus, h), (&mut minus, -h)] {
                        let t = if field == 0 {
                            &mut n.params[idx].weights
                        } else {
                            &mut n.params[idx].bias
                        };
                        t.data_mut()[el] += sign;
                    }
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
                    let got = if field == 0 {
                        grads[idx].weights.data()[el]
                    } else {
                        grads[idx].bias.data()[el]
                    } as f64;
                    // f32 forward noise dominates tiny entries, hence the
                    // absolute floor; per-layer checks without that noise
                    // live in the acceptance suite.
                    assert!(
                        (fd - got).abs() < 1e-4 + 1e-2 * fd.abs().max(got.abs()),
                        "layer {idx} field {field} elem {el}: analytic {got} vs fd {fd}"
                    );
                }
            }
        }
        // Input gradient, spot-checked on a handful of pixels.
        for el in [0usize, 17, 55, 99] {
            let mut plus = input.clone();
            plus.data_mut()[el] += h;
            let mut minus = input.clone();
            minus.data_mut()[el] -= h;
            let fd = (net.forward(&plus).unwrap().data()[0] as f64
                - net.forward(&minus).unwrap().data()[0] as f64)
                / (2.0 * h as f64);
            let got = grad_in.data()[el] as f64;
            assert!(
                (fd - got).abs() < 1e-4 + 1e-2 * fd.abs().max(got.abs()),
                "input elem {el}: {got} vs {fd}"
            );
        }
    }
}
