//! Small multilayer embedding network with optional fake quantization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, ParamId, Tape, Var};
use crate::quant::{derive_params, BitWidth, Granularity, QuantParams, QuantScheme, RangeObserver};
use crate::tensor::{Axis, Tensor};

/// Fully connected layer; `weight` is `[out, in]`, `bias` is `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    /// Per-output-row weight params restored from a quantized model file.
    /// When present they replace the live min/max derivation until the
    /// weights are next updated.
    pub frozen_weight_params: Option<Vec<QuantParams>>,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || bias.len() != weight.shape()[0] {
            return Err(Error::dim(format!(
                "weight {:?} and bias {:?} do not compose",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            weight,
            bias,
            frozen_weight_params: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Per-channel weight quantization over output rows.
    pub fn weight_scheme(&self, bits: BitWidth) -> Result<QuantScheme> {
        match &self.frozen_weight_params {
            Some(params) if params.first().map(|p| p.bit_width) == Some(bits) => Ok(QuantScheme::PerChannel {
                axis: Axis(0),
                params: params.clone(),
            }),
            _ => derive_params(&self.weight, bits, Granularity::PerChannel(Axis(0))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(LinearLayer),
    Relu,
}

/// Frozen activation calibration of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantState {
    pub bit_width: BitWidth,
    /// One entry per activation site, in forward order.
    pub activation_params: Vec<QuantParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    FullPrecision,
    Quantized,
}

/// Layer stack producing L2-normalized embeddings.
///
/// Activation sites are the output of every ReLU plus the output of the
/// final linear layer (before normalization).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    layers: Vec<Layer>,
    quant: Option<QuantState>,
}

impl EmbeddingNet {
    /// Validates that consecutive linear layers compose and that the stack
    /// ends in a linear embedding head.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let mut prev: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::Linear(l) = layer {
                if let Some(p) = prev {
                    if p != l.in_dim() {
                        return Err(Error::dim(format!(
                            "layer {i} expects {} inputs but previous layer emits {p}",
                            l.in_dim()
                        )));
                    }
                }
                prev = Some(l.out_dim());
            }
        }
        match layers.last() {
            Some(Layer::Linear(_)) => Ok(Self { layers, quant: None }),
            _ => Err(Error::dim("network must end with a linear embedding head")),
        }
    }

    /// `dims = [in, hidden..., embed]` with ReLU between linear layers.
    /// Weights are He-uniform from `seed`; biases start at zero.
    pub fn mlp(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::domain(format!("invalid layer dims {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let w: Vec<f32> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let layer = LinearLayer::new(Tensor::new(vec![fan_out, fan_in], w)?, Tensor::zeros(&[fan_out]))?;
            layers.push(Layer::Linear(layer));
            if i + 2 < dims.len() {
                layers.push(Layer::Relu);
            }
        }
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.linears().next().map(|l| l.in_dim()).unwrap_or(0)
    }

    pub fn embed_dim(&self) -> usize {
        self.linears().last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn linears(&self) -> impl Iterator<Item = &LinearLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Linear(l) => Some(l),
            Layer::Relu => None,
        })
    }

    pub fn linears_mut(&mut self) -> impl Iterator<Item = &mut LinearLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Linear(l) => Some(l),
            Layer::Relu => None,
        })
    }

    /// Layer indices whose outputs carry an activation quantizer.
    pub fn activation_sites(&self) -> Vec<usize> {
        let last = self.layers.len() - 1;
        self.layers
            .iter()
            .enumerate()
            .filter(|(i, l)| matches!(l, Layer::Relu) || *i == last)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn quant_state(&self) -> Option<&QuantState> {
        self.quant.as_ref()
    }

    pub fn is_calibrated(&self) -> bool {
        self.quant.is_some()
    }

    pub fn set_quant_state(&mut self, state: QuantState) -> Result<()> {
        let sites = self.activation_sites().len();
        if state.activation_params.len() != sites {
            return Err(Error::dim(format!(
                "{} activation params for {sites} activation sites",
                state.activation_params.len()
            )));
        }
        self.quant = Some(state);
        Ok(())
    }

    pub fn clear_quant_state(&mut self) {
        self.quant = None;
    }

    /// Quantized mode when calibrated, full precision otherwise.
    pub fn inference_mode(&self) -> Mode {
        if self.is_calibrated() {
            Mode::Quantized
        } else {
            Mode::FullPrecision
        }
    }

    /// Total parameter count (weights and biases).
    pub fn param_count(&self) -> usize {
        self.linears().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Same layer shapes, ignoring weights and calibration.
    pub fn same_architecture(&self, other: &EmbeddingNet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| match (a, b) {
                (Layer::Relu, Layer::Relu) => true,
                (Layer::Linear(a), Layer::Linear(b)) => a.weight.shape() == b.weight.shape(),
                _ => false,
            })
    }

    fn param_ids(layer_index: usize) -> (ParamId, ParamId) {
        (2 * layer_index, 2 * layer_index + 1)
    }

    /// Records one forward pass and returns the normalized embeddings with
    /// the tape needed for back-propagation.
    pub fn forward_embed(&self, x: &Tensor, mode: Mode) -> Result<EmbedPass> {
        self.forward_inner(x, mode, None)
    }

    /// Observing passes stop before normalization so that all-zero
    /// activations (e.g. a zero input stream) can still be recorded.
    fn forward_inner(&self, x: &Tensor, mode: Mode, mut observers: Option<&mut [RangeObserver]>) -> Result<EmbedPass> {
        if x.rank() != 2 || x.cols() != self.input_dim() {
            return Err(Error::dim(format!(
                "input shape {:?} does not match input dim {}",
                x.shape(),
                self.input_dim()
            )));
        }
        let quant = match mode {
            Mode::FullPrecision => None,
            Mode::Quantized => Some(
                self.quant
                    .as_ref()
                    .ok_or_else(|| Error::state("quantized forward requires calibrated activations"))?,
            ),
        };
        let mut tape = Tape::new();
        let mut h = tape.input(x.clone());
        let mut params = Vec::new();
        let last = self.layers.len() - 1;
        let mut site = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear(l) => {
                    let (wid, bid) = Self::param_ids(i);
                    let w = tape.param(wid, l.weight.clone());
                    let b = tape.param(bid, l.bias.clone());
                    params.push((i, w, b));
                    let w_eff = match quant {
                        Some(q) => tape.fake_quant_scheme(w, &l.weight_scheme(q.bit_width)?)?,
                        None => w,
                    };
                    h = tape.linear(h, w_eff, b)?;
                }
                Layer::Relu => h = tape.relu(h),
            }
            if matches!(layer, Layer::Relu) || i == last {
                if let Some(obs) = observers.as_deref_mut() {
                    obs[site].update(tape.value(h));
                }
                if let Some(q) = quant {
                    h = tape.fake_quant(h, &q.activation_params[site]);
                }
                site += 1;
            }
        }
        let pre_norm = h;
        let output = if observers.is_some() { h } else { tape.l2_normalize(h)? };
        Ok(EmbedPass {
            tape,
            output,
            pre_norm,
            params,
        })
    }

    /// Full-precision forward that feeds every activation site into its
    /// observer.
    pub fn observe(&self, x: &Tensor, observers: &mut [RangeObserver]) -> Result<()> {
        let sites = self.activation_sites().len();
        if observers.len() != sites {
            return Err(Error::dim(format!("{} observers for {sites} sites", observers.len())));
        }
        self.forward_inner(x, Mode::FullPrecision, Some(observers)).map(|_| ())
    }

    /// Convenience forward returning only the embeddings.
    pub fn embed(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_embed(x, mode)?.embedding().clone())
    }

    /// Applies an optimizer update to the shadow weights; any frozen
    /// weight params are dropped because they no longer match the weights.
    pub fn apply_update(&mut self, grads: &NetGrads, sgd: &mut Sgd) -> Result<()> {
        if grads.layers.len() != self.linears().count() {
            return Err(Error::dim(format!(
                "{} gradient entries for {} linear layers",
                grads.layers.len(),
                self.linears().count()
            )));
        }
        for (slot, (layer, g)) in self.linears_mut().zip(&grads.layers).enumerate() {
            sgd.update(2 * slot, &mut layer.weight, &g.weight)?;
            sgd.update(2 * slot + 1, &mut layer.bias, &g.bias)?;
            layer.frozen_weight_params = None;
        }
        Ok(())
    }

    /// Clones of every weight and bias in order, for hashing or comparison.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.linears().flat_map(|l| [&l.weight, &l.bias]).collect()
    }
}

/// One recorded forward pass.
#[derive(Debug)]
pub struct EmbedPass {
    tape: Tape,
    output: Var,
    pre_norm: Var,
    params: Vec<(usize, Var, Var)>,
}

impl EmbedPass {
    pub fn embedding(&self) -> &Tensor {
        self.tape.value(self.output)
    }

    /// Embedding-head output before normalization (after its activation
    /// quantizer in quantized mode).
    pub fn pre_norm(&self) -> &Tensor {
        self.tape.value(self.pre_norm)
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn output_var(&self) -> Var {
        self.output
    }

    /// Back-propagates `grad` (d objective / d embedding) to the weights.
    pub fn backward(self, grad: Tensor) -> Result<NetGrads> {
        let EmbedPass { tape, output, params, .. } = self;
        let g = tape.backward(output, grad)?;
        Self::collect(&g, &params)
    }

    /// Hands out the tape so callers can extend the graph (e.g. with a
    /// classifier head) before back-propagating.
    pub fn into_parts(self) -> (Tape, Var, PassParams) {
        (self.tape, self.output, PassParams(self.params))
    }

    fn collect(g: &Gradients, params: &[(usize, Var, Var)]) -> Result<NetGrads> {
        let layers = params
            .iter()
            .map(|&(_, w, b)| {
                let weight = g
                    .wrt(w)
                    .cloned()
                    .ok_or_else(|| Error::state("weight did not receive a gradient"))?;
                let bias = g
                    .wrt(b)
                    .cloned()
                    .ok_or_else(|| Error::state("bias did not receive a gradient"))?;
                Ok(LinearGrad { weight, bias })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NetGrads { layers })
    }
}

/// Parameter handles of a pass whose tape was taken with
/// [`EmbedPass::into_parts`].
#[derive(Debug)]
pub struct PassParams(Vec<(usize, Var, Var)>);

impl PassParams {
    pub fn gradients(&self, g: &Gradients) -> Result<NetGrads> {
        EmbedPass::collect(g, &self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients for every linear layer, in forward order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LinearGrad>,
}

impl NetGrads {
    /// Frobenius norm of each layer's weight gradient.
    pub fn weight_norms(&self) -> Vec<f32> {
        self.layers
            .iter()
            .map(|g| g.weight.data().iter().map(|v| v * v).sum::<f32>().sqrt())
            .collect()
    }
}

/// SGD with momentum and L2 weight decay:
/// `v <- momentum * v + grad + weight_decay * w`, `w <- w - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates one parameter slot in place.
    pub fn update(&mut self, slot: usize, w: &mut Tensor, grad: &Tensor) -> Result<()> {
        if w.shape() != grad.shape() {
            return Err(Error::dim(format!(
                "gradient shape {:?} != parameter shape {:?}",
                grad.shape(),
                w.shape()
            )));
        }
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, None);
        }
        let v = self.velocity[slot].get_or_insert_with(|| Tensor::zeros(w.shape()));
        if v.shape() != w.shape() {
            return Err(Error::dim(format!("slot {slot} changed shape")));
        }
        let (m, wd, lr) = (self.momentum, self.weight_decay, self.lr);
        for ((wv, &g), vv) in w.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
            *vv = m * *vv + g + wd * *wv;
            *wv -= lr * *vv;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_net(d: usize) -> EmbeddingNet {
        EmbeddingNet::from_layers(vec![Layer::Linear(
            LinearLayer::new(Tensor::eye(d), Tensor::zeros(&[d])).unwrap(),
        )])
        .unwrap()
    }

    #[test]
    fn fp_identity_is_normalization() {
        let net = identity_net(2);
        let f = net.embed(&Tensor::from_rows(&[[3.0f32, 4.0]]).unwrap(), Mode::FullPrecision).unwrap();
        assert!((f.data()[0] - 0.6).abs() < 1e-6);
        assert!((f.data()[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn quantized_without_calibration_is_state_error() {
        let net = identity_net(2);
        let x = Tensor::from_rows(&[[3.0f32, 4.0]]).unwrap();
        assert!(matches!(net.forward_embed(&x, Mode::Quantized), Err(Error::State(_))));
    }

    #[test]
    fn mlp_shapes_and_sites() {
        let net = EmbeddingNet::mlp(&[8, 16, 16, 4], 1).unwrap();
        assert_eq!(net.layers().len(), 5);
        assert_eq!(net.activation_sites(), vec![1, 3, 4]);
        assert_eq!(net.input_dim(), 8);
        assert_eq!(net.embed_dim(), 4);
        assert_eq!(net.param_count(), 8 * 16 + 16 + 16 * 16 + 16 + 16 * 4 + 4);
        assert_eq!(EmbeddingNet::mlp(&[8, 16, 16, 4], 1).unwrap(), net);
    }

    #[test]
    fn layers_must_compose() {
        let a = LinearLayer::new(Tensor::zeros(&[3, 2]), Tensor::zeros(&[3])).unwrap();
        let b = LinearLayer::new(Tensor::zeros(&[2, 4]), Tensor::zeros(&[2])).unwrap();
        assert!(EmbeddingNet::from_layers(vec![Layer::Linear(a), Layer::Relu, Layer::Linear(b)]).is_err());
    }

    #[test]
    fn sgd_examples() {
        let mut w = Tensor::vector(vec![1.0]).unwrap();
        let g = Tensor::vector(vec![0.5]).unwrap();
        Sgd::new(0.0, 0.9, 5e-4).update(0, &mut w, &g).unwrap();
        assert_eq!(w.data(), &[1.0]);

        let mut sgd = Sgd::new(0.1, 0.0, 0.0);
        sgd.update(0, &mut w, &g).unwrap();
        assert!((w.data()[0] - 0.95).abs() < 1e-7);

        let mut w = Tensor::vector(vec![0.0]).unwrap();
        let mut sgd = Sgd::new(0.1, 0.9, 0.0);
        let one = Tensor::vector(vec![1.0]).unwrap();
        sgd.update(0, &mut w, &one).unwrap();
        assert!((w.data()[0] + 0.1).abs() < 1e-7);
        sgd.update(0, &mut w, &one).unwrap();
        assert!((w.data()[0] + 0.29).abs() < 1e-6);

        let mut w = Tensor::zeros(&[2]);
        assert!(matches!(sgd.update(1, &mut w, &one), Err(Error::Dimension(_))));
    }
}
