//! FPD-M-net and U-net builders.
//!
//! A network is an explicit list of layers, each naming the earlier layers
//! it reads from. Parameters live in a flat registry of named tensors; the
//! forward pass wraps them as graph leaves so gradients can be collected
//! after [`Var::backward`].
//!
//! Layout of the M-net variant for depth `D` and base width `F`:
//!
//! * encoder level `l` (`0..D`) runs a block of two conv units with
//!   dropout in between and emits the concatenation of both unit outputs
//!   (`2·F·2^l` channels), then 2×2 max pooling;
//! * the left leg max-pools the raw input once per level and concatenates
//!   it onto the input of every level below the first, bottleneck included;
//! * the decoder upsamples, concatenates the encoder output of the same
//!   level, and runs the same block;
//! * the right leg projects every decoder output below full resolution to
//!   `max(F/4, 1)` channels with a 1×1 conv and upsamples it back to full
//!   size;
//! * the head concatenates the right-leg outputs with the last decoder
//!   output and applies a 1×1 conv and a sigmoid.
//!
//! U-net keeps only the encoder-decoder skips: no legs and no within-block
//! concatenation.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    batch_norm, concat_channels, conv2d, dropout, max_pool2x2, relu, sigmoid, upsample2x,
    BatchNormState, Mode, Var,
};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    FpdMnet,
    Unet,
}

/// Placement of batch normalisation inside a conv unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BnOrder {
    /// Conv → BN → ReLU (variant B, the default).
    BeforeRelu,
    /// Conv → ReLU → BN (variant A).
    AfterRelu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub bn_order: BnOrder,
    /// Number of 2×2 pooling steps.
    pub depth: usize,
    /// Feature maps at the first level; doubles per level.
    pub base_features: usize,
    pub dropout_p: f64,
    pub input_height: usize,
    pub input_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::FpdMnet,
            bn_order: BnOrder::BeforeRelu,
            depth: 4,
            base_features: 64,
            dropout_p: 0.2,
            input_height: 368,
            input_width: 496,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.base_features == 0 {
            return Err(Error::Config("base features must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout probability must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        self.check_input_size(self.input_height, self.input_width)
    }

    pub fn check_input_size(&self, height: usize, width: usize) -> Result<()> {
        let m = self.size_multiple();
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(Error::Config(format!(
                "input {}×{} is not divisible by 2^{} = {}",
                height, width, self.depth, m
            )));
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Channel width of the right-leg projections.
    pub fn leg_features(&self) -> usize {
        (self.base_features / 4).max(1)
    }

    /// Short name used on the command line and in checkpoints.
    pub fn variant_name(&self) -> &'static str {
        match (self.arch, self.bn_order) {
            (Arch::FpdMnet, BnOrder::BeforeRelu) => "mnet-b",
            (Arch::FpdMnet, BnOrder::AfterRelu) => "mnet-a",
            (Arch::Unet, BnOrder::BeforeRelu) => "unet",
            (Arch::Unet, BnOrder::AfterRelu) => "unet-a",
        }
    }

    pub fn parse_variant(name: &str) -> Result<(Arch, BnOrder)> {
        match name {
            "mnet-b" => Ok((Arch::FpdMnet, BnOrder::BeforeRelu)),
            "mnet-a" => Ok((Arch::FpdMnet, BnOrder::AfterRelu)),
            "unet" | "unet-b" => Ok((Arch::Unet, BnOrder::BeforeRelu)),
            "unet-a" => Ok((Arch::Unet, BnOrder::AfterRelu)),
            other => Err(Error::Config(format!(
                "unknown architecture {:?} (expected mnet-b, mnet-a or unet)",
                other
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Input,
    Conv {
        kernel: usize,
        in_channels: usize,
        weight: usize,
        bias: usize,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        state: usize,
    },
    Relu,
    Sigmoid,
    Dropout {
        p: f64,
    },
    MaxPool,
    Upsample,
    Concat,
}

impl LayerKind {
    pub fn label(&self) -> String {
        match self {
            LayerKind::Input => "input".into(),
            LayerKind::Conv { kernel, .. } => format!("conv{}x{}", kernel, kernel),
            LayerKind::BatchNorm { .. } => "batchnorm".into(),
            LayerKind::Relu => "relu".into(),
            LayerKind::Sigmoid => "sigmoid".into(),
            LayerKind::Dropout { p } => format!("dropout({})", p),
            LayerKind::MaxPool => "maxpool2x2".into(),
            LayerKind::Upsample => "upsample2x".into(),
            LayerKind::Concat => "concat".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
    pub channels: usize,
    /// Downsampling factor relative to the network input.
    pub scale: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Float> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

pub struct ModelGraph<T: Float> {
    config: ModelConfig,
    layers: Vec<Layer>,
    params: Vec<Param<T>>,
    bn_states: Vec<(String, BatchNormState<T>)>,
    mode: Mode,
    output: usize,
}

pub fn build_fpd_mnet<T: Float>(config: &ModelConfig, seed: u64) -> Result<ModelGraph<T>> {
    let config = ModelConfig {
        arch: Arch::FpdMnet,
        ..config.clone()
    };
    ModelGraph::build(&config, seed)
}

pub fn build_unet<T: Float>(config: &ModelConfig, seed: u64) -> Result<ModelGraph<T>> {
    let config = ModelConfig {
        arch: Arch::Unet,
        ..config.clone()
    };
    ModelGraph::build(&config, seed)
}

struct Builder<'a, T: Float> {
    config: &'a ModelConfig,
    rng: ChaCha8Rng,
    layers: Vec<Layer>,
    params: Vec<Param<T>>,
    bn_states: Vec<(String, BatchNormState<T>)>,
}

impl<'a, T: Float> Builder<'a, T> {
    fn push(&mut self, name: String, kind: LayerKind, inputs: Vec<usize>, channels: usize) -> usize {
        let scale = inputs.first().map(|&i| self.layers[i].scale).unwrap_or(1);
        let scale = match kind {
            LayerKind::MaxPool => scale * 2,
            LayerKind::Upsample => scale / 2,
            _ => scale,
        };
        self.layers.push(Layer {
            name,
            kind,
            inputs,
            channels,
            scale,
        });
        self.layers.len() - 1
    }

    fn channels(&self, layer: usize) -> usize {
        self.layers[layer].channels
    }

    fn add_param(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Param {
            name,
            value,
            grad: None,
        });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, input: usize, out_channels: usize, kernel: usize) -> usize {
        let in_channels = self.channels(input);
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let shape = [out_channels, in_channels, kernel, kernel];
        let rng = &mut self.rng;
        let w = Tensor::from_fn(&shape, |_| T::from_f64(rng.gen_range(-limit..limit)));
        let weight = self.add_param(format!("{}.weight", name), w);
        let bias = self.add_param(format!("{}.bias", name), Tensor::zeros(&[out_channels]));
        self.push(
            name.to_string(),
            LayerKind::Conv {
                kernel,
                in_channels,
                weight,
                bias,
            },
            vec![input],
            out_channels,
        )
    }

    fn batch_norm(&mut self, name: &str, input: usize) -> usize {
        let c = self.channels(input);
        let gamma = self.add_param(format!("{}.gamma", name), Tensor::ones(&[c]));
        let beta = self.add_param(format!("{}.beta", name), Tensor::zeros(&[c]));
        self.bn_states.push((name.to_string(), BatchNormState::new(c)));
        let state = self.bn_states.len() - 1;
        self.push(
            name.to_string(),
            LayerKind::BatchNorm { gamma, beta, state },
            vec![input],
            c,
        )
    }

    fn simple(&mut self, name: String, kind: LayerKind, input: usize) -> usize {
        let c = self.channels(input);
        self.push(name, kind, vec![input], c)
    }

    fn concat(&mut self, name: String, inputs: Vec<usize>) -> usize {
        let c = inputs.iter().map(|&i| self.channels(i)).sum();
        self.push(name, LayerKind::Concat, inputs, c)
    }

    /// 3×3 conv followed by BN and ReLU in the configured order.
    fn unit(&mut self, name: &str, input: usize, features: usize) -> usize {
        let conv = self.conv(&format!("{}.conv", name), input, features, 3);
        match self.config.bn_order {
            BnOrder::BeforeRelu => {
                let bn = self.batch_norm(&format!("{}.bn", name), conv);
                self.simple(format!("{}.relu", name), LayerKind::Relu, bn)
            }
            BnOrder::AfterRelu => {
                let act = self.simple(format!("{}.relu", name), LayerKind::Relu, conv);
                self.batch_norm(&format!("{}.bn", name), act)
            }
        }
    }

    fn block(&mut self, name: &str, input: usize, features: usize) -> usize {
        let first = self.unit(&format!("{}.unit1", name), input, features);
        let dropped = self.simple(
            format!("{}.dropout", name),
            LayerKind::Dropout {
                p: self.config.dropout_p,
            },
            first,
        );
        let second = self.unit(&format!("{}.unit2", name), dropped, features);
        match self.config.arch {
            Arch::FpdMnet => self.concat(format!("{}.concat", name), vec![first, second]),
            Arch::Unet => second,
        }
    }

    fn build(mut self) -> (Vec<Layer>, Vec<Param<T>>, Vec<(String, BatchNormState<T>)>, usize) {
        let cfg = self.config;
        let mnet = cfg.arch == Arch::FpdMnet;
        let depth = cfg.depth;
        let base = cfg.base_features;

        let input = self.push("input".into(), LayerKind::Input, vec![], 1);
        let mut legs = vec![input];
        if mnet {
            for l in 1..=depth {
                let prev = legs[l - 1];
                legs.push(self.simple(format!("left_leg{}.pool", l), LayerKind::MaxPool, prev));
            }
        }

        let mut x = input;
        let mut skips = Vec::with_capacity(depth);
        for l in 0..depth {
            if mnet && l > 0 {
                x = self.concat(format!("enc{}.left_leg", l + 1), vec![x, legs[l]]);
            }
            let out = self.block(&format!("enc{}", l + 1), x, base << l);
            skips.push(out);
            x = self.simple(format!("enc{}.pool", l + 1), LayerKind::MaxPool, out);
        }
        if mnet {
            x = self.concat("bottleneck.left_leg".into(), vec![x, legs[depth]]);
        }
        x = self.block("bottleneck", x, base << depth);

        let mut right = Vec::new();
        for l in (0..depth).rev() {
            let up = self.simple(format!("dec{}.upsample", l + 1), LayerKind::Upsample, x);
            let cat = self.concat(format!("dec{}.skip", l + 1), vec![up, skips[l]]);
            x = self.block(&format!("dec{}", l + 1), cat, base << l);
            if mnet && l > 0 {
                let mut r = self.conv(&format!("right_leg{}.proj", l + 1), x, cfg.leg_features(), 1);
                for step in 0..l {
                    r = self.simple(
                        format!("right_leg{}.upsample{}", l + 1, step + 1),
                        LayerKind::Upsample,
                        r,
                    );
                }
                right.push(r);
            }
        }

        let head_in = if right.is_empty() {
            x
        } else {
            right.push(x);
            self.concat("head.concat".into(), right)
        };
        let conv = self.conv("head.conv", head_in, 1, 1);
        let out = self.simple("head.sigmoid".into(), LayerKind::Sigmoid, conv);
        (self.layers, self.params, self.bn_states, out)
    }
}

impl<T: Float> ModelGraph<T> {
    /// Builds the network described by `config`, initialising convolution
    /// weights Glorot-uniform from `seed`, biases and BN shifts at zero and
    /// BN scales at one.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let builder = Builder {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            layers: Vec::new(),
            params: Vec::new(),
            bn_states: Vec::new(),
        };
        let (layers, params, bn_states, output) = builder.build();
        Ok(Self {
            config: config.clone(),
            layers,
            params,
            bn_states,
            mode: Mode::Train,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[(String, BatchNormState<T>)] {
        &self.bn_states
    }

    pub fn bn_states_mut(&mut self) -> &mut [(String, BatchNormState<T>)] {
        &mut self.bn_states
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Retargets the expected input size; parameters are size independent.
    pub fn set_input_size(&mut self, height: usize, width: usize) -> Result<()> {
        self.config.check_input_size(height, width)?;
        self.config.input_height = height;
        self.config.input_width = width;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.params)
    }

    /// Wraps every parameter as a gradient-tracking graph leaf.
    pub fn param_vars(&self) -> Vec<Var<T>> {
        self.params
            .iter()
            .map(|p| Var::parameter(p.value.clone()))
            .collect()
    }

    /// Copies leaf gradients from `vars` (as returned by
    /// [`param_vars`](Self::param_vars)) into the registry.
    pub fn store_grads(&mut self, vars: &[Var<T>], accumulate: bool) -> Result<()> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} gradient leaves for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(vars) {
            let g = v.grad();
            match (p.grad.as_mut(), g) {
                (Some(existing), Some(g)) if accumulate => existing.add_assign(&g)?,
                (_, g) => {
                    if g.is_some() || !accumulate {
                        p.grad = g;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [n, 1, h, w] if *n > 0 => {
                if (*h, *w) != (self.config.input_height, self.config.input_width) {
                    return Err(Error::Shape(format!(
                        "model expects {}×{} inputs, got {}×{}",
                        self.config.input_height, self.config.input_width, h, w
                    )));
                }
                Ok(())
            }
            _ => Err(Error::Shape(format!(
                "model expects an N×1×H×W batch, got {:?}",
                shape
            ))),
        }
    }

    /// Runs the layer list on `input` using `params` in registry order.
    ///
    /// BN running statistics are updated in training mode. Intermediate
    /// values are released as soon as no later layer reads them.
    pub fn trace<R: Rng + ?Sized>(
        &mut self,
        input: &Var<T>,
        params: &[Var<T>],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var<T>> {
        self.check_batch(input.shape())?;
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} parameter values for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let mut last_use = vec![0usize; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate() {
            for &src in &layer.inputs {
                last_use[src] = i;
            }
        }
        last_use[self.output] = usize::MAX;

        let mut values: Vec<Option<Var<T>>> = vec![None; self.layers.len()];
        for i in 0..self.layers.len() {
            let layer = &self.layers[i];
            let arg = |k: usize| -> Result<&Var<T>> {
                values[layer.inputs[k]]
                    .as_ref()
                    .ok_or_else(|| Error::Contract(format!("{} read a released value", layer.name)))
            };
            let out = match &layer.kind {
                LayerKind::Input => input.clone(),
                LayerKind::Conv { weight, bias, .. } => {
                    conv2d(arg(0)?, &params[*weight], &params[*bias])?
                }
                LayerKind::BatchNorm { gamma, beta, state } => {
                    let x = arg(0)?.clone();
                    let state = &mut self.bn_states[*state].1;
                    batch_norm(&x, &params[*gamma], &params[*beta], state, mode)?
                }
                LayerKind::Relu => relu(arg(0)?),
                LayerKind::Sigmoid => sigmoid(arg(0)?),
                LayerKind::Dropout { p } => dropout(arg(0)?, *p, mode, rng)?,
                LayerKind::MaxPool => max_pool2x2(arg(0)?)?,
                LayerKind::Upsample => upsample2x(arg(0)?)?,
                LayerKind::Concat => {
                    let parts = (0..layer.inputs.len())
                        .map(|k| arg(k).cloned())
                        .collect::<Result<Vec<_>>>()?;
                    concat_channels(&parts)?
                }
            };
            for &src in &self.layers[i].inputs {
                if last_use[src] == i {
                    values[src] = None;
                }
            }
            values[i] = Some(out);
        }
        values[self.output]
            .take()
            .ok_or_else(|| Error::Contract("network produced no output".into()))
    }

    /// Forward pass in the model's current mode without recording a graph.
    pub fn forward<R: Rng + ?Sized>(&mut self, batch: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
        let params: Vec<Var<T>> = self
            .params
            .iter()
            .map(|p| Var::constant(p.value.clone()))
            .collect();
        let mode = self.mode;
        let out = self.trace(&Var::constant(batch.clone()), &params, mode, rng)?;
        Ok(out.value().clone())
    }

    /// Deterministic inference-mode forward pass; the model's mode is left
    /// unchanged.
    pub fn infer(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let saved = self.mode;
        self.mode = Mode::Infer;
        let out = self.forward(batch, &mut ChaCha8Rng::seed_from_u64(0));
        self.mode = saved;
        out
    }

    /// Human-readable layer table.
    pub fn summary(&self) -> ModelSummary<'_, T> {
        ModelSummary(self)
    }
}

pub fn param_count<T: Float>(params: &[Param<T>]) -> usize {
    params.iter().map(|p| p.value.len()).sum()
}

pub struct ModelSummary<'a, T: Float>(&'a ModelGraph<T>);

impl<T: Float> fmt::Display for ModelSummary<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.0;
        let cfg = &m.config;
        writeln!(
            f,
            "{} depth={} base={} dropout={} input={}x{}",
            cfg.variant_name(),
            cfg.depth,
            cfg.base_features,
            cfg.dropout_p,
            cfg.input_height,
            cfg.input_width
        )?;
        writeln!(
            f,
            "{:>4}  {:<28} {:<12} {:>8} {:>9} {:>10}  inputs",
            "#", "name", "kind", "channels", "size", "params"
        )?;
        for (i, layer) in m.layers.iter().enumerate() {
            let params = match layer.kind {
                LayerKind::Conv { weight, bias, .. } => {
                    m.params[weight].value.len() + m.params[bias].value.len()
                }
                LayerKind::BatchNorm { gamma, beta, .. } => {
                    m.params[gamma].value.len() + m.params[beta].value.len()
                }
                _ => 0,
            };
            let size = format!(
                "{}x{}",
                cfg.input_height / layer.scale.max(1),
                cfg.input_width / layer.scale.max(1)
            );
            let inputs: Vec<String> = layer.inputs.iter().map(|i| i.to_string()).collect();
            writeln!(
                f,
                "{:>4}  {:<28} {:<12} {:>8} {:>9} {:>10}  {}",
                i,
                layer.name,
                layer.kind.label(),
                layer.channels,
                size,
                params,
                inputs.join(",")
            )?;
        }
        write!(f, "total parameters: {}", m.param_count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(arch: Arch, depth: usize, base: usize) -> ModelConfig {
        ModelConfig {
            arch,
            depth,
            base_features: base,
            input_height: 16,
            input_width: 16,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let cfg = ModelConfig {
            input_height: 20,
            ..small(Arch::FpdMnet, 3, 2)
        };
        assert!(matches!(
            ModelGraph::<f32>::build(&cfg, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn parameter_names_are_unique() {
        let m = ModelGraph::<f32>::build(&small(Arch::FpdMnet, 3, 4), 0).unwrap();
        let mut names: Vec<&str> = m.params().iter().map(|p| p.name.as_str()).collect();
        let before = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), before);
    }

    #[test]
    fn empty_registry_counts_zero() {
        assert_eq!(param_count::<f32>(&[]), 0);
    }

    #[test]
    fn single_conv_counts_weights_and_bias() {
        let params = vec![
            Param {
                name: "w".into(),
                value: Tensor::<f32>::zeros(&[1, 1, 3, 3]),
                grad: None,
            },
            Param {
                name: "b".into(),
                value: Tensor::<f32>::zeros(&[1]),
                grad: None,
            },
        ];
        assert_eq!(param_count(&params), 10);
    }

    #[test]
    fn last_layer_is_sigmoid_with_one_channel() {
        for arch in [Arch::FpdMnet, Arch::Unet] {
            let m = ModelGraph::<f32>::build(&small(arch, 2, 2), 0).unwrap();
            let last = m.layers().last().unwrap();
            assert_eq!(last.kind, LayerKind::Sigmoid);
            assert_eq!(last.channels, 1);
            assert_eq!(last.scale, 1);
        }
    }

    #[test]
    fn forward_rejects_wrong_size() {
        let mut m = ModelGraph::<f32>::build(&small(Arch::Unet, 1, 2), 0).unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(matches!(m.infer(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn variant_names_round_trip() {
        for name in ["mnet-b", "mnet-a", "unet", "unet-a"] {
            let (arch, bn_order) = ModelConfig::parse_variant(name).unwrap();
            let cfg = ModelConfig {
                arch,
                bn_order,
                ..Default::default()
            };
            assert_eq!(cfg.variant_name(), name);
        }
        assert!(ModelConfig::parse_variant("resnet").is_err());
    }
}
