use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{
    concat, conv2d, conv2d_backward, maxpool2, maxpool2_backward, relu, relu_backward, sigmoid,
    split_channels, upsample_nearest2, upsample_nearest2_backward,
};
use super::tensor::{Real, Tensor};
use crate::imagecore::InputStack;
use crate::rng::rng_from_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Encoder levels (pooling steps).
    pub depth: usize,
    /// Channels at the first level, doubled per level.
    pub base_channels: usize,
    /// Expected square input extent for [`forward_patch`].
    pub input_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            out_channels: 1,
            depth: 4,
            base_channels: 16,
            input_size: 256,
        }
    }
}

impl UNetConfig {
    /// Smallest network worth training at desk scale.
    pub fn micro() -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            input_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Argument(
                "depth, base_channels and channel counts must be >= 1".into(),
            ));
        }
        if self.depth > 12 || self.base_channels.checked_shl(self.depth as u32).is_none() {
            return Err(Error::Argument("network too deep".into()));
        }
        if self.input_size % (1 << self.depth) != 0 || self.input_size == 0 {
            return Err(Error::Argument(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size, self.depth
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `(name, in, out, kernel)` for every conv layer in storage order.
    pub fn layer_specs(&self) -> Vec<(String, usize, usize, usize)> {
        let mut v = Vec::new();
        let mut cin = self.in_channels;
        for l in 0..self.depth {
            let c = self.width(l);
            v.push((format!("enc{l}.conv_a"), cin, c, 3));
            v.push((format!("enc{l}.conv_b"), c, c, 3));
            cin = c;
        }
        let cb = self.width(self.depth);
        v.push(("bottleneck.conv_a".into(), cin, cb, 3));
        v.push(("bottleneck.conv_b".into(), cb, cb, 3));
        for l in (0..self.depth).rev() {
            let c = self.width(l);
            v.push((format!("dec{l}.up_conv"), self.width(l + 1), c, 3));
            v.push((format!("dec{l}.merge_conv"), 2 * c, c, 3));
        }
        v.push(("head.conv".into(), self.base_channels, self.out_channels, 1));
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_specs()
            .iter()
            .map(|(_, i, o, k)| o * i * k * k + o)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Encoder–decoder segmentation network with skip connections.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    config: UNetConfig,
    layers: Vec<ConvLayer<T>>,
}

/// Parameter gradients, aligned with [`UNet::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(model: &UNet<T>) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| (vec![T::zero(); l.weight.len()], vec![T::zero(); l.bias.len()]))
                .collect(),
        }
    }

    pub fn scale(&mut self, k: T) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v = *v * k);
        }
    }

    pub fn flat(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b.iter()).all(|v| v.is_finite()))
    }
}

impl<T: Real> UNet<T> {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let layers = config
            .layer_specs()
            .into_iter()
            .map(|(name, cin, cout, k)| {
                let bound = (6.0 / (cin * k * k) as f64).sqrt();
                let n = cout * cin * k * k;
                let w = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
                ConvLayer {
                    name,
                    weight: Tensor::from_vec(&[cout, cin, k, k], w).expect("sized"),
                    bias: Tensor::zeros(&[cout]),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Every parameter set to zero.
    pub fn zeroed(config: UNetConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        for l in &mut m.layers {
            l.weight.data_mut().fill(T::zero());
            l.bias.data_mut().fill(T::zero());
        }
        Ok(m)
    }

    pub(crate) fn from_layers(config: UNetConfig, layers: Vec<ConvLayer<T>>) -> Result<Self> {
        config.validate()?;
        let specs = config.layer_specs();
        if specs.len() != layers.len() {
            return Err(Error::Format(format!(
                "expected {} layers, found {}",
                specs.len(),
                layers.len()
            )));
        }
        for ((name, cin, cout, k), l) in specs.iter().zip(&layers) {
            if &l.name != name || l.weight.shape() != [*cout, *cin, *k, *k] || l.bias.shape() != [*cout] {
                return Err(Error::Format(format!("layer '{}' does not match the config", l.name)));
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(Error::Format(format!("layer '{}' has non-finite values", l.name)));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> UNet<U> {
        UNet {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    name: l.name.clone(),
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }

    /// Flat parameter `i` (weights then bias, layer by layer).
    pub fn parameter_mut(&mut self, mut i: usize) -> Option<&mut T> {
        for l in &mut self.layers {
            let nw = l.weight.len();
            if i < nw {
                return Some(&mut l.weight.data_mut()[i]);
            }
            i -= nw;
            let nb = l.bias.len();
            if i < nb {
                return Some(&mut l.bias.data_mut()[i]);
            }
            i -= nb;
        }
        None
    }

    /// Visit `(param, grad)` slices in storage order.
    pub(crate) fn for_each_param_mut(
        &mut self,
        grads: &Gradients<T>,
        mut f: impl FnMut(usize, &mut [T], &[T]),
    ) {
        let mut k = 0;
        for (l, (gw, gb)) in self.layers.iter_mut().zip(&grads.layers) {
            f(k, l.weight.data_mut(), gw);
            f(k + 1, l.bias.data_mut(), gb);
            k += 2;
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (c, h, w) = x.chw()?;
        let m = 1 << self.config.depth;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not divisible by {m}")));
        }
        Ok(())
    }

    fn conv(&self, i: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let l = &self.layers[i];
        conv2d(x, &l.weight, &l.bias)
    }

    /// Probability map for a `[C, H, W]` input.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        self.forward_recorded(x, &mut tape)
    }

    /// Forward pass that records what [`Tape::backward`] needs.
    pub fn forward_recorded(&self, x: &Tensor<T>, tape: &mut Tape<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let d = self.config.depth;
        let mut rec = Record::default();
        let mut cur = x.clone();
        let mut li = 0;
        for _ in 0..d {
            let a = relu(&self.conv(li, &cur)?);
            let b = relu(&self.conv(li + 1, &a)?);
            let (pooled, idx) = maxpool2(&b)?;
            rec.enc.push(EncRecord {
                input: cur,
                act_a: a,
                act_b: b,
                argmax: idx,
            });
            cur = pooled;
            li += 2;
        }
        let a = relu(&self.conv(li, &cur)?);
        let b = relu(&self.conv(li + 1, &a)?);
        rec.bottleneck = Some(EncRecord {
            input: cur,
            act_a: a,
            act_b: b.clone(),
            argmax: Vec::new(),
        });
        cur = b;
        li += 2;
        for l in (0..d).rev() {
            let up = upsample_nearest2(&cur)?;
            let u = relu(&self.conv(li, &up)?);
            let cat = concat(&u, &rec.enc[l].act_b)?;
            let m = relu(&self.conv(li + 1, &cat)?);
            rec.dec.push(DecRecord {
                up,
                act_u: u,
                cat,
                act_m: m.clone(),
            });
            cur = m;
            li += 2;
        }
        let logits = self.conv(li, &cur)?;
        rec.head_input = Some(cur);
        let probs = sigmoid(&logits);
        rec.probs = Some(probs.clone());
        tape.record = Some(rec);
        Ok(probs)
    }
}

/// Square-input convenience for inference: checks the configured extent.
pub fn forward_patch<T: Real>(model: &UNet<T>, stack: &InputStack) -> Result<Tensor<T>> {
    let s = model.config().input_size;
    if stack.width() != s || stack.height() != s {
        return Err(Error::Shape(format!(
            "model expects {s}x{s} input, got {}x{}",
            stack.width(),
            stack.height()
        )));
    }
    let x = Tensor::from_vec(&[2, s, s], stack.to_planar::<T>())?;
    model.forward(&x)
}

#[derive(Debug, Clone)]
struct EncRecord<T> {
    input: Tensor<T>,
    act_a: Tensor<T>,
    act_b: Tensor<T>,
    argmax: Vec<u32>,
}

#[derive(Debug, Clone)]
struct DecRecord<T> {
    up: Tensor<T>,
    act_u: Tensor<T>,
    cat: Tensor<T>,
    act_m: Tensor<T>,
}

#[derive(Debug, Clone)]
struct Record<T> {
    enc: Vec<EncRecord<T>>,
    bottleneck: Option<EncRecord<T>>,
    dec: Vec<DecRecord<T>>,
    head_input: Option<Tensor<T>>,
    probs: Option<Tensor<T>>,
}

impl<T> Default for Record<T> {
    fn default() -> Self {
        Self {
            enc: Vec::new(),
            bottleneck: None,
            dec: Vec::new(),
            head_input: None,
            probs: None,
        }
    }
}

/// Activations saved by the last recorded forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    record: Option<Record<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { record: None }
    }

    pub fn is_recorded(&self) -> bool {
        self.record.is_some()
    }

    pub fn probabilities(&self) -> Option<&Tensor<T>> {
        self.record.as_ref().and_then(|r| r.probs.as_ref())
    }

    /// Which ReLUs were active and where each pool took its maximum.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let Some(r) = &self.record else {
            return Vec::new();
        };
        let mut sig = Vec::new();
        let mut push_mask = |t: &Tensor<T>| {
            sig.extend(t.data().iter().map(|&v| u32::from(v > T::zero())));
        };
        for e in r.enc.iter().chain(r.bottleneck.iter()) {
            push_mask(&e.act_a);
            push_mask(&e.act_b);
        }
        for dd in &r.dec {
            push_mask(&dd.act_u);
            push_mask(&dd.act_m);
        }
        for e in &r.enc {
            sig.extend_from_slice(&e.argmax);
        }
        sig
    }

    /// Gradients for a loss whose derivative with respect to the output
    /// probabilities is `grad_probs`.
    pub fn backward(&self, model: &UNet<T>, grad_probs: &Tensor<T>) -> Result<Gradients<T>> {
        let probs = self.probabilities().ok_or_else(not_recorded)?;
        if grad_probs.shape() != probs.shape() {
            return Err(Error::Shape("output gradient has the wrong shape".into()));
        }
        let mut g = grad_probs.clone();
        for (gv, &p) in g.data_mut().iter_mut().zip(probs.data()) {
            *gv = *gv * p * (T::one() - p);
        }
        self.backward_logits(model, &g)
    }

    /// Gradients given the derivative with respect to the pre-sigmoid logits.
    pub fn backward_logits(&self, model: &UNet<T>, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        let mut grads = Gradients::zeros_like(model);
        self.accumulate_logits(model, grad_logits, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Tape::backward_logits`] but adds into existing buffers.
    pub fn accumulate_logits(
        &self,
        model: &UNet<T>,
        grad_logits: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<()> {
        let r = self.record.as_ref().ok_or_else(not_recorded)?;
        let probs = r.probs.as_ref().ok_or_else(not_recorded)?;
        if grad_logits.shape() != probs.shape() {
            return Err(Error::Shape("output gradient has the wrong shape".into()));
        }
        if grads.layers.len() != model.layers.len() {
            return Err(Error::Shape("gradient buffers do not match the model".into()));
        }
        let d = model.config.depth;
        let layers = &model.layers;
        let mut step = |i: usize, input: &Tensor<T>, g: &Tensor<T>, want: bool| -> Result<Option<Tensor<T>>> {
            let (gw, gb) = &mut grads.layers[i];
            conv2d_backward(input, &layers[i].weight, g, gw, gb, want)
        };

        let mut li = layers.len() - 1;
        let head_in = r.head_input.as_ref().ok_or_else(not_recorded)?;
        let mut g = step(li, head_in, grad_logits, true)?.expect("requested");

        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; d];
        for (k, dec) in r.dec.iter().enumerate().rev() {
            let level = d - 1 - k;
            li -= 2;
            relu_backward(&dec.act_m, &mut g);
            let g_cat = step(li + 1, &dec.cat, &g, true)?.expect("requested");
            let (mut g_u, g_skip) = split_channels(&g_cat, dec.act_u.chw()?.0)?;
            skip_grads[level] = Some(g_skip);
            relu_backward(&dec.act_u, &mut g_u);
            let g_up = step(li, &dec.up, &g_u, true)?.expect("requested");
            g = upsample_nearest2_backward(&g_up)?;
        }

        let bott = r.bottleneck.as_ref().ok_or_else(not_recorded)?;
        li -= 2;
        relu_backward(&bott.act_b, &mut g);
        let mut ga = step(li + 1, &bott.act_a, &g, true)?.expect("requested");
        relu_backward(&bott.act_a, &mut ga);
        g = step(li, &bott.input, &ga, d > 0)?.unwrap_or_default();

        for (level, enc) in r.enc.iter().enumerate().rev() {
            li -= 2;
            let mut gb = maxpool2_backward(enc.act_b.shape(), &enc.argmax, &g);
            if let Some(s) = &skip_grads[level] {
                gb.add_assign(s)?;
            }
            relu_backward(&enc.act_b, &mut gb);
            let mut ga = step(li + 1, &enc.act_a, &gb, true)?.expect("requested");
            relu_backward(&enc.act_a, &mut ga);
            g = step(li, &enc.input, &ga, level > 0)?.unwrap_or_default();
        }
        Ok(())
    }
}

fn not_recorded() -> Error {
    Error::State("backward called before a recorded forward pass".into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::{make_input_stack, GrayImage};

    #[test]
    fn default_config_stays_under_two_million_parameters() {
        let c = UNetConfig::default();
        assert_eq!(c.parameter_count(), 1_962_481);
        assert!(c.parameter_count() < 2_000_000);
        let tiny = UNetConfig { depth: 2, base_channels: 4, input_size: 32, ..UNetConfig::default() };
        let m = UNet::<f64>::new(tiny.clone(), 1).unwrap();
        assert_eq!(m.parameter_count(), tiny.parameter_count());
    }

    #[test]
    fn output_shape_and_range() {
        let cfg = UNetConfig { depth: 2, base_channels: 4, input_size: 16, ..UNetConfig::default() };
        let m = UNet::<f32>::new(cfg, 3).unwrap();
        let x = Tensor::full(&[2, 16, 16], 0.5f32);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 16, 16]);
        assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(y, m.forward(&x).unwrap());
        assert!(matches!(m.forward(&Tensor::zeros(&[2, 14, 16])), Err(Error::Shape(_))));
        assert!(matches!(m.forward(&Tensor::zeros(&[1, 16, 16])), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_model_predicts_one_half() {
        let cfg = UNetConfig { depth: 2, base_channels: 4, input_size: 32, ..UNetConfig::default() };
        let m = UNet::<f32>::zeroed(cfg).unwrap();
        let img = GrayImage::filled(32, 32, 0.4, 0.1).unwrap();
        let stack = make_input_stack(&img, 2.0, 1.0).unwrap();
        let y = forward_patch(&m, &stack).unwrap();
        assert_eq!(y.shape(), &[1, 32, 32]);
        assert!(y.data().iter().all(|&p| p == 0.5));
        let wrong = make_input_stack(&GrayImage::filled(16, 16, 0.4, 0.1).unwrap(), 2.0, 1.0).unwrap();
        assert!(matches!(forward_patch(&m, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_requires_forward() {
        let cfg = UNetConfig { depth: 1, base_channels: 2, input_size: 8, ..UNetConfig::default() };
        let m = UNet::<f64>::new(cfg, 1).unwrap();
        let tape = Tape::new();
        assert!(matches!(
            tape.backward(&m, &Tensor::zeros(&[1, 8, 8])),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let cfg = UNetConfig { depth: 2, base_channels: 3, input_size: 8, ..UNetConfig::default() };
        let m = UNet::<f64>::new(cfg, 2).unwrap();
        let mut tape = Tape::new();
        m.forward_recorded(&Tensor::full(&[2, 8, 8], 0.3), &mut tape).unwrap();
        let g = tape.backward(&m, &Tensor::zeros(&[1, 8, 8])).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            UNetConfig { depth: 0, ..UNetConfig::default() },
            UNetConfig { base_channels: 0, ..UNetConfig::default() },
            UNetConfig { input_size: 100, ..UNetConfig::default() },
        ] {
            assert!(UNet::<f32>::new(cfg, 0).is_err());
        }
    }
}
