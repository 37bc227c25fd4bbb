//! Three-level U-Net for cell-vs-background masks.
//!
//! Encoder levels double the channel width and halve resolution; the decoder
//! upsamples (nearest ×2 followed by a 3×3 conv), concatenates the encoder
//! output at the same resolution, and applies two more 3×3 convs. A 1×1 conv
//! plus sigmoid produces the per-pixel probability.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, UNET_MAGIC};
use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, morph, normalize01, to_grayscale, BinaryMask, MorphOp, RasterImage};
use crate::layers::{
    concat_channels, conv2d_backward_with, conv2d_forward, maxpool2_backward, maxpool2_forward, relu, relu_backward,
    sigmoid, sigmoid_backward, split_channels, upsample2_backward, upsample2_forward, ActivationPattern, LayerParams,
    PoolIndices,
};
use crate::optim::{adam_step, binary_cross_entropy_pixelwise, AdamConfig, AdamState};
use crate::stream;
use crate::tensor::{Scalar, Tensor};

const DEPTH: usize = 3;

// layer slots, in declaration (and checkpoint) order
const ENC: [[usize; 2]; DEPTH] = [[0, 1], [2, 3], [4, 5]];
const BOTTLENECK: [usize; 2] = [6, 7];
/// Per decoder level, deepest first: [up-conv, conv a, conv b].
const DEC: [[usize; 3]; DEPTH] = [[8, 9, 10], [11, 12, 13], [14, 15, 16]];
const HEAD: usize = 17;
const LAYER_COUNT: usize = 18;

#[derive(Clone, Debug, PartialEq)]
pub struct UNetModel<T = f32> {
    base_width: usize,
    layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> UNetModel<T> {
    /// Encoder widths are `base, 2·base, 4·base`; the bottleneck is `8·base`.
    pub fn new<R: Rng + ?Sized>(base_width: usize, rng: &mut R) -> Result<Self> {
        if base_width == 0 {
            return Err(Error::InvalidArgument("U-Net base width must be positive".into()));
        }
        let w = |level: usize| base_width << level;
        let mut layers = Vec::with_capacity(LAYER_COUNT);
        let mut in_ch = 1;
        for level in 0..DEPTH {
            layers.push(LayerParams::conv(w(level), in_ch, 3, rng));
            layers.push(LayerParams::conv(w(level), w(level), 3, rng));
            in_ch = w(level);
        }
        layers.push(LayerParams::conv(w(DEPTH), in_ch, 3, rng));
        layers.push(LayerParams::conv(w(DEPTH), w(DEPTH), 3, rng));
        for level in (0..DEPTH).rev() {
            layers.push(LayerParams::conv(w(level), w(level + 1), 3, rng));
            layers.push(LayerParams::conv(w(level), 2 * w(level), 3, rng));
            layers.push(LayerParams::conv(w(level), w(level), 3, rng));
        }
        layers.push(LayerParams::conv(1, base_width, 1, rng));
        debug_assert_eq!(layers.len(), LAYER_COUNT);
        Ok(Self { base_width, layers })
    }

    pub fn base_width(&self) -> usize {
        self.base_width
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn params_mut(&mut self) -> Vec<&mut LayerParams<T>> {
        self.layers.iter_mut().collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::param_count).sum()
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(LayerParams::zero_grad);
    }

    pub fn cast<U: Scalar>(&self) -> UNetModel<U> {
        UNetModel {
            base_width: self.base_width,
            layers: self.layers.iter().map(LayerParams::cast).collect(),
        }
    }
}

impl UNetModel<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            magic: *UNET_MAGIC,
            config: vec![self.base_width as u32, DEPTH as u32],
            tensors: self
                .layers
                .iter()
                .flat_map(|l| [l.weights.clone(), l.bias.clone()])
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_magic(UNET_MAGIC)?;
        let (base_width, depth) = match *ck.config.as_slice() {
            [w, d] => (w as usize, d as usize),
            _ => return Err(Error::Checkpoint("U-Net header needs [base_width, depth]".into())),
        };
        if depth != DEPTH {
            return Err(Error::Checkpoint(format!("unsupported U-Net depth {depth}")));
        }
        let template = Self::new(base_width, &mut stream!(0))?;
        if ck.tensors.len() != 2 * LAYER_COUNT {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                2 * LAYER_COUNT,
                ck.tensors.len()
            )));
        }
        let layers = template
            .layers
            .iter()
            .zip(ck.tensors.chunks_exact(2))
            .map(|(t, pair)| {
                if pair[0].shape() != t.weights.shape() || pair[1].shape() != t.bias.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor shapes {:?}/{:?} do not match layer {:?}/{:?}",
                        pair[0].shape(),
                        pair[1].shape(),
                        t.weights.shape(),
                        t.bias.shape()
                    )));
                }
                Ok(LayerParams::new(pair[0].clone(), pair[1].clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { base_width, layers })
    }
}

/// Activations retained by [`unet_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct UNetTrace<T = f32> {
    conv_inputs: Vec<Option<Tensor<T>>>,
    pre_activations: Vec<Option<Tensor<T>>>,
    pools: Vec<PoolIndices>,
    pool_inputs: Vec<Vec<usize>>,
    /// Output of [`unet_forward`], in (0, 1).
    pub probs: Tensor<T>,
}

impl<T: Scalar> UNetTrace<T> {
    /// Fingerprint of ReLU signs and pooling winners.
    pub fn pattern(&self) -> ActivationPattern {
        let mut p = ActivationPattern::new();
        for pre in self.pre_activations.iter().take(HEAD).flatten() {
            p.record_signs(pre);
        }
        for idx in &self.pools {
            p.record_indices(idx);
        }
        p
    }
}

struct Recorder<'a, T> {
    layers: &'a [LayerParams<T>],
    inputs: Vec<Option<Tensor<T>>>,
    pre: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Recorder<'_, T> {
    fn conv_relu(&mut self, slot: usize, input: Tensor<T>) -> Result<Tensor<T>> {
        let pre = conv2d_forward(&input, &self.layers[slot], 1, 1)?;
        let out = relu(&pre);
        self.inputs[slot] = Some(input);
        self.pre[slot] = Some(pre);
        Ok(out)
    }
}

/// Forward pass on a (B, 1, H, W) batch; H and W must be divisible by 8.
pub fn unet_forward<T: Scalar>(model: &UNetModel<T>, image: &Tensor<T>) -> Result<UNetTrace<T>> {
    let (_, c, h, w) = image.dims4("unet_forward")?;
    if c != 1 || h % (1 << DEPTH) != 0 || w % (1 << DEPTH) != 0 {
        return Err(Error::shape(
            "unet_forward",
            "(B, 1, H, W) with H and W divisible by 8",
            image.shape(),
        ));
    }
    let mut rec = Recorder {
        layers: &model.layers,
        inputs: vec![None; LAYER_COUNT],
        pre: vec![None; LAYER_COUNT],
    };
    let mut skips = Vec::with_capacity(DEPTH);
    let mut pools = Vec::with_capacity(DEPTH);
    let mut pool_inputs = Vec::with_capacity(DEPTH);
    let mut x = image.clone();
    for [a, b] in ENC {
        let y = rec.conv_relu(a, x)?;
        let skip = rec.conv_relu(b, y)?;
        let (pooled, idx) = maxpool2_forward(&skip)?;
        pool_inputs.push(skip.shape().to_vec());
        pools.push(idx);
        skips.push(skip);
        x = pooled;
    }
    x = rec.conv_relu(BOTTLENECK[0], x)?;
    x = rec.conv_relu(BOTTLENECK[1], x)?;
    for (level, [up, a, b]) in DEC.into_iter().enumerate() {
        let skip = &skips[DEPTH - 1 - level];
        let upsampled = rec.conv_relu(up, upsample2_forward(&x)?)?;
        let joined = concat_channels(&upsampled, skip)?;
        x = rec.conv_relu(a, joined)?;
        x = rec.conv_relu(b, x)?;
    }
    let logits = conv2d_forward(&x, &model.layers[HEAD], 1, 0)?;
    rec.inputs[HEAD] = Some(x);
    let probs = sigmoid(&logits);
    Ok(UNetTrace {
        conv_inputs: rec.inputs,
        pre_activations: rec.pre,
        pools,
        pool_inputs,
        probs,
    })
}

fn conv_relu_backward<T: Scalar>(
    model: &mut UNetModel<T>,
    trace: &UNetTrace<T>,
    slot: usize,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<Option<Tensor<T>>> {
    let pre = trace.pre_activations[slot].as_ref().expect("forward recorded slot");
    let input = trace.conv_inputs[slot].as_ref().expect("forward recorded slot");
    let g = relu_backward(pre, grad_out)?;
    conv2d_backward_with(input, &mut model.layers[slot], &g, 1, 1, want_input)
}

/// Backpropagates `grad_probs` (d loss / d probs) through the network,
/// accumulating into every layer's gradients.
pub fn unet_backward<T: Scalar>(model: &mut UNetModel<T>, trace: &UNetTrace<T>, grad_probs: &Tensor<T>) -> Result<()> {
    let grad_logits = sigmoid_backward(&trace.probs, grad_probs)?;
    let head_in = trace.conv_inputs[HEAD].as_ref().expect("forward recorded head");
    let mut g = conv2d_backward_with(head_in, &mut model.layers[HEAD], &grad_logits, 1, 0, true)?
        .expect("input grad requested");
    let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; DEPTH];
    for (level, [up, a, b]) in DEC.into_iter().enumerate().rev() {
        g = conv_relu_backward(model, trace, b, &g, true)?.expect("input grad");
        let joined = conv_relu_backward(model, trace, a, &g, true)?.expect("input grad");
        let up_channels = model.layers[up].weights.shape()[0];
        let (g_up, g_skip) = split_channels(&joined, up_channels)?;
        skip_grads[DEPTH - 1 - level] = Some(g_skip);
        let g_upsampled = conv_relu_backward(model, trace, up, &g_up, true)?.expect("input grad");
        g = upsample2_backward(&g_upsampled)?;
    }
    g = conv_relu_backward(model, trace, BOTTLENECK[1], &g, true)?.expect("input grad");
    g = conv_relu_backward(model, trace, BOTTLENECK[0], &g, true)?.expect("input grad");
    for (level, [a, b]) in ENC.into_iter().enumerate().rev() {
        let mut g_skip = maxpool2_backward(&trace.pools[level], &g, &trace.pool_inputs[level])?;
        g_skip.add_assign(skip_grads[level].as_ref().expect("decoder filled every skip"))?;
        g = conv_relu_backward(model, trace, b, &g_skip, true)?.expect("input grad");
        match conv_relu_backward(model, trace, a, &g, level > 0)? {
            Some(next) => g = next,
            None => break,
        }
    }
    Ok(())
}

/// Dice and IoU of a predicted mask against the truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dice: f64,
    pub iou: f64,
}

/// Both-empty masks score 1.0 on both measures.
pub fn seg_metrics(pred: &BinaryMask, truth: &BinaryMask) -> Result<SegMetrics> {
    if (pred.width(), pred.height()) != (truth.width(), truth.height()) {
        return Err(Error::ShapeMismatch {
            op: "seg_metrics",
            expected: format!("{}×{}", truth.width(), truth.height()),
            found: format!("{}×{}", pred.width(), pred.height()),
        });
    }
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.values().iter().zip(truth.values()) {
        let (a, b) = (a == 255, b == 255);
        inter += (a && b) as usize;
        p += a as usize;
        t += b as usize;
    }
    if p + t == 0 {
        return Ok(SegMetrics { dice: 1.0, iou: 1.0 });
    }
    Ok(SegMetrics {
        dice: 2.0 * inter as f64 / (p + t) as f64,
        iou: inter as f64 / (p + t - inter) as f64,
    })
}

/// `> threshold` → 255, else 0. Accepts a 1×1×H×W map.
pub fn binarize<T: Scalar>(probs: &Tensor<T>, threshold: f64) -> Result<BinaryMask> {
    let (b, c, h, w) = probs.dims4("binarize")?;
    if b != 1 || c != 1 {
        return Err(Error::shape("binarize", "1×1×H×W", probs.shape()));
    }
    let values = probs
        .data()
        .iter()
        .map(|v| if v.as_f64() > threshold { 255 } else { 0 })
        .collect();
    BinaryMask::new(w, h, values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub base_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub threshold: f64,
    /// Blur before, open/close after the network.
    pub refine: bool,
    /// Caps the number of training images per fold (seeded subset).
    pub max_train_samples: Option<usize>,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            threshold: 0.5,
            refine: true,
            max_train_samples: None,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.batch_size == 0 {
            return Err(Error::Config("unet base_width and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("unet learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config("unet threshold must lie in [0, 1)".into()));
        }
        if self.max_train_samples == Some(0) {
            return Err(Error::Config("unet max_train_samples must be positive".into()));
        }
        Ok(())
    }
}

pub const REFINE_BLUR_SIGMA: f64 = 1.0;
pub const REFINE_MORPH_RADIUS: usize = 1;

/// Grayscale, optional blur, and `[0, 1]` scaling of an already-resized image.
pub fn unet_input(image: &RasterImage, refine: bool) -> Result<Tensor<f32>> {
    let mut gray = to_grayscale(image);
    if refine {
        gray = gaussian_blur(&gray, REFINE_BLUR_SIGMA)?;
    }
    Ok(normalize01(&gray))
}

/// Predicts a binary cell mask for one (already-resized) image.
pub fn segment(model: &UNetModel<f32>, image: &RasterImage, cfg: &UNetConfig) -> Result<BinaryMask> {
    let trace = unet_forward(model, &unet_input(image, cfg.refine)?)?;
    let mut mask = binarize(&trace.probs, cfg.threshold)?;
    if cfg.refine {
        mask = morph(&mask, MorphOp::Open, REFINE_MORPH_RADIUS)?;
        mask = morph(&mask, MorphOp::Close, REFINE_MORPH_RADIUS)?;
    }
    Ok(mask)
}

/// One training pair for [`unet_train`].
#[derive(Clone, Debug)]
pub struct SegExample {
    pub id: String,
    /// 1×1×H×W network input.
    pub input: Tensor<f32>,
    pub truth: Option<BinaryMask>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub dice: f64,
}

/// Trains with pixelwise BCE and Adam. Returns one log row per epoch; the
/// Dice column is the mean over training images of the thresholded forward
/// pass seen during that epoch.
pub fn unet_train(
    model: &mut UNetModel<f32>,
    examples: &[SegExample],
    cfg: &UNetConfig,
    seed: u64,
) -> Result<Vec<UNetEpochLog>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument(
            "U-Net training needs at least one example".into(),
        ));
    }
    if let Some(e) = examples.iter().find(|e| e.truth.is_none()) {
        return Err(Error::Dataset(format!("sample {} has no truth mask", e.id)));
    }
    let targets: Vec<Tensor<f32>> = examples
        .iter()
        .map(|e| e.truth.as_ref().expect("checked above").to_target())
        .collect();
    let mut adam = AdamState::new(
        &model.layers.iter().collect::<Vec<_>>(),
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    )?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream!(seed, "unet-shuffle", epoch));
        let (mut loss_sum, mut dice_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<&Tensor<f32>> = batch.iter().map(|&i| &examples[i].input).collect();
            let truth: Vec<&Tensor<f32>> = batch.iter().map(|&i| &targets[i]).collect();
            let x = Tensor::stack(&inputs)?;
            let t = Tensor::stack(&truth)?;
            let trace = unet_forward(model, &x)?;
            let (loss, grad) = binary_cross_entropy_pixelwise(&trace.probs, &t)?;
            loss_sum += loss * batch.len() as f64;
            for (j, &i) in batch.iter().enumerate() {
                let pred = binarize(&trace.probs.batch_item(j)?, cfg.threshold)?;
                dice_sum += seg_metrics(&pred, examples[i].truth.as_ref().expect("checked"))?.dice;
            }
            model.zero_grad();
            unet_backward(model, &trace, &grad)?;
            adam_step(&mut model.params_mut(), &mut adam)?;
        }
        let n = examples.len() as f64;
        let row = UNetEpochLog {
            epoch,
            loss: loss_sum / n,
            dice: dice_sum / n,
        };
        log::debug!("unet epoch {epoch}: loss {:.4} dice {:.4}", row.loss, row.dice);
        log.push(row);
    }
    Ok(log)
}
