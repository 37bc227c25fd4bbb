//! Binary cell classifier: three conv/pool stages, a dense hidden layer with
//! dropout, and a two-way softmax head. Also training and Grad-CAM.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CNN_MAGIC};
use crate::dataset::{augment, AugmentConfig, BinaryLabel};
use crate::error::{Error, Result};
use crate::imaging::resize_plane_bilinear;
use crate::layers::{
    conv2d_backward_with, conv2d_forward, dense_backward, dense_forward, dropout, dropout_backward, maxpool2_backward,
    maxpool2_forward, relu, relu_backward, ActivationPattern, DropoutMask, LayerParams, PoolIndices,
};
use crate::optim::{adam_step, l2_penalty, softmax_cross_entropy, AdamConfig, AdamState};
use crate::stream;
use crate::tensor::{Scalar, Tensor};

pub const CLASSES: usize = 2;

/// Layer sizes. [`ClassifierArch::standard`] is the production network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub in_channels: usize,
    pub input_size: usize,
    pub filters: [usize; 3],
    pub dense_units: usize,
}

impl ClassifierArch {
    pub fn standard() -> Self {
        Self {
            in_channels: 3,
            input_size: 128,
            filters: [32, 64, 128],
            dense_units: 128,
        }
    }

    /// Spatial extent after the third pooling stage.
    pub fn feature_size(&self) -> usize {
        self.input_size / 8
    }

    pub fn flat_features(&self) -> usize {
        self.filters[2] * self.feature_size() * self.feature_size()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.dense_units == 0 || self.filters.contains(&0) {
            return Err(Error::Config("classifier layer sizes must be positive".into()));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "classifier input size must be a positive multiple of 8, got {}",
                self.input_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel<T = f32> {
    arch: ClassifierArch,
    convs: Vec<LayerParams<T>>,
    hidden: LayerParams<T>,
    output: LayerParams<T>,
}

impl<T: Scalar> ClassifierModel<T> {
    pub fn new<R: Rng + ?Sized>(arch: ClassifierArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut convs = Vec::with_capacity(3);
        let mut in_ch = arch.in_channels;
        for &f in &arch.filters {
            convs.push(LayerParams::conv(f, in_ch, 3, rng));
            in_ch = f;
        }
        let hidden = LayerParams::dense(arch.flat_features(), arch.dense_units, rng);
        let output = LayerParams::dense(arch.dense_units, CLASSES, rng);
        Ok(Self {
            arch,
            convs,
            hidden,
            output,
        })
    }

    pub fn arch(&self) -> &ClassifierArch {
        &self.arch
    }

    pub fn layers(&self) -> Vec<&LayerParams<T>> {
        self.convs.iter().chain([&self.hidden, &self.output]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut LayerParams<T>> {
        self.convs
            .iter_mut()
            .chain([&mut self.hidden, &mut self.output])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(LayerParams::zero_grad);
    }

    pub fn cast<U: Scalar>(&self) -> ClassifierModel<U> {
        ClassifierModel {
            arch: self.arch,
            convs: self.convs.iter().map(LayerParams::cast).collect(),
            hidden: self.hidden.cast(),
            output: self.output.cast(),
        }
    }
}

impl ClassifierModel<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let a = &self.arch;
        let mut config = vec![a.in_channels as u32, a.input_size as u32];
        config.extend(a.filters.iter().map(|&f| f as u32));
        config.push(a.dense_units as u32);
        Checkpoint {
            magic: *CNN_MAGIC,
            config,
            tensors: self
                .layers()
                .into_iter()
                .flat_map(|l| [l.weights.clone(), l.bias.clone()])
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_magic(CNN_MAGIC)?;
        let arch = match *ck.config.as_slice() {
            [c, s, f1, f2, f3, u] => ClassifierArch {
                in_channels: c as usize,
                input_size: s as usize,
                filters: [f1 as usize, f2 as usize, f3 as usize],
                dense_units: u as usize,
            },
            _ => return Err(Error::Checkpoint("classifier header needs 6 config values".into())),
        };
        arch.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.tensors.len() != 10 {
            return Err(Error::Checkpoint(format!(
                "expected 10 tensors, found {}",
                ck.tensors.len()
            )));
        }
        let mut shapes = Vec::new();
        let mut in_ch = arch.in_channels;
        for &f in &arch.filters {
            shapes.push((vec![f, in_ch, 3, 3], f));
            in_ch = f;
        }
        shapes.push((vec![arch.flat_features(), arch.dense_units], arch.dense_units));
        shapes.push((vec![arch.dense_units, CLASSES], CLASSES));
        let mut layers = Vec::with_capacity(5);
        for ((w_shape, b_len), pair) in shapes.into_iter().zip(ck.tensors.chunks_exact(2)) {
            if pair[0].shape() != w_shape.as_slice() || pair[1].shape() != [b_len] {
                return Err(Error::Checkpoint(format!(
                    "tensor shapes {:?}/{:?} do not match {w_shape:?}/[{b_len}]",
                    pair[0].shape(),
                    pair[1].shape()
                )));
            }
            layers.push(LayerParams::new(pair[0].clone(), pair[1].clone()));
        }
        let output = layers.pop().expect("five layers");
        let hidden = layers.pop().expect("five layers");
        Ok(Self {
            arch,
            convs: layers,
            hidden,
            output,
        })
    }
}

/// Intermediate values kept by [`classify_forward`].
#[derive(Clone, Debug)]
pub struct ClassifierCache<T = f32> {
    conv_inputs: Vec<Tensor<T>>,
    conv_pre: Vec<Tensor<T>>,
    pools: Vec<PoolIndices>,
    pool_inputs: Vec<Vec<usize>>,
    /// Third-stage feature maps after ReLU and pooling (B × F × S × S).
    pub features: Tensor<T>,
    hidden_pre: Tensor<T>,
    dropout: DropoutMask<T>,
    hidden_out: Tensor<T>,
    /// B × 2.
    pub logits: Tensor<T>,
}

impl<T: Scalar> ClassifierCache<T> {
    pub fn pattern(&self) -> ActivationPattern {
        let mut p = ActivationPattern::new();
        for pre in self.conv_pre.iter().chain([&self.hidden_pre]) {
            p.record_signs(pre);
        }
        for idx in &self.pools {
            p.record_indices(idx);
        }
        p
    }
}

pub fn classify_forward<T: Scalar, R: Rng + ?Sized>(
    model: &ClassifierModel<T>,
    batch: &Tensor<T>,
    dropout_rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<ClassifierCache<T>> {
    let (_, c, h, w) = batch.dims4("classify_forward")?;
    let a = &model.arch;
    if c != a.in_channels || h != a.input_size || w != a.input_size {
        return Err(Error::shape(
            "classify_forward",
            format!("(B, {}, {}, {})", a.in_channels, a.input_size, a.input_size),
            batch.shape(),
        ));
    }
    let mut conv_inputs = Vec::with_capacity(3);
    let mut conv_pre = Vec::with_capacity(3);
    let mut pools = Vec::with_capacity(3);
    let mut pool_inputs = Vec::with_capacity(3);
    let mut x = batch.clone();
    for layer in &model.convs {
        let pre = conv2d_forward(&x, layer, 1, 1)?;
        let act = relu(&pre);
        let (pooled, idx) = maxpool2_forward(&act)?;
        conv_inputs.push(x);
        conv_pre.push(pre);
        pool_inputs.push(act.shape().to_vec());
        pools.push(idx);
        x = pooled;
    }
    let hidden_pre = dense_forward(&x, &model.hidden)?;
    let (hidden_out, mask) = dropout(&relu(&hidden_pre), dropout_rate, rng, training)?;
    let logits = dense_forward(&hidden_out, &model.output)?;
    Ok(ClassifierCache {
        conv_inputs,
        conv_pre,
        pools,
        pool_inputs,
        features: x,
        hidden_pre,
        dropout: mask,
        hidden_out,
        logits,
    })
}

/// Accumulates parameter gradients for `grad_logits` (d loss / d logits).
pub fn classify_backward<T: Scalar>(
    model: &mut ClassifierModel<T>,
    cache: &ClassifierCache<T>,
    grad_logits: &Tensor<T>,
) -> Result<()> {
    let g = dense_backward(&cache.hidden_out, &mut model.output, grad_logits)?;
    let g = dropout_backward(&cache.dropout, &g)?;
    let g = relu_backward(&cache.hidden_pre, &g)?;
    let mut g = dense_backward(&cache.features, &mut model.hidden, &g)?;
    for i in (0..model.convs.len()).rev() {
        let g_act = maxpool2_backward(&cache.pools[i], &g, &cache.pool_inputs[i])?;
        let g_pre = relu_backward(&cache.conv_pre[i], &g_act)?;
        match conv2d_backward_with(&cache.conv_inputs[i], &mut model.convs[i], &g_pre, 1, 1, i > 0)? {
            Some(next) => g = next,
            None => break,
        }
    }
    Ok(())
}

/// Row-wise softmax of B × 2 logits, computed in f64.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<[f64; CLASSES]> {
    logits
        .data()
        .chunks_exact(CLASSES)
        .map(|z| {
            let (a, b) = (z[0].as_f64(), z[1].as_f64());
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            [ea / (ea + eb), eb / (ea + eb)]
        })
        .collect()
}

/// Argmax with ties going to Abnormal.
pub fn decide(probabilities: [f64; CLASSES]) -> BinaryLabel {
    if probabilities[0] > probabilities[1] {
        BinaryLabel::Normal
    } else {
        BinaryLabel::Abnormal
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub probabilities: [f64; CLASSES],
    pub predicted: BinaryLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// One classifier input: a 1 × C × S × S tensor in [0, 1] and its label.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub id: String,
    pub input: Tensor<f32>,
    pub label: BinaryLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub dropout_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            l2_lambda: 1e-4,
            dropout_rate: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::Config("l2_lambda must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

fn onehot(labels: &[BinaryLabel]) -> Tensor<f32> {
    Tensor::from_fn(&[labels.len(), CLASSES], |i| {
        (labels[i / CLASSES].index() == i % CLASSES) as u8 as f32
    })
}

/// Inference-mode class probabilities for one 1 × C × S × S input.
pub fn probabilities(model: &ClassifierModel<f32>, input: &Tensor<f32>) -> Result<[f64; CLASSES]> {
    let (b, _, _, _) = input.dims4("probabilities")?;
    if b != 1 {
        return Err(Error::shape(
            "probabilities",
            "a single image (1, C, S, S)",
            input.shape(),
        ));
    }
    let cache = classify_forward(model, input, 0.0, false, &mut stream!(0))?;
    Ok(softmax_rows(&cache.logits)[0])
}

/// Inference-mode predictions, in input order.
pub fn predict(model: &ClassifierModel<f32>, images: &[LabeledImage], batch_size: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(images.len());
    let mut no_rng = stream!(0);
    for chunk in images.chunks(batch_size.max(1)) {
        let x = Tensor::stack(&chunk.iter().map(|s| &s.input).collect::<Vec<_>>())?;
        let cache = classify_forward(model, &x, 0.0, false, &mut no_rng)?;
        for (s, p) in chunk.iter().zip(softmax_rows(&cache.logits)) {
            out.push(Prediction {
                id: s.id.clone(),
                probabilities: p,
                predicted: decide(p),
            });
        }
    }
    Ok(out)
}

/// Training order for one epoch. With `balance`, minority-class items are
/// repeated (cyclically, from a shuffled order) until both classes match.
/// Each entry is (index, copy number).
fn epoch_order(train: &[LabeledImage], balance: bool, seed: u64, fold: usize, epoch: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = (0..train.len()).map(|i| (i, 0)).collect();
    if balance {
        let by_class = |l: BinaryLabel| -> Vec<usize> { (0..train.len()).filter(|&i| train[i].label == l).collect() };
        let (normal, abnormal) = (by_class(BinaryLabel::Normal), by_class(BinaryLabel::Abnormal));
        let (mut minority, majority) = if normal.len() < abnormal.len() {
            (normal, abnormal)
        } else {
            (abnormal, normal)
        };
        if !minority.is_empty() {
            minority.shuffle(&mut stream!(seed, "balance", fold, epoch));
            for extra in 0..majority.len() - minority.len() {
                order.push((minority[extra % minority.len()], 1 + extra / minority.len()));
            }
        }
    }
    order.shuffle(&mut stream!(seed, "shuffle", fold, epoch));
    order
}

/// Everything one fold's training produces.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub model: ClassifierModel<f32>,
    pub epochs: Vec<EpochLog>,
    pub predictions: Vec<Prediction>,
}

/// Trains a fresh model on `train` and predicts `val` after every epoch.
///
/// Randomness is drawn from streams keyed by (seed, fold, epoch, sample) so
/// results do not depend on thread scheduling.
pub fn train_fold(
    arch: ClassifierArch,
    train: &[LabeledImage],
    val: &[LabeledImage],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    fold: usize,
    seed: u64,
) -> Result<FoldOutcome> {
    cfg.validate()?;
    aug.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "fold {fold}: train and validation splits must be non-empty"
        )));
    }
    if let Some(dup) = val.iter().find(|v| train.iter().any(|t| t.id == v.id)) {
        return Err(Error::InvalidArgument(format!(
            "fold {fold}: {} is in both splits",
            dup.id
        )));
    }
    let mut model = ClassifierModel::<f32>::new(arch, &mut stream!(seed, "classifier-init", fold))?;
    let mut adam = AdamState::new(
        &model.layers(),
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    )?;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut predictions = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train, aug.balance_minority, seed, fold, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<Tensor<f32>> = batch
                .iter()
                .map(|&(i, copy)| {
                    let mut rng = stream!(seed, "augment", fold, epoch, train[i].id.as_str(), copy);
                    augment(&train[i].input, aug, &mut rng)
                })
                .collect();
            let labels: Vec<BinaryLabel> = batch.iter().map(|&(i, _)| train[i].label).collect();
            let x = Tensor::stack(&inputs.iter().collect::<Vec<_>>())?;
            let mut drop_rng = stream!(seed, "dropout", fold, epoch, b);
            let cache = classify_forward(&model, &x, cfg.dropout_rate, true, &mut drop_rng)?;
            let (data_loss, grad) = softmax_cross_entropy(&cache.logits, &onehot(&labels))?;
            for (p, &l) in softmax_rows(&cache.logits).into_iter().zip(&labels) {
                correct += (decide(p) == l) as usize;
            }
            model.zero_grad();
            classify_backward(&mut model, &cache, &grad)?;
            let reg = l2_penalty(&mut model.params_mut(), cfg.l2_lambda);
            loss_sum += (data_loss + reg) * batch.len() as f64;
            adam_step(&mut model.params_mut(), &mut adam)?;
        }
        predictions = predict(&model, val, cfg.batch_size)?;
        let val_correct = predictions
            .iter()
            .zip(val)
            .filter(|(p, v)| p.predicted == v.label)
            .count();
        let row = EpochLog {
            fold,
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_accuracy: correct as f64 / order.len() as f64,
            val_accuracy: val_correct as f64 / val.len() as f64,
        };
        log::info!(
            "fold {fold} epoch {epoch}: loss {:.4} train acc {:.3} val acc {:.3}",
            row.train_loss,
            row.train_accuracy,
            row.val_accuracy
        );
        logs.push(row);
    }
    if cfg.epochs == 0 {
        predictions = predict(&model, val, cfg.batch_size)?;
    }
    Ok(FoldOutcome {
        model,
        epochs: logs,
        predictions,
    })
}

/// Class-discriminative heatmap for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCam {
    /// Feature-resolution map (S/8 × S/8), max-normalised to [0, 1].
    pub coarse: Vec<f64>,
    pub coarse_size: usize,
    /// Bilinear upsample of `coarse` to the input size.
    pub heatmap: Vec<f64>,
    pub size: usize,
}

/// Gradient-weighted class activation map of `target` over the third conv
/// stage's pooled activations.
pub fn grad_cam(model: &ClassifierModel<f32>, image: &Tensor<f32>, target: BinaryLabel) -> Result<GradCam> {
    let (b, _, _, _) = image.dims4("grad_cam")?;
    if b != 1 {
        return Err(Error::shape("grad_cam", "a single image (1, C, S, S)", image.shape()));
    }
    let cache = classify_forward(model, image, 0.0, false, &mut stream!(0))?;
    let a = &model.arch;
    let units = a.dense_units;
    let c = target.index();
    // d logit_c / d hidden, masked by the hidden ReLU
    let g_hidden: Vec<f64> = (0..units)
        .map(|u| {
            if cache.hidden_pre.data()[u] > 0.0 {
                model.output.weights.data()[u * CLASSES + c] as f64
            } else {
                0.0
            }
        })
        .collect();
    let w1 = model.hidden.weights.data();
    let g_feat: Vec<f64> = w1
        .chunks_exact(units)
        .map(|row| row.iter().zip(&g_hidden).map(|(&w, &g)| w as f64 * g).sum())
        .collect();
    let s = a.feature_size();
    let plane = s * s;
    let feats = cache.features.data();
    let mut coarse = vec![0.0f64; plane];
    for ch in 0..a.filters[2] {
        let weight = g_feat[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64;
        for (m, &f) in coarse.iter_mut().zip(&feats[ch * plane..(ch + 1) * plane]) {
            *m += weight * f as f64;
        }
    }
    let max = coarse.iter().fold(0.0f64, |m, &v| m.max(v));
    for v in &mut coarse {
        *v = if max > 0.0 { v.max(0.0) / max } else { 0.0 };
    }
    let heatmap = resize_plane_bilinear(&coarse, s, s, a.input_size, a.input_size)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Ok(GradCam {
        coarse,
        coarse_size: s,
        heatmap,
        size: a.input_size,
    })
}
