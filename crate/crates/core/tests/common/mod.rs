//! Independent oracles and gradient-check drivers shared by the integration
//! tests and the acceptance suite.
#![allow(dead_code)]

use num_rational::Ratio;
use pap_core::classifier::{classify_backward, classify_forward, ClassifierArch, ClassifierModel};
use pap_core::evaluation::ConfusionMatrix2;
use pap_core::layers::*;
use pap_core::optim::*;
use pap_core::unet::{unet_backward, unet_forward, UNetModel};
use pap_core::{Scalar, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random<T: Scalar>(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(r.gen_range(-1.0..1.0)))
}

// ---- forward oracles -------------------------------------------------------

pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4("oracle").unwrap();
    let (f, _, k, _) = w.dims4("oracle").unwrap();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let xa = |bi: usize, ci: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.data()[((bi * c + ci) * h + y as usize) * wd + xx as usize]
        }
    };
    let mut out = vec![0.0; n * f * ho * wo];
    for bi in 0..n {
        for fi in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[fi];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                acc += w.data()[((fi * c + ci) * k + ky) * k + kx] * xa(bi, ci, y, xx);
                            }
                        }
                    }
                    out[((bi * f + fi) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, f, ho, wo], out).unwrap()
}

pub fn naive_maxpool(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4("oracle").unwrap();
    let mut out = Vec::new();
    for plane in 0..n * c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let mut best = f64::NEG_INFINITY;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    best = best.max(x.data()[plane * h * w + (2 * oy + dy) * w + 2 * ox + dx]);
                }
                out.push(best);
            }
        }
    }
    Tensor::new(&[n, c, h / 2, w / 2], out).unwrap()
}

pub fn naive_dense(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let batch = x.shape()[0];
    let fin = x.len() / batch;
    let units = b.len();
    let mut out = vec![0.0; batch * units];
    for r in 0..batch {
        for u in 0..units {
            let mut acc = b.data()[u];
            for i in 0..fin {
                acc += x.data()[r * fin + i] * w.data()[i * units + u];
            }
            out[r * units + u] = acc;
        }
    }
    Tensor::new(&[batch, units], out).unwrap()
}

pub fn max_abs_diff(a: &Tensor<f32>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

/// Worst absolute error of the f32 conv, pool and dense kernels against the
/// oracles over one random draw.
pub fn oracle_case(seed: u64) -> (f64, f64, f64) {
    let mut r = rng(seed);
    let n = r.gen_range(1..3);
    let c = r.gen_range(1..4);
    let f = r.gen_range(1..5);
    let k = [1, 3, 5][r.gen_range(0..3)];
    let stride = r.gen_range(1..3);
    let pad = r.gen_range(0..=k / 2);
    let h = r.gen_range(k.max(2)..12);
    let w = r.gen_range(k.max(2)..12);
    let x = random::<f64>(&[n, c, h, w], &mut r);
    let params = LayerParams::new(random::<f64>(&[f, c, k, k], &mut r), random::<f64>(&[f], &mut r));
    let ours = conv2d_forward(&x.cast::<f32>(), &params.cast::<f32>(), stride, pad).unwrap();
    let conv = max_abs_diff(&ours, &naive_conv(&x, &params.weights, &params.bias, stride, pad));

    let ph = 2 * r.gen_range(1..6);
    let pw = 2 * r.gen_range(1..6);
    let px = random::<f64>(&[n, c, ph, pw], &mut r);
    let (pooled, _) = maxpool2_forward(&px.cast::<f32>()).unwrap();
    let pool = max_abs_diff(&pooled, &naive_maxpool(&px));

    let fin = r.gen_range(1..40);
    let units = r.gen_range(1..10);
    let dx = random::<f64>(&[n, fin], &mut r);
    let dp = LayerParams::new(random::<f64>(&[fin, units], &mut r), random::<f64>(&[units], &mut r));
    let dense = max_abs_diff(
        &dense_forward(&dx.cast::<f32>(), &dp.cast::<f32>()).unwrap(),
        &naive_dense(&dx, &dp.weights, &dp.bias),
    );
    (conv, pool, dense)
}

// ---- exact metric oracle -----------------------------------------------------

pub type Q = Ratio<i128>;

fn q_div(a: i128, b: i128) -> Q {
    if b == 0 {
        Q::from_integer(0)
    } else {
        Q::new(a, b)
    }
}

fn q_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

/// (accuracy, precision_w, recall_w, f1_w) derived independently in exact
/// rational arithmetic: per-class P/R from counts, F1 as the harmonic mean
/// of P and R, weights = true-class supports.
pub fn exact_metrics(m: &ConfusionMatrix2) -> [Q; 4] {
    let (tp, fn_, fp, tn) = (m.tp as i128, m.fn_ as i128, m.fp as i128, m.tn as i128);
    let n = tp + fn_ + fp + tn;
    let class = |hit: i128, miss: i128, false_alarm: i128| {
        let p = q_div(hit, hit + false_alarm);
        let r = q_div(hit, hit + miss);
        let f1 = if p + r == Q::from_integer(0) {
            Q::from_integer(0)
        } else {
            Q::from_integer(2) * p * r / (p + r)
        };
        (p, r, f1, hit + miss)
    };
    let (pa, ra, fa, sa) = class(tp, fn_, fp);
    let (pn, rn, fn1, sn) = class(tn, fp, fn_);
    let w = |a: Q, b: Q| (a * Q::from_integer(sa) + b * Q::from_integer(sn)) / Q::from_integer(n);
    [Q::new(tp + tn, n), w(pa, pn), w(ra, rn), w(fa, fn1)]
}

pub fn exact_metrics_f64(m: &ConfusionMatrix2) -> [f64; 4] {
    exact_metrics(m).map(q_f64)
}

// ---- gradient-check drivers ----------------------------------------------------

/// Runs the piecewise FD check on `coords` random coordinates of `params`
/// (all of them when `None`); `loss` receives the full perturbed vector.
pub fn check_coords(
    mut loss: impl FnMut(&[f64]) -> (f64, u64),
    params: &[f64],
    grads: &[f64],
    coords: Option<usize>,
    seed: u64,
) -> GradCheck {
    let picked: Vec<usize> = match coords {
        Some(n) if n < params.len() => sample(&mut rng(seed), params.len(), n).into_vec(),
        _ => (0..params.len()).collect(),
    };
    let sub_p: Vec<f64> = picked.iter().map(|&i| params[i]).collect();
    let sub_g: Vec<f64> = picked.iter().map(|&i| grads[i]).collect();
    let mut full = params.to_vec();
    finite_difference_check_piecewise(
        |sub| {
            for (&i, &v) in picked.iter().zip(sub) {
                full[i] = v;
            }
            loss(&full)
        },
        &sub_p,
        &sub_g,
        FD_EPS,
    )
}

pub fn flatten(layers: &[&LayerParams<f64>]) -> (Vec<f64>, Vec<f64>) {
    let p = layers
        .iter()
        .flat_map(|l| l.weights.data().iter().chain(l.bias.data()).copied())
        .collect();
    let g = layers
        .iter()
        .flat_map(|l| l.weight_grad.data().iter().chain(l.bias_grad.data()).copied())
        .collect();
    (p, g)
}

pub fn assign(layers: &mut [&mut LayerParams<f64>], flat: &[f64]) {
    let mut at = 0;
    for l in layers.iter_mut() {
        for t in [&mut l.weights, &mut l.bias] {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }
}

fn merge(a: GradCheck, b: GradCheck) -> GradCheck {
    let worse = b.max_rel_error > a.max_rel_error;
    GradCheck {
        max_rel_error: a.max_rel_error.max(b.max_rel_error),
        worst_index: if worse { b.worst_index } else { a.worst_index },
        checked: a.checked + b.checked,
        skipped: a.skipped + b.skipped,
    }
}

/// Random linear read-out `Σ r·y`, so every output element matters.
fn projection(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    random(shape, r)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Per-layer checks for one seed; returns (layer name, result) pairs.
pub fn layer_checks(seed: u64) -> Vec<(&'static str, GradCheck)> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    // conv: weights, bias and input, two geometries
    for (name, k, stride, pad) in [("conv3x3", 3, 1, 1), ("conv-strided", 3, 2, 0), ("conv1x1", 1, 1, 0)] {
        let x = random::<f64>(&[2, 2, 6, 6], &mut r);
        let mut p = LayerParams::new(random::<f64>(&[3, 2, k, k], &mut r), random::<f64>(&[3], &mut r));
        let y = conv2d_forward(&x, &p, stride, pad).unwrap();
        let proj = projection(y.shape(), &mut r);
        let gx = conv2d_backward(&x, &mut p, &proj, stride, pad).unwrap();
        let (params, grads) = flatten(&[&p]);
        let probe = p.clone();
        let pc = check_coords(
            |flat| {
                let mut q = probe.clone();
                assign(&mut [&mut q], flat);
                (dot(&conv2d_forward(&x, &q, stride, pad).unwrap(), &proj), 0)
            },
            &params,
            &grads,
            None,
            seed,
        );
        let xc = check_coords(
            |flat| {
                let xi = Tensor::new(x.shape(), flat.to_vec()).unwrap();
                (dot(&conv2d_forward(&xi, &p, stride, pad).unwrap(), &proj), 0)
            },
            x.data(),
            gx.data(),
            None,
            seed,
        );
        out.push((name, merge(pc, xc)));
    }

    // maxpool
    {
        let x = random::<f64>(&[2, 2, 6, 6], &mut r);
        let (y, idx) = maxpool2_forward(&x).unwrap();
        let proj = projection(y.shape(), &mut r);
        let gx = maxpool2_backward(&idx, &proj, x.shape()).unwrap();
        let c = check_coords(
            |flat| {
                let xi = Tensor::new(x.shape(), flat.to_vec()).unwrap();
                let (yi, ii) = maxpool2_forward(&xi).unwrap();
                let mut pat = ActivationPattern::new();
                pat.record_indices(&ii);
                (dot(&yi, &proj), pat.value())
            },
            x.data(),
            gx.data(),
            None,
            seed,
        );
        out.push(("maxpool2", c));
    }

    // dense
    {
        let x = random::<f64>(&[3, 7], &mut r);
        let mut p = LayerParams::dense(7, 4, &mut r);
        p.bias = random(&[4], &mut r);
        let y = dense_forward(&x, &p).unwrap();
        let proj = projection(y.shape(), &mut r);
        let gx = dense_backward(&x, &mut p, &proj).unwrap();
        let (params, grads) = flatten(&[&p]);
        let probe = p.clone();
        let pc = check_coords(
            |flat| {
                let mut q = probe.clone();
                assign(&mut [&mut q], flat);
                (dot(&dense_forward(&x, &q).unwrap(), &proj), 0)
            },
            &params,
            &grads,
            None,
            seed,
        );
        let xc = check_coords(
            |flat| {
                let xi = Tensor::new(x.shape(), flat.to_vec()).unwrap();
                (dot(&dense_forward(&xi, &p).unwrap(), &proj), 0)
            },
            x.data(),
            gx.data(),
            None,
            seed,
        );
        out.push(("dense", merge(pc, xc)));
    }

    // relu and sigmoid
    {
        let x = random::<f64>(&[2, 3, 4], &mut r).reshape(&[2, 3, 2, 2]).unwrap();
        let proj = projection(x.shape(), &mut r);
        let g = relu_backward(&x, &proj).unwrap();
        let c = check_coords(
            |flat| {
                let xi = Tensor::new(x.shape(), flat.to_vec()).unwrap();
                let mut pat = ActivationPattern::new();
                pat.record_signs(&xi);
                (dot(&relu(&xi), &proj), pat.value())
            },
            x.data(),
            g.data(),
            None,
            seed,
        );
        out.push(("relu", c));
        let s = sigmoid(&x.map(|v| 3.0 * v));
        let g = sigmoid_backward(&s, &proj).unwrap().map(|v| 3.0 * v);
        let c = check_coords(
            |flat| {
                let xi = Tensor::new(x.shape(), flat.to_vec()).unwrap();
                (dot(&sigmoid(&xi.map(|v| 3.0 * v)), &proj), 0)
            },
            x.data(),
            g.data(),
            None,
            seed,
        );
        out.push(("sigmoid", c));
    }

    // dropout with a fixed mask
    {
        let x = random::<f64>(&[2, 10], &mut r);
        let proj = projection(x.shape(), &mut r);
        let (_, mask) = dropout(&x, 0.5, &mut rng(seed ^ 0xd0), true).unwrap();
        let g = dropout_backward(&mask, &proj).unwrap();
        let c = check_coords(
            |flat| {
                let xi = Tensor::new(x.shape(), flat.to_vec()).unwrap();
                let (y, _) = dropout(&xi, 0.5, &mut rng(seed ^ 0xd0), true).unwrap();
                (dot(&y, &proj), 0)
            },
            x.data(),
            g.data(),
            None,
            seed,
        );
        out.push(("dropout", c));
    }

    // upsample and channel concat
    {
        let x = random::<f64>(&[1, 2, 3, 3], &mut r);
        let skip = random::<f64>(&[1, 3, 6, 6], &mut r);
        let proj = projection(&[1, 5, 6, 6], &mut r);
        let (ga, gb) = split_channels(&proj, 2).unwrap();
        let gx = upsample2_backward(&ga).unwrap();
        let f = |xi: &Tensor<f64>, si: &Tensor<f64>| {
            dot(&concat_channels(&upsample2_forward(xi).unwrap(), si).unwrap(), &proj)
        };
        let xc = check_coords(
            |flat| (f(&Tensor::new(x.shape(), flat.to_vec()).unwrap(), &skip), 0),
            x.data(),
            gx.data(),
            None,
            seed,
        );
        let sc = check_coords(
            |flat| (f(&x, &Tensor::new(skip.shape(), flat.to_vec()).unwrap()), 0),
            skip.data(),
            gb.data(),
            None,
            seed,
        );
        out.push(("upsample+concat", merge(xc, sc)));
    }

    // losses
    {
        let logits = random::<f64>(&[3, 2], &mut r).map(|v| 3.0 * v);
        let onehot = Tensor::from_fn(&[3, 2], |i| ((i / 2 + i % 2) % 2) as f64);
        let (_, g) = softmax_cross_entropy(&logits, &onehot).unwrap();
        let c = check_coords(
            |flat| {
                (
                    softmax_cross_entropy(&Tensor::new(&[3, 2], flat.to_vec()).unwrap(), &onehot)
                        .unwrap()
                        .0,
                    0,
                )
            },
            logits.data(),
            g.data(),
            None,
            seed,
        );
        out.push(("softmax-ce", c));

        let probs = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |_| r.gen_range(0.1..0.9));
        let target = Tensor::from_fn(&[1, 1, 3, 3], |i| (i % 2) as f64);
        let (_, g) = binary_cross_entropy_pixelwise(&probs, &target).unwrap();
        let c = check_coords(
            |flat| {
                let p = Tensor::new(probs.shape(), flat.to_vec()).unwrap();
                (binary_cross_entropy_pixelwise(&p, &target).unwrap().0, 0)
            },
            probs.data(),
            g.data(),
            None,
            seed,
        );
        out.push(("bce", c));

        let mut p = LayerParams::new(random::<f64>(&[2, 3], &mut r), random::<f64>(&[3], &mut r));
        p.zero_grad();
        l2_penalty(&mut [&mut p], 0.3);
        let c = check_coords(
            |flat| {
                let mut q = LayerParams::new(Tensor::new(&[2, 3], flat.to_vec()).unwrap(), Tensor::zeros(&[3]));
                (l2_penalty(&mut [&mut q], 0.3), 0)
            },
            p.weights.data(),
            p.weight_grad.data(),
            None,
            seed,
        );
        out.push(("l2", c));
    }
    out
}

/// Whole U-Net on a 1×1×16×16 input with BCE against a binary target.
pub fn unet_check(width: usize, coords: Option<usize>, seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut model = UNetModel::<f64>::new(width, &mut r).unwrap();
    let x = Tensor::<f64>::from_fn(&[1, 1, 16, 16], |_| r.gen());
    let t = Tensor::<f64>::from_fn(&[1, 1, 16, 16], |_| r.gen_bool(0.4) as u8 as f64);
    let trace = unet_forward(&model, &x).unwrap();
    let (_, grad) = binary_cross_entropy_pixelwise(&trace.probs, &t).unwrap();
    model.zero_grad();
    unet_backward(&mut model, &trace, &grad).unwrap();
    let (params, grads) = flatten(&model.layers().iter().collect::<Vec<_>>());
    let mut probe = model.clone();
    check_coords(
        |flat| {
            assign(&mut probe.params_mut(), flat);
            let tr = unet_forward(&probe, &x).unwrap();
            (
                binary_cross_entropy_pixelwise(&tr.probs, &t).unwrap().0,
                tr.pattern().value(),
            )
        },
        &params,
        &grads,
        coords,
        seed,
    )
}

pub fn tiny_classifier() -> ClassifierArch {
    ClassifierArch {
        in_channels: 3,
        input_size: 16,
        filters: [4, 8, 16],
        dense_units: 8,
    }
}

/// Width-reduced classifier on a 2-sample batch: CE + L2, dropout active
/// with a fixed mask.
pub fn classifier_check(coords: Option<usize>, seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut model = ClassifierModel::<f64>::new(tiny_classifier(), &mut r).unwrap();
    let x = Tensor::<f64>::from_fn(&[2, 3, 16, 16], |_| r.gen());
    let onehot = Tensor::from_fn(&[2, 2], |i| [1.0, 0.0, 0.0, 1.0][i]);
    let lambda = 1e-3;
    let loss = |m: &mut ClassifierModel<f64>| {
        let cache = classify_forward(m, &x, 0.5, true, &mut rng(seed ^ 0xfeed)).unwrap();
        let (l, g) = softmax_cross_entropy(&cache.logits, &onehot).unwrap();
        (l, g, cache)
    };
    let (_, g, cache) = loss(&mut model);
    model.zero_grad();
    classify_backward(&mut model, &cache, &g).unwrap();
    l2_penalty(&mut model.params_mut(), lambda);
    let (params, grads) = flatten(&model.layers());
    let mut probe = model.clone();
    check_coords(
        |flat| {
            assign(&mut probe.params_mut(), flat);
            let (l, _, c) = loss(&mut probe);
            let reg: f64 = probe
                .layers()
                .iter()
                .map(|p| p.weights.data().iter().map(|w| w * w).sum::<f64>())
                .sum();
            (l + lambda * reg, c.pattern().value())
        },
        &params,
        &grads,
        coords,
        seed,
    )
}
