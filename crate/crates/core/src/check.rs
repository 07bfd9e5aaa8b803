//! Verification tools: a finite-difference gradient checker that works on
//! whole parameterized graphs, plus slow-but-obvious reference
//! implementations (naive loops) used as independent oracles in tests.

use crate::error::Result;
use crate::layers::{ParamId, ParamStore, Pass};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;
use rand::Rng;

/// max_i |a_i - n_i| / max(max|a|, max|n|, 1e-6)
///
/// Scale-normalized so graphs with large or tiny gradients are compared
/// fairly; the floor keeps all-zero gradients from dividing by zero.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let denom = inf(analytic).max(inf(numeric)).max(1e-6);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (&a, &n)| m.max((a - n).abs()))
        / denom
}

/// Inputs kept away from relu/max kinks: magnitudes uniform in [0.2, 1.0]
/// with random sign, so a central difference of step h << 0.2 never
/// crosses zero.
pub fn sample_away_from_kinks<T: Real, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let mag: f64 = rng.gen_range(0.2..1.0);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        T::from_f64(mag * sign)
    })
}

/// Strictly positive samples in [0.2, 1.0], for inputs that must avoid
/// sign-dependent branches entirely.
pub fn sample_positive<T: Real, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(0.2..1.0)))
}

pub struct TargetReport {
    pub name: String,
    pub rel_err: f64,
    pub max_abs_diff: f64,
    pub scale: f64,
}

pub struct GradReport {
    pub targets: Vec<TargetReport>,
}

impl GradReport {
    /// Largest per-target relative error: each target is normalized by its
    /// own gradient scale. Strict; use where the precision can resolve
    /// every individual target.
    pub fn worst(&self) -> f64 {
        self.targets
            .iter()
            .fold(0.0f64, |m, t| m.max(t.rel_err))
    }

    /// Largest deviation normalized by the gradient scale of the whole
    /// graph. Tolerant of targets whose true gradient sits below the
    /// finite-difference noise floor of the precision under test.
    pub fn pooled(&self) -> f64 {
        let scale = self
            .targets
            .iter()
            .fold(1e-6f64, |m, t| m.max(t.scale));
        self.targets
            .iter()
            .fold(0.0f64, |m, t| m.max(t.max_abs_diff))
            / scale
    }
}

/// Check the analytic gradient of `build` against central differences.
///
/// `build` constructs a scalar loss from the bound extra inputs; every
/// learnable parameter it touches in `store` is checked coordinate by
/// coordinate, as are the extra inputs. The store (including buffers
/// mutated by train-mode ops) is restored to its original state between
/// evaluations and before returning.
pub fn check_gradients<T: Real>(
    store: &mut ParamStore<T>,
    extra_inputs: &[Tensor<T>],
    h: f64,
    build: &dyn Fn(&mut Pass<'_, T>, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let snapshot: Vec<Tensor<T>> = store.ids().map(|id| store.value(id).clone()).collect();
    let restore = |store: &mut ParamStore<T>| {
        for (id, saved) in store.ids().collect::<Vec<_>>().into_iter().zip(&snapshot) {
            *store.value_mut(id) = saved.clone();
        }
    };

    // Analytic pass.
    let (param_grads, input_grads) = {
        let mut pass = Pass::new(store, true);
        let vars: Vec<Var> = extra_inputs
            .iter()
            .map(|t| pass.tape.leaf(t.clone()))
            .collect();
        let loss = build(&mut pass, &vars)?;
        pass.backward(loss)?;
        let input_grads: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v|

                pass.tape
                    .grad(v)
                    .map(|g| g.data().iter().map(|x| x.as_f64()).collect())
                    .unwrap_or_else(|| vec![0.0; pass.tape.value(v).numel()])
            )
            .collect();
        let param_grads: Vec<(ParamId, Vec<f64>)> = pass
            .grads()
            .into_iter()
            .map(|(id, g)| (id, g.data().iter().map(|x| x.as_f64()).collect()))
            .collect();
        (param_grads, input_grads)
    };
    restore(store);

    let eval = |store: &mut ParamStore<T>, inputs: &[Tensor<T>]| -> Result<f64> {
        let mut pass = Pass::new(store, true);
        let vars: Vec<Var> = inputs.iter().map(|t| pass.tape.leaf(t.clone())).collect();
        let loss = build(&mut pass, &vars)?;
        Ok(pass.tape.value(loss).item().as_f64())
    };

    let mut targets = Vec::new();
    let hh = T::from_f64(h);

    for (id, analytic) in &param_grads {
        let n = store.value(*id).numel();
        let mut numeric = Vec::with_capacity(n);
        for j in 0..n {
            let orig = store.value(*id).data()[j];
            store.value_mut(*id).data_mut()[j] = orig + hh;
            let fp = eval(store, extra_inputs)?;
            restore(store);
            store.value_mut(*id).data_mut()[j] = orig - hh;
            let fm = eval(store, extra_inputs)?;
            restore(store);
            numeric.push((fp - fm) / (2.0 * h));
        }
        targets.push(target_report(
            store.entry(*id).name.clone(),
            analytic,
            &numeric,
        ));
    }

    let mut inputs: Vec<Tensor<T>> = extra_inputs.to_vec();
    for (i, analytic) in input_grads.iter().enumerate() {
        let n = inputs[i].numel();
        let mut numeric = Vec::with_capacity(n);
        for j in 0..n {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + hh;
            let fp = eval(store, &inputs)?;
            restore(store);
            inputs[i].data_mut()[j] = orig - hh;
            let fm = eval(store, &inputs)?;
            restore(store);
            inputs[i].data_mut()[j] = orig;
            numeric.push((fp - fm) / (2.0 * h));
        }
        targets.push(target_report(format!("input{i}"), analytic, &numeric));
    }

    Ok(GradReport { targets })
}

fn target_report(name: String, analytic: &[f64], numeric: &[f64]) -> TargetReport {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let max_abs_diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (&a, &n)| m.max((a - n).abs()));
    let scale = inf(analytic).max(inf(numeric));
    TargetReport {
        name,
        rel_err: max_abs_diff / scale.max(1e-6),
        max_abs_diff,
        scale,
    }
}

/// Central-difference step matched to the precision under test.
pub fn default_step<T: Real>() -> f64 {
    if T::DTYPE == "f64" {
        1e-5
    } else {
        1e-3
    }
}

/// Gradient-check threshold matched to the precision under test.
pub fn default_threshold<T: Real>() -> f64 {
    if T::DTYPE == "f64" {
        1e-5
    } else {
        1e-3
    }
}

// ---- naive reference implementations ----------------------------------------

/// Direct nested-loop 2D convolution, the oracle for the im2col+matmul path.
pub fn naive_conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for ni in 0..n {
        for oc in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[oc];
                    for ic in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc = acc
                                    + x.at(&[ni, ic, iy as usize, ix as usize])
                                        * w.at(&[oc, ic, ky, kx]);
                            }
                        }
                    }
                    out.set(&[ni, oc, oy, ox], acc);
                }
            }
        }
    }
    out
}

/// Step-by-step selective-scan reference in f64: materializes the full
/// state matrix each step, no fused inner loops.
#[allow(clippy::too_many_arguments)]
pub fn naive_selective_scan<T: Real>(
    x: &Tensor<T>,
    log_a: &Tensor<T>,
    w_b: &Tensor<T>,
    w_c: &Tensor<T>,
    w_delta: &Tensor<T>,
    b_delta: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Tensor<T> {
    let (bsz, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let s = log_a.shape()[1];
    let mut out = Tensor::zeros(&[bsz, l, d]);
    for bi in 0..bsz {
        let mut h = vec![vec![0.0f64; s]; d];
        for t in 0..l {
            let mut p = b_delta.at(&[0]).as_f64();
            for di in 0..d {
                p += x.at(&[bi, t, di]).as_f64() * w_delta.at(&[di]).as_f64();
            }
            let delta = p.exp().ln_1p();
            for di in 0..d {
                let mut y = d_skip.at(&[di]).as_f64() * x.at(&[bi, t, di]).as_f64();
                for si in 0..s {
                    let a = -log_a.at(&[di, si]).as_f64().exp();
                    let mut b_proj = 0.0;
                    let mut c_proj = 0.0;
                    for dj in 0..d {
                        b_proj += x.at(&[bi, t, dj]).as_f64() * w_b.at(&[dj, si]).as_f64();
                        c_proj += x.at(&[bi, t, dj]).as_f64() * w_c.at(&[dj, si]).as_f64();
                    }
                    h[di][si] = (delta * a).exp() * h[di][si]
                        + delta * b_proj * x.at(&[bi, t, di]).as_f64();
                    y += c_proj * h[di][si];
                }
                out.set(&[bi, t, di], T::from_f64(y));
            }
        }
    }
    out
}

/// Per-pixel log-sum-exp cross-entropy reference in f64.
pub fn naive_xce<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> f64 {
    let (n, c, h, w) = (
        logits.shape()[0],
        logits.shape()[1],
        logits.shape()[2],
        logits.shape()[3],
    );
    let mut acc = 0.0;
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let label = labels[(ni * h + y) * w + x] as usize;
                let z: f64 = (0..c)
                    .map(|ci| logits.at(&[ni, ci, y, x]).as_f64().exp())
                    .sum();
                acc += z.ln() - logits.at(&[ni, label, y, x]).as_f64();
            }
        }
    }
    acc / (n * h * w) as f64
}

/// Direct-summation soft Dice reference in f64; sigmoid for single-channel
/// logits, per-pixel softmax otherwise, averaged over foreground classes.
pub fn naive_dice<T: Real>(logits: &Tensor<T>, labels: &[u8], smooth: f64) -> f64 {
    let (n, c, h, w) = (
        logits.shape()[0],
        logits.shape()[1],
        logits.shape()[2],
        logits.shape()[3],
    );
    let prob = |ni: usize, ci: usize, y: usize, x: usize| -> f64 {
        if c == 1 {
            1.0 / (1.0 + (-logits.at(&[ni, 0, y, x]).as_f64()).exp())
        } else {
            let z: f64 = (0..c)
                .map(|k| logits.at(&[ni, k, y, x]).as_f64().exp())
                .sum();
            logits.at(&[ni, ci, y, x]).as_f64().exp() / z
        }
    };
    let fg: Vec<usize> = if c == 1 { vec![0] } else { (1..c).collect() };
    let mut acc = 0.0;
    for &ci in &fg {
        let target = if c == 1 { 1 } else { ci };
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut gsum = 0.0;
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let p = prob(ni, ci, y, x);
                    let g = (labels[(ni * h + y) * w + x] as usize == target) as usize as f64;
                    inter += p * g;
                    psum += p;
                    gsum += g;
                }
            }
        }
        acc += 1.0 - (2.0 * inter + smooth) / (psum + gsum + smooth);
    }
    acc / fg.len() as f64
}

// ---- whole-suite gradient check ----------------------------------------------

pub struct SuiteCase {
    pub name: &'static str,
    pub seed: u64,
    pub worst_rel_err: f64,
    pub threshold: f64,
}

impl SuiteCase {
    pub fn pass(&self) -> bool {
        self.worst_rel_err < self.threshold
    }
}

/// Runs every parameterized operation through the finite-difference
/// checker at the precision `T`, once per seed, and reports the worst
/// relative error of each case.
pub fn run_gradcheck_suite<T: Real>(seeds: &[u64]) -> Result<Vec<SuiteCase>> {
    use crate::encoder::ResidualBlock;
    use crate::layers::{BatchNorm2d, Conv2d};
    use crate::lms::LmsBlock;
    use crate::loss::{dice_loss, total_loss, xce_loss, LossConfig, PredictionSet};
    use crate::msaa::{Msaa, MsaaPool};
    use crate::ssm::{scan_direction, BiMambaBlock, Direction, SsmParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let h = default_step::<T>();
    let threshold = default_threshold::<T>();
    let mut out = Vec::new();
    let mut push = |name: &'static str, seed: u64, report: &GradReport| {
        out.push(SuiteCase {
            name,
            seed,
            worst_rel_err: report.pooled(),
            threshold,
        });
    };

    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        {
            let mut store = ParamStore::<T>::new();
            let conv = Conv2d::new(&mut store, &mut rng, "conv", 2, 3, 3, 1);
            let x = sample_away_from_kinks::<T, _>(&[1, 2, 5, 5], &mut rng);
            let report = check_gradients(&mut store, &[x], h, &|p, inputs| {
                let y = conv.forward(p, inputs[0])?;
                let y2 = p.tape.mul(y, y)?;
                Ok(p.tape.mean(y2))
            })?;
            push("conv2d", seed, &report);
        }

        {
            let mut store = ParamStore::<T>::new();
            let bn = BatchNorm2d::new(&mut store, "bn", 3);
            let x = sample_away_from_kinks::<T, _>(&[2, 3, 2, 2], &mut rng);
            // Normalization makes even-symmetric losses nearly input
            // independent, so reduce through an asymmetric smooth function.
            let report = check_gradients(&mut store, &[x], h, &|p, inputs| {
                let y = bn.forward(p, inputs[0])?;
                let y = p.tape.silu(y);
                Ok(p.tape.sum(y))
            })?;
            push("batchnorm", seed, &report);
        }

        {
            let mut store = ParamStore::<T>::new();
            let x = sample_away_from_kinks::<T, _>(&[1, 2, 4, 4], &mut rng);
            let report = check_gradients(&mut store, &[x], h, &|p, inputs| {
                let x = inputs[0];
                let parts = [
                    p.tape.avg_pool(x, 2, 2)?,
                    p.tape.max_pool(x, 2, 2)?,
                    p.tape.avg_pool_same2(x)?,
                    p.tape.max_pool_same2(x)?,
                    p.tape.global_avg_pool(x)?,
                    p.tape.global_max_pool(x)?,
                ];
                let mut acc = None;
                for y in parts {
                    let y2 = p.tape.mul(y, y)?;
                    let s = p.tape.mean(y2);
                    acc = Some(match acc {
                        None => s,
                        Some(a) => p.tape.add(a, s)?,
                    });
                }
                Ok(acc.unwrap())
            })?;
            push("pooling", seed, &report);
        }

        {
            let mut store = ParamStore::<T>::new();
            let x = sample_away_from_kinks::<T, _>(&[1, 2, 3, 3], &mut rng);
            let report = check_gradients(&mut store, &[x], h, &|p, inputs| {
                let up = p.tape.upsample_bilinear_2x(inputs[0])?;
                let un = p.tape.unpool(inputs[0], 2, 2)?;
                let s = p.tape.add(up, un)?;
                let s2 = p.tape.mul(s, s)?;
                Ok(p.tape.mean(s2))
            })?;
            push("upsample", seed, &report);
        }

        {
            let mut store = ParamStore::<T>::new();
            let params = SsmParams::new(&mut store, &mut rng, "ssm", 2, 2);
            let x = sample_away_from_kinks::<T, _>(&[1, 5, 2], &mut rng);
            let report = check_gradients(&mut store, &[x], h, &|p, inputs| {
                let y = scan_direction(p, inputs[0], &params, Direction::Forward)?;
                let y2 = p.tape.mul(y, y)?;
                Ok(p.tape.mean(y2))
            })?;
            push("selective_scan", seed, &report);
        }

        {
            let mut store = ParamStore::<T>::new();
            let block = BiMambaBlock::new(&mut store, &mut rng, "bim", 3, 2);
            let x = sample_away_from_kinks::<T, _>(&[1, 4, 3], &mut rng);
            let report = check_gradients(&mut store, &[x], h, &|p, inputs| {
                let y = block.forward(p, inputs[0])?;
                let y2 = p.tape.mul(y, y)?;
                Ok(p.tape.mean(y2))
            })?;
            push("bimamba", seed, &report);
        }

        {
            let mut store = ParamStore::<T>::new();
            let block = ResidualBlock::new(&mut store, &mut rng, "res", 2, 4, 2);
            let x = sample_away_from_kinks::<T, _>(&[1, 2, 6, 6], &mut rng);
            // The block's normalized pre-activations cluster near the relu
            // kink; a smaller f32 step keeps the central difference from
            // straddling it.
            let h_res = if T::DTYPE == "f32" { 5e-4 } else { h };
            let report = check_gradients(&mut store, &[x], h_res, &|p, inputs| {
                let y = block.forward(p, inputs[0])?;
                let y2 = p.tape.mul(y, y)?;
                Ok(p.tape.mean(y2))
            })?;
            push("residual_block", seed, &report);
        }

        {
            let mut store = ParamStore::<T>::new();
            let block = LmsBlock::new(&mut store, &mut rng, "lms", 4, 2, 2, 2, Some(2));
            let x = sample_away_from_kinks::<T, _>(&[1, 4, 2, 2], &mut rng);
            let skip = sample_away_from_kinks::<T, _>(&[1, 2, 4, 4], &mut rng);
            let report = check_gradients(&mut store, &[x, skip], h, &|p, inputs| {
                let y = block.forward(p, inputs[0], Some(inputs[1]))?;
                let y2 = p.tape.mul(y, y)?;
                Ok(p.tape.mean(y2))
            })?;
            push("lms_block", seed, &report);
        }

        {
            let mut store = ParamStore::<T>::new();
            let msaa = Msaa::new(&mut store, &mut rng, "msaa", 8, 4, MsaaPool::SpatialLocal);
            let center = sample_away_from_kinks::<T, _>(&[1, 4, 4, 4], &mut rng);
            let deeper = sample_away_from_kinks::<T, _>(&[1, 2, 2, 2], &mut rng);
            let shallower = sample_away_from_kinks::<T, _>(&[1, 2, 8, 8], &mut rng);
            let report =
                check_gradients(&mut store, &[center, deeper, shallower], h, &|p, inputs| {
                    let y = msaa.forward(p, inputs[0], inputs[1], inputs[2])?;
                    let y2 = p.tape.mul(y, y)?;
                    Ok(p.tape.mean(y2))
                })?;
            push("msaa", seed, &report);
        }

        // Mean-reduced losses have per-logit gradients of order 1/pixels
        // while the value stays O(1), so the f32 difference step widens to
        // stay above the evaluation noise floor.
        let h_loss = if T::DTYPE == "f32" { 3e-3 } else { h };

        {
            use rand::Rng as _;
            let mut store = ParamStore::<T>::new();
            let labels: Vec<u8> = (0..4).map(|_| rng.gen_range(0..3)).collect();
            let logits = sample_away_from_kinks::<T, _>(&[1, 3, 2, 2], &mut rng);
            let lbl = labels.clone();
            let report = check_gradients(&mut store, &[logits], h_loss, &|p, inputs| {
                let xce = xce_loss(&mut p.tape, inputs[0], &lbl)?;
                let dice = dice_loss(&mut p.tape, inputs[0], &lbl, 1.0)?;
                p.tape.add(xce, dice)
            })?;
            push("losses_multiclass", seed, &report);
        }

        {
            use rand::Rng as _;
            let mut store = ParamStore::<T>::new();
            let labels: Vec<u8> = (0..4).map(|_| rng.gen_range(0..2)).collect();
            let logits = sample_away_from_kinks::<T, _>(&[1, 1, 2, 2], &mut rng);
            let lbl = labels.clone();
            let report = check_gradients(&mut store, &[logits], h_loss, &|p, inputs| {
                let bce = xce_loss(&mut p.tape, inputs[0], &lbl)?;
                let dice = dice_loss(&mut p.tape, inputs[0], &lbl, 1.0)?;
                p.tape.add(bce, dice)
            })?;
            push("losses_binary", seed, &report);
        }

        {
            use rand::Rng as _;
            let mut store = ParamStore::<T>::new();
            let raw_omega = store.add("raw_omega", Tensor::zeros(&[2]));
            let labels: Vec<u8> = (0..4).map(|_| rng.gen_range(0..3)).collect();
            let main = sample_away_from_kinks::<T, _>(&[1, 3, 2, 2], &mut rng);
            let a1 = sample_away_from_kinks::<T, _>(&[1, 3, 2, 2], &mut rng);
            let a2 = sample_away_from_kinks::<T, _>(&[1, 3, 2, 2], &mut rng);
            let lbl = labels.clone();
            let cfg = LossConfig::default();
            let report = check_gradients(&mut store, &[main, a1, a2], h_loss, &|p, inputs| {
                let preds = PredictionSet {
                    logits_main: inputs[0],
                    logits_aux: vec![inputs[1], inputs[2]],
                };
                Ok(total_loss(p, &preds, &lbl, raw_omega, &cfg)?.total)
            })?;
            push("losses_total", seed, &report);
        }
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{BatchNorm2d, Conv2d, LayerNorm, Linear};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rel_err_metric_behaves() {
        assert_eq!(rel_err(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((rel_err(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-12);
        // All-zero gradients compare clean via the floor.
        assert_eq!(rel_err(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1), (1, 3, 7)] {
            let x = Tensor::<f32>::randn(&[2, 3, 8, 8], 1.0, &mut rng);
            let w = Tensor::<f32>::randn(&[4, 3, k, k], 0.5, &mut rng);
            let b = Tensor::<f32>::randn(&[4], 0.5, &mut rng);
            let expect = naive_conv2d(&x, &w, &b, stride, pad);

            let mut tape = crate::tape::Tape::<f32>::new();
            let xv = tape.constant(x);
            let wv = tape.constant(w);
            let bv = tape.constant(b);
            let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
            assert_eq!(tape.shape(y), expect.shape());
            for (a, e) in tape.value(y).data().iter().zip(expect.data()) {
                assert!((a - e).abs() < 1e-4, "stride {stride} pad {pad}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn gradcheck_conv_bn_relu_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new_no_bias(&mut store, &mut rng, "conv", 2, 3, 3, 1);
        let bn = BatchNorm2d::new(&mut store, "bn", 3);
        let x = sample_away_from_kinks::<f64, _>(&[2, 2, 5, 5], &mut rng);
        let report = check_gradients(&mut store, &[x], 1e-5, &|p, inputs| {
            let y = conv.forward(p, inputs[0])?;
            let y = bn.forward(p, y)?;
            let y = p.tape.silu(y);
            Ok(p.tape.sum(y))
        })
        .unwrap();
        for t in &report.targets {
            assert!(t.rel_err < 1e-5, "{}: {}", t.name, t.rel_err);
        }
    }

    #[test]
    fn gradcheck_pool_upsample_softmax_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::<f64>::new();
        let x = sample_away_from_kinks::<f64, _>(&[1, 3, 4, 4], &mut rng);
        let report = check_gradients(&mut store, &[x], 1e-5, &|p, inputs| {
            let up = p.tape.upsample_bilinear_2x(inputs[0])?;
            let a = p.tape.avg_pool(up, 2, 2)?;
            let m = p.tape.max_pool_same2(a)?;
            let s = p.tape.softmax(m, 1)?;
            let g = p.tape.global_avg_pool(s)?;
            let probs_sq = p.tape.mul(g, g)?;
            Ok(p.tape.sum(probs_sq))
        })
        .unwrap();
        for t in &report.targets {
            assert!(t.rel_err < 1e-5, "{}: {}", t.name, t.rel_err);
        }
    }

    #[test]
    fn gradcheck_linear_layernorm_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, &mut rng, "lin", 4, 6);
        let ln = LayerNorm::new(&mut store, "ln", 6);
        let x = sample_away_from_kinks::<f64, _>(&[5, 4], &mut rng);
        let report = check_gradients(&mut store, &[x], 1e-5, &|p, inputs| {
            let y = lin.forward(p, inputs[0])?;
            let y = ln.forward(p, y)?;
            let y = p.tape.silu(y);
            Ok(p.tape.sum(y))
        })
        .unwrap();
        for t in &report.targets {
            assert!(t.rel_err < 1e-5, "{}: {}", t.name, t.rel_err);
        }
    }

    #[test]
    fn gradcheck_f32_meets_coarse_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, &mut rng, "conv", 1, 2, 3, 1);
        let x = sample_away_from_kinks::<f32, _>(&[1, 1, 4, 4], &mut rng);
        let report = check_gradients(&mut store, &[x], 1e-3, &|p, inputs| {
            let y = conv.forward(p, inputs[0])?;
            let y = p.tape.sigmoid(y);
            Ok(p.tape.sum(y))
        })
        .unwrap();
        for t in &report.targets {
            assert!(t.rel_err < 1e-3, "{}: {}", t.name, t.rel_err);
        }
    }

    #[test]
    fn suite_passes_one_seed_both_precisions() {
        let mut failures = Vec::new();
        for case in run_gradcheck_suite::<f32>(&[1]).unwrap() {
            println!(
                "f32 {} seed {}: {:.3e} (< {:.0e})",
                case.name, case.seed, case.worst_rel_err, case.threshold
            );
            if !case.pass() {
                failures.push(format!("f32 {}: {}", case.name, case.worst_rel_err));
            }
        }
        for case in run_gradcheck_suite::<f64>(&[1]).unwrap() {
            println!(
                "f64 {} seed {}: {:.3e} (< {:.0e})",
                case.name, case.seed, case.worst_rel_err, case.threshold
            );
            if !case.pass() {
                failures.push(format!("f64 {}: {}", case.name, case.worst_rel_err));
            }
        }
        assert!(failures.is_empty(), "{failures:#?}");
    }
}
