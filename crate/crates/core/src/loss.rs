//! Segmentation heads and the training objective: per-stage auxiliary
//! prediction maps, a joint cross-entropy + soft-Dice main loss, and a
//! learnable softmax-weighted sum of auxiliary cross-entropies,
//!
//! ```text
//! total = l_main + epsilon * sum_i omega_i * l_aux_i,   omega = softmax(raw)
//! ```
//!
//! Labels are u8 class maps held inside the loss ops, never on the tape.

use crate::error::{Error, Result};
use crate::layers::{Conv2d, ParamId, ParamStore, Pass};
use crate::real::Real;
use crate::tape::{stable_sigmoid, stable_softplus, BackwardArgs, OpRule, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Mean per-pixel softmax cross-entropy for `[N,C,H,W]` logits (C >= 2)
/// against a `[N,H,W]`-shaped u8 class map.
struct CrossEntropyMeanOp {
    labels: Vec<u8>,
    c: usize,
    plane: usize, // H*W
}

impl CrossEntropyMeanOp {
    fn pixel_logits<'a, T: Real>(&self, data: &'a [T], px: usize) -> impl Iterator<Item = T> + 'a {
        let n = px / self.plane;
        let off = px % self.plane;
        let base = n * self.c * self.plane + off;
        let plane = self.plane;
        (0..self.c).map(move |ci| data[base + ci * plane])
    }
}

impl<T: Real> OpRule<T> for CrossEntropyMeanOp {
    fn name(&self) -> &'static str {
        "cross_entropy_mean"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let logits = args.inputs[0].data();
        let gout = args.grad.data()[0];
        let npix = self.labels.len();
        let scale = gout / T::from_usize(npix);
        let mut dl = vec![T::zero(); logits.len()];
        for (px, &label) in self.labels.iter().enumerate() {
            let m = self
                .pixel_logits(logits, px)
                .fold(T::neg_infinity(), T::max);
            let z: f64 = self
                .pixel_logits(logits, px)
                .map(|v| (v - m).exp().as_f64())
                .sum();
            let n = px / self.plane;
            let off = px % self.plane;
            let base = n * self.c * self.plane + off;
            for ci in 0..self.c {
                let p = T::from_f64((logits[base + ci * self.plane] - m).exp().as_f64() / z);
                let ind = if ci == label as usize { T::one() } else { T::zero() };
                dl[base + ci * self.plane] = (p - ind) * scale;
            }
        }
        vec![Some(Tensor::from_parts(args.inputs[0].shape().to_vec(), dl))]
    }
}

/// Mean binary cross-entropy with logits for `[N,1,H,W]` against {0,1} maps.
struct BceWithLogitsMeanOp {
    labels: Vec<u8>,
}

impl<T: Real> OpRule<T> for BceWithLogitsMeanOp {
    fn name(&self) -> &'static str {
        "bce_with_logits_mean"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let logits = args.inputs[0].data();
        let gout = args.grad.data()[0];
        let scale = gout / T::from_usize(self.labels.len());
        let dl: Vec<T> = logits
            .iter()
            .zip(&self.labels)
            .map(|(&l, &g)| (stable_sigmoid(l) - T::from_usize(g as usize)) * scale)
            .collect();
        vec![Some(Tensor::from_parts(args.inputs[0].shape().to_vec(), dl))]
    }
}

fn check_labels(labels: &[u8], shape: &[usize], classes: usize) -> Result<()> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if labels.len() != n * h * w {
        return Err(Error::Contract(format!(
            "label map has {} entries for {n}x{h}x{w} logits",
            labels.len()
        )));
    }
    let _ = c;
    if let Some(px) = labels.iter().position(|&l| (l as usize) >= classes) {
        let (pn, rest) = (px / (h * w), px % (h * w));
        return Err(Error::Data(format!(
            "label {} out of range for {classes} classes at sample {pn}, pixel ({}, {})",
            labels[px],
            rest / w,
            rest % w
        )));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let sh = self.value(logits).shape().to_vec();
        if sh.len() != 4 || sh[1] < 2 {
            return Err(Error::shape("cross_entropy_mean", &sh, &[0, 2, 0, 0]));
        }
        check_labels(labels, &sh, sh[1])?;
        let op = CrossEntropyMeanOp {
            labels: labels.to_vec(),
            c: sh[1],
            plane: sh[2] * sh[3],
        };
        let data = self.value(logits).data();
        let mut acc = 0.0f64;
        for (px, &label) in op.labels.iter().enumerate() {
            let m = op.pixel_logits(data, px).fold(T::neg_infinity(), T::max);
            let z: f64 = op
                .pixel_logits(data, px)
                .map(|v| (v - m).exp().as_f64())
                .sum();
            let n = px / op.plane;
            let off = px % op.plane;
            let l = data[n * op.c * op.plane + off + (label as usize) * op.plane];
            acc += m.as_f64() + z.ln() - l.as_f64();
        }
        let mean = T::from_f64(acc / op.labels.len() as f64);
        Ok(self.push(Tensor::from_parts(vec![1], vec![mean]), vec![logits], Box::new(op)))
    }

    pub fn bce_with_logits_mean(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let sh = self.value(logits).shape().to_vec();
        if sh.len() != 4 || sh[1] != 1 {
            return Err(Error::shape("bce_with_logits_mean", &sh, &[0, 1, 0, 0]));
        }
        check_labels(labels, &sh, 2)?;
        let data = self.value(logits).data();
        let mut acc = 0.0f64;
        for (&l, &g) in data.iter().zip(labels) {
            // softplus(l) - g*l == -[g ln s + (1-g) ln(1-s)]
            acc += stable_softplus(l).as_f64() - (g as f64) * l.as_f64();
        }
        let mean = T::from_f64(acc / labels.len() as f64);
        let op = BceWithLogitsMeanOp {
            labels: labels.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(vec![1], vec![mean]), vec![logits], Box::new(op)))
    }
}

/// Cross-entropy matched to the task: BCE when the logit map has a single
/// channel, softmax cross-entropy otherwise.
pub fn xce_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    if tape.shape(logits)[1] == 1 {
        tape.bce_with_logits_mean(logits, labels)
    } else {
        tape.cross_entropy_mean(logits, labels)
    }
}

/// Soft Dice loss `1 - (2 sum p*g + s) / (sum p + sum g + s)` on predicted
/// probabilities, averaged over foreground classes (all classes except 0
/// in multiclass mode; the single channel in binary mode).
pub fn dice_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[u8],
    smooth: f64,
) -> Result<Var> {
    let sh = tape.shape(logits).to_vec();
    if sh.len() != 4 {
        return Err(Error::shape("dice_loss", &sh, &[0, 0, 0, 0]));
    }
    let c = sh[1];
    check_labels(labels, &sh, c.max(2))?;
    let (probs, fg): (Var, Vec<usize>) = if c == 1 {
        (tape.sigmoid(logits), vec![0])
    } else {
        (tape.softmax(logits, 1)?, (1..c).collect())
    };
    let mut acc: Option<Var> = None;
    for &ci in &fg {
        let class_of = |l: u8| -> bool {
            if c == 1 {
                l == 1
            } else {
                l as usize == ci
            }
        };
        let pc = tape.slice(probs, 1, ci, 1)?;
        let mask = Tensor::from_fn(&[sh[0], 1, sh[2], sh[3]], |i| {
            if class_of(labels[i]) {
                T::one()
            } else {
                T::zero()
            }
        });
        let gsum = labels.iter().filter(|&&l| class_of(l)).count() as f64;
        let mask = tape.constant(mask);
        let inter = tape.mul(pc, mask)?;
        let inter = tape.sum(inter);
        let num = tape.scale(inter, 2.0);
        let num = tape.add_scalar(num, smooth);
        let psum = tape.sum(pc);
        let den = tape.add_scalar(psum, gsum + smooth);
        let ratio = tape.div(num, den)?;
        let term = tape.neg(ratio);
        let term = tape.add_scalar(term, 1.0);
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(tape.scale(acc.expect("at least one foreground class"), 1.0 / fg.len() as f64))
}

/// 1x1 conv to the class count followed by bilinear upsampling to the
/// label resolution.
pub struct AuxHead {
    conv: Conv2d,
}

impl AuxHead {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        classes: usize,
    ) -> Self {
        AuxHead {
            conv: Conv2d::new(store, rng, name, c_in, classes, 1, 1),
        }
    }

    pub fn forward<T: Real>(&self, p: &mut Pass<'_, T>, feat: Var, target_hw: usize) -> Result<Var> {
        let mut y = self.conv.forward(p, feat)?;
        let sh = p.tape.shape(y);
        let (mut h, w) = (sh[2], sh[3]);
        let reachable = |e: usize| {
            e <= target_hw && target_hw % e == 0 && (target_hw / e).is_power_of_two()
        };
        if h != w || !reachable(h) {
            return Err(Error::Contract(format!(
                "head at {h}x{w} cannot reach label resolution {target_hw} by 2x upsampling"
            )));
        }
        while h < target_hw {
            y = p.tape.upsample_bilinear_2x(y)?;
            h *= 2;
        }
        Ok(y)
    }
}

pub struct PredictionSet {
    pub logits_main: Var,
    pub logits_aux: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub epsilon: f64,
    pub dice_smooth: f64,
    pub main_mix: (f64, f64),
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 0.4,
            dice_smooth: 1.0,
            main_mix: (0.5, 0.5),
        }
    }
}

#[derive(Debug)]
pub struct LossOutput {
    pub total: Var,
    pub total_value: f64,
    pub main_value: f64,
    pub aux_values: Vec<f64>,
    pub omega: Vec<f64>,
}

/// Joint objective: `main_mix` blend of cross-entropy and Dice on the main
/// logits plus epsilon times the softmax(raw_omega)-weighted sum of
/// auxiliary cross-entropies.
pub fn total_loss<T: Real>(
    p: &mut Pass<'_, T>,
    preds: &PredictionSet,
    labels: &[u8],
    raw_omega: ParamId,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let xce = xce_loss(&mut p.tape, preds.logits_main, labels)?;
    let dice = dice_loss(&mut p.tape, preds.logits_main, labels, cfg.dice_smooth)?;
    let xce_part = p.tape.scale(xce, cfg.main_mix.0);
    let dice_part = p.tape.scale(dice, cfg.main_mix.1);
    let main = p.tape.add(xce_part, dice_part)?;

    if preds.logits_aux.is_empty() {
        let main_value = p.tape.value(main).item().as_f64();
        return Ok(LossOutput {
            total: main,
            total_value: main_value,
            main_value,
            aux_values: Vec::new(),
            omega: Vec::new(),
        });
    }

    let raw = p.param(raw_omega);
    let n_stages = p.tape.shape(raw)[0];
    if n_stages != preds.logits_aux.len() {
        return Err(Error::Config(format!(
            "{} auxiliary heads but {n_stages} stage weights",
            preds.logits_aux.len()
        )));
    }
    let omega = p.tape.softmax(raw, 0)?;
    let mut aux_terms = Vec::with_capacity(n_stages);
    let mut aux_values = Vec::with_capacity(n_stages);
    for &logits in &preds.logits_aux {
        let l = xce_loss(&mut p.tape, logits, labels)?;
        aux_values.push(p.tape.value(l).item().as_f64());
        aux_terms.push(l);
    }
    let aux_vec = p.tape.concat(&aux_terms, 0)?;
    let weighted = p.tape.mul(omega, aux_vec)?;
    let weighted = p.tape.sum(weighted);
    let scaled = p.tape.scale(weighted, cfg.epsilon);
    let total = p.tape.add(main, scaled)?;

    Ok(LossOutput {
        total,
        total_value: p.tape.value(total).item().as_f64(),
        main_value: p.tape.value(main).item().as_f64(),
        aux_values,
        omega: p.tape.value(omega).data().iter().map(|v| v.as_f64()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{check_gradients, naive_dice, naive_xce, sample_away_from_kinks};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_cost_ln_two() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let labels = vec![0u8, 1, 0, 1, 0, 1, 0, 1, 0];
        let l = tape.cross_entropy_mean(logits, &labels).unwrap();
        assert!((tape.value(l).item() - core::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_binary_logits_cost_almost_nothing() {
        let mut tape = Tape::<f32>::new();
        let labels = vec![1u8, 0, 1, 1];
        let logits = Tensor::new(
            vec![1, 1, 2, 2],
            labels.iter().map(|&g| if g == 1 { 1e4 } else { -1e4 }).collect(),
        )
        .unwrap();
        let logits = tape.constant(logits);
        let l = tape.bce_with_logits_mean(logits, &labels).unwrap();
        assert!(tape.value(l).item() < 1e-4);
    }

    #[test]
    fn cross_entropy_matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let logits = Tensor::<f32>::randn(&[2, 4, 8, 8], 2.0, &mut rng);
        let labels: Vec<u8> = (0..2 * 64).map(|i| (i * 7 % 4) as u8).collect();
        let want = naive_xce(&logits, &labels);
        let mut tape = Tape::<f32>::new();
        let lv = tape.constant(logits);
        let got = tape.cross_entropy_mean(lv, &labels).unwrap();
        assert!((tape.value(got).item() as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_label_is_named() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let labels = vec![0u8, 1, 3, 2];
        let err = tape.cross_entropy_mean(logits, &labels).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("label 3") && msg.contains("pixel (1, 0)"), "{msg}");
    }

    #[test]
    fn saturated_perfect_prediction_has_zero_dice_loss() {
        let mut tape = Tape::<f32>::new();
        let labels = vec![0u8, 1, 1, 0, 1, 0, 0, 1, 1];
        let logits = Tensor::new(
            vec![1, 1, 3, 3],
            labels.iter().map(|&g| if g == 1 { 40.0 } else { -40.0 }).collect(),
        )
        .unwrap();
        let lv = tape.constant(logits);
        let l = dice_loss(&mut tape, lv, &labels, 1.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn disjoint_hard_prediction_matches_the_formula() {
        // |P| = |G| = 4 on 9 pixels, no overlap, s = 1 -> 1 - 1/9.
        let labels = vec![1u8, 1, 1, 1, 0, 0, 0, 0, 0];
        let pred = [0u8, 0, 0, 0, 1, 1, 1, 1, 0];
        let mut tape = Tape::<f32>::new();
        let logits = Tensor::new(
            vec![1, 1, 3, 3],
            pred.iter().map(|&g| if g == 1 { 40.0 } else { -40.0 }).collect(),
        )
        .unwrap();
        let lv = tape.constant(logits);
        let l = dice_loss(&mut tape, lv, &labels, 1.0).unwrap();
        assert!((tape.value(l).item() as f64 - (1.0 - 1.0 / 9.0)).abs() < 1e-6);
    }

    #[test]
    fn dice_matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        for &c in &[1usize, 3] {
            let logits = Tensor::<f32>::randn(&[2, c, 6, 6], 1.5, &mut rng);
            let labels: Vec<u8> = (0..2 * 36)
                .map(|i| ((i * 5 + 1) % c.max(2)) as u8)
                .collect();
            let want = naive_dice(&logits, &labels, 1.0);
            let mut tape = Tape::<f32>::new();
            let lv = tape.constant(logits);
            let got = dice_loss(&mut tape, lv, &labels, 1.0).unwrap();
            assert!(
                (tape.value(got).item() as f64 - want).abs() < 1e-6,
                "c={c}: {} vs {want}",
                tape.value(got).item()
            );
        }
    }

    #[test]
    fn dice_stays_in_unit_range_and_xce_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        for trial in 0..20 {
            let c = 1 + trial % 4;
            let logits = Tensor::<f32>::randn(&[1, c, 4, 4], 5.0, &mut rng);
            let labels: Vec<u8> = (0..16).map(|i| ((i + trial) % c.max(2)) as u8).collect();
            let mut tape = Tape::<f32>::new();
            let lv = tape.constant(logits);
            let d = dice_loss(&mut tape, lv, &labels, 1.0).unwrap();
            let dv = tape.value(d).item();
            assert!((0.0..1.01).contains(&dv), "{dv}");
            let x = xce_loss(&mut tape, lv, &labels).unwrap();
            assert!(tape.value(x).item() >= 0.0);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let labels: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
        let mut store = ParamStore::<f64>::new();
        let logits = sample_away_from_kinks::<f64, _>(&[1, 3, 4, 4], &mut rng);
        let report = check_gradients(&mut store, &[logits], 1e-5, &|p, inputs| {
            let x = xce_loss(&mut p.tape, inputs[0], &labels)?;
            let d = dice_loss(&mut p.tape, inputs[0], &labels, 1.0)?;
            p.tape.add(x, d)
        })
        .unwrap();
        for t in &report.targets {
            assert!(t.rel_err < 1e-6, "{}: {}", t.name, t.rel_err);
        }

        let blabels: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
        let blogits = sample_away_from_kinks::<f64, _>(&[1, 1, 4, 4], &mut rng);
        let report = check_gradients(&mut store, &[blogits], 1e-5, &|p, inputs| {
            let x = xce_loss(&mut p.tape, inputs[0], &blabels)?;
            let d = dice_loss(&mut p.tape, inputs[0], &blabels, 1.0)?;
            p.tape.add(x, d)
        })
        .unwrap();
        for t in &report.targets {
            assert!(t.rel_err < 1e-6, "{}: {}", t.name, t.rel_err);
        }
    }

    fn toy_preds(
        tape: &mut Tape<f32>,
        main: Tensor<f32>,
        aux: Vec<Tensor<f32>>,
    ) -> PredictionSet {
        PredictionSet {
            logits_main: tape.constant(main),
            logits_aux: aux.into_iter().map(|t| tape.constant(t)).collect(),
        }
    }

    #[test]
    fn zero_epsilon_reduces_total_to_the_main_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        let mut store = ParamStore::<f32>::new();
        let raw = store.add("omega", Tensor::zeros(&[2]));
        let labels: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
        let mut pass = Pass::new(&mut store, false);
        let main = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let aux = vec![
            Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng),
            Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng),
        ];
        let preds = toy_preds(&mut pass.tape, main, aux);
        let cfg = LossConfig {
            epsilon: 0.0,
            ..LossConfig::default()
        };
        let out = total_loss(&mut pass, &preds, &labels, raw, &cfg).unwrap();
        assert_eq!(out.total_value, out.main_value);
    }

    #[test]
    fn equal_aux_losses_make_omega_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(85);
        let mut store = ParamStore::<f32>::new();
        let raw = store.add(
            "omega",
            Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap(),
        );
        let labels: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
        let mut pass = Pass::new(&mut store, false);
        let main = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let shared = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let preds = toy_preds(&mut pass.tape, main, vec![shared.clone(), shared.clone(), shared]);
        let cfg = LossConfig::default();
        let out = total_loss(&mut pass, &preds, &labels, raw, &cfg).unwrap();
        let a = out.aux_values[0];
        assert!((out.total_value - (out.main_value + 0.4 * a)).abs() < 1e-6);
        assert!((out.omega.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn known_loss_values_combine_per_the_weighting_rule() {
        // Uniform 2-class logits everywhere: every XCE term is ln 2 and the
        // Dice term has a closed form.
        let mut store = ParamStore::<f32>::new();
        let raw = store.add("omega", Tensor::zeros(&[4]));
        let labels: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
        let mut pass = Pass::new(&mut store, false);
        let zero = Tensor::zeros(&[1, 2, 4, 4]);
        let preds = toy_preds(&mut pass.tape, zero.clone(), vec![zero.clone(); 4]);
        let out = total_loss(&mut pass, &preds, &labels, raw, &LossConfig::default()).unwrap();
        let ln2 = core::f64::consts::LN_2;
        // Soft p = 0.5 on all 16 pixels, |G| = 8, s = 1:
        let dice = 1.0 - (2.0 * 0.5 * 8.0 + 1.0) / (8.0 + 8.0 + 1.0);
        let main = 0.5 * ln2 + 0.5 * dice;
        assert!((out.main_value - main).abs() < 1e-6, "{}", out.main_value);
        assert!((out.total_value - (main + 0.4 * ln2)).abs() < 1e-6);
        assert!(out.omega.iter().all(|&w| (w - 0.25).abs() < 1e-6));
    }

    #[test]
    fn permuting_stages_with_their_weights_preserves_the_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(86);
        let labels: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
        let main = Tensor::<f32>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let aux: Vec<Tensor<f32>> = (0..3)
            .map(|_| Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng))
            .collect();
        let raw = [0.5f32, -0.25, 1.0];

        let run = |order: [usize; 3]| -> f64 {
            let mut store = ParamStore::<f32>::new();
            let id = store.add(
                "omega",
                Tensor::new(vec![3], order.iter().map(|&i| raw[i]).collect()).unwrap(),
            );
            let mut pass = Pass::new(&mut store, false);
            let preds = toy_preds(
                &mut pass.tape,
                main.clone(),
                order.iter().map(|&i| aux[i].clone()).collect(),
            );
            total_loss(&mut pass, &preds, &labels, id, &LossConfig::default())
                .unwrap()
                .total_value
        };
        let a = run([0, 1, 2]);
        let b = run([2, 0, 1]);
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn gradients_reach_every_aux_head_and_the_stage_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(87);
        let mut store = ParamStore::<f32>::new();
        let raw = store.add("omega", Tensor::zeros(&[2]));
        let labels: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
        let mut pass = Pass::new(&mut store, true);
        let main = pass
            .tape
            .leaf(Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng));
        let aux: Vec<Var> = (0..2)
            .map(|_| pass.tape.leaf(Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng)))
            .collect();
        let preds = PredictionSet {
            logits_main: main,
            logits_aux: aux.clone(),
        };
        let out = total_loss(&mut pass, &preds, &labels, raw, &LossConfig::default()).unwrap();
        let total = out.total;
        pass.backward(total).unwrap();
        for &a in &aux {
            assert!(pass.tape.grad(a).unwrap().l2_norm() > 0.0);
        }
        let grads = pass.grads();
        let g = &grads.iter().find(|(id, _)| *id == raw).unwrap().1;
        assert!(g.l2_norm() > 0.0);
    }

    #[test]
    fn stage_count_mismatch_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let mut store = ParamStore::<f32>::new();
        let raw = store.add("omega", Tensor::zeros(&[4]));
        let labels: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
        let mut pass = Pass::new(&mut store, false);
        let main = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let aux = vec![Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng)];
        let preds = toy_preds(&mut pass.tape, main, aux);
        let err = total_loss(&mut pass, &preds, &labels, raw, &LossConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn aux_head_upsamples_to_label_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let mut store = ParamStore::<f32>::new();
        let head = AuxHead::new(&mut store, &mut rng, "head", 8, 3);
        let mut pass = Pass::new(&mut store, true);
        let feat = pass
            .tape
            .leaf(Tensor::randn(&[1, 8, 14, 14], 1.0, &mut rng));
        let y = head.forward(&mut pass, feat, 112).unwrap();
        assert_eq!(pass.tape.shape(y), [1, 3, 112, 112]);
        let s = pass.tape.sum(y);
        pass.backward(s).unwrap();
        assert!(pass.tape.grad(feat).unwrap().l2_norm() > 0.0);

        let mut pass = Pass::new(&mut store, false);
        let feat = pass.tape.constant(Tensor::randn(&[1, 8, 14, 15], 1.0, &mut rng));
        assert!(head.forward(&mut pass, feat, 112).is_err());
    }

    #[test]
    fn zero_weight_aux_head_emits_its_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let mut store = ParamStore::<f32>::new();
        let head = AuxHead::new(&mut store, &mut rng, "head", 4, 2);
        let w = store.find("head.weight").unwrap();
        let sh = store.value(w).shape().to_vec();
        *store.value_mut(w) = Tensor::zeros(&sh);
        let b = store.find("head.bias").unwrap();
        *store.value_mut(b) = Tensor::new(vec![2], vec![0.75, -0.5]).unwrap();
        let mut pass = Pass::new(&mut store, false);
        let feat = pass.tape.constant(Tensor::randn(&[1, 4, 8, 8], 1.0, &mut rng));
        let y = head.forward(&mut pass, feat, 16).unwrap();
        let data = pass.tape.value(y).data();
        assert!(data[..256].iter().all(|&v| v == 0.75));
        assert!(data[256..].iter().all(|&v| v == -0.5));
    }
}
