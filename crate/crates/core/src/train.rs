//! Adam optimizer, the training step, and hard-Dice evaluation.

use crate::error::{Error, Result};
use crate::layers::{ParamId, ParamStore, Pass};
use crate::loss::{total_loss, LossOutput};
use crate::model::Model;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated lazily per
/// parameter and exposed for checkpointing.
pub struct Adam<T: Real> {
    pub cfg: AdamConfig,
    pub t: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(self.cfg.beta1), T::from_f64(self.cfg.beta2));
        let (nb1, nb2) = (
            T::from_f64(1.0 - self.cfg.beta1),
            T::from_f64(1.0 - self.cfg.beta2),
        );
        let step = T::from_f64(self.cfg.lr / bc1);
        let denom_scale = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(self.cfg.eps);
        for (id, g) in grads {
            let idx = id.0;
            if self.moments.len() <= idx {
                self.moments.resize_with(idx + 1, || None);
            }
            let (m, v) = self.moments[idx].get_or_insert_with(|| {
                (Tensor::zeros(g.shape()), Tensor::zeros(g.shape()))
            });
            let value = store.value_mut(*id);
            for (((w, &gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + nb1 * gi;
                *vi = b2 * *vi + nb2 * gi * gi;
                *w -= step * *mi / ((*vi).sqrt() * denom_scale + eps);
            }
        }
    }

    /// Moment tensors paired with parameter names, for checkpointing.
    pub fn state<'a>(
        &'a self,
        store: &'a ParamStore<T>,
    ) -> impl Iterator<Item = (String, &'a Tensor<T>, &'a Tensor<T>)> + 'a {
        self.moments.iter().enumerate().filter_map(|(i, mv)| {
            mv.as_ref()
                .map(|(m, v)| (store.entry(ParamId(i)).name.clone(), m, v))
        })
    }

    pub fn restore_moment(&mut self, id: ParamId, m: Tensor<T>, v: Tensor<T>) {
        let idx = id.0;
        if self.moments.len() <= idx {
            self.moments.resize_with(idx + 1, || None);
        }
        self.moments[idx] = Some((m, v));
    }
}

/// One mini-batch of images with their label maps, already assembled into
/// a `[N,1,H,W]` tensor and a flat `[N*H*W]` class map.
pub struct Batch<T: Real> {
    pub images: Tensor<T>,
    pub labels: Vec<u8>,
}

/// Forward, loss, backward, update. A non-finite loss aborts with a dump
/// of prediction-map norms instead of silently corrupting the weights.
pub fn train_step<T: Real>(
    model: &Model,
    store: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    batch: &Batch<T>,
) -> Result<LossOutput> {
    let loss_cfg = model.cfg.loss_config();
    let mut pass = Pass::new(store, true);
    let image = pass.tape.constant(batch.images.clone());
    let preds = model.forward(&mut pass, image)?;
    let out = total_loss(&mut pass, &preds, &batch.labels, model.raw_omega, &loss_cfg)?;
    if !out.total_value.is_finite() {
        let mut diag = format!("non-finite loss {}", out.total_value);
        let main = pass.tape.value(preds.logits_main);
        diag.push_str(&format!("; |main|={:.3e}", main.l2_norm()));
        for (i, &v) in preds.logits_aux.iter().enumerate() {
            diag.push_str(&format!(
                ", |aux{}|={:.3e}",
                i + 1,
                pass.tape.value(v).l2_norm()
            ));
        }
        return Err(Error::Numeric(diag));
    }
    let total = out.total;
    pass.backward(total)?;
    let grads = pass.grads();
    drop(pass);
    opt.apply(store, &grads);
    Ok(out)
}

/// Per-class overlap tallies accumulated across samples (micro-average):
/// Dice = 2|P and G| / (|P| + |G|), with the empty-vs-empty case scored 1.
#[derive(Clone, Debug, Default)]
pub struct DiceTally {
    pub inter: Vec<u64>,
    pub pred: Vec<u64>,
    pub truth: Vec<u64>,
}

impl DiceTally {
    pub fn new(classes: usize) -> Self {
        DiceTally {
            inter: vec![0; classes],
            pred: vec![0; classes],
            truth: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) {
        for (&p, &g) in pred.iter().zip(truth) {
            if p == g {
                self.inter[p as usize] += 1;
            }
            self.pred[p as usize] += 1;
            self.truth[g as usize] += 1;
        }
    }

    pub fn dice(&self, class: usize) -> f64 {
        let denom = self.pred[class] + self.truth[class];
        if denom == 0 {
            1.0
        } else {
            2.0 * self.inter[class] as f64 / denom as f64
        }
    }

    /// Mean over foreground classes (class 0 is background in multiclass
    /// tallies; a 2-entry tally from binary mode also treats 0 as
    /// background).
    pub fn mean_foreground(&self) -> f64 {
        let n = self.inter.len();
        (1..n).map(|c| self.dice(c)).sum::<f64>() / (n - 1) as f64
    }
}

/// Argmax class map (multiclass) or 0.5-threshold map (binary) from a
/// logits tensor.
pub fn hard_predictions<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    let sh = logits.shape();
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    let data = logits.data();
    for ni in 0..n {
        for px in 0..plane {
            let base = ni * c * plane + px;
            if c == 1 {
                out.push((data[base] > T::zero()) as u8);
            } else {
                let mut best = 0usize;
                let mut bv = data[base];
                for ci in 1..c {
                    let v = data[base + ci * plane];
                    if v > bv {
                        bv = v;
                        best = ci;
                    }
                }
                out.push(best as u8);
            }
        }
    }
    out
}

/// Loss breakdown and dice tallies for a whole dataset in eval mode.
pub struct EvalSummary {
    pub tally: DiceTally,
    pub loss_main: f64,
    pub loss_aux_sum: f64,
    pub loss_total: f64,
}

pub fn evaluate<T: Real>(
    model: &Model,
    store: &mut ParamStore<T>,
    batches: &[Batch<T>],
) -> Result<EvalSummary> {
    if batches.is_empty() {
        return Err(Error::Config("evaluation needs at least one sample".into()));
    }
    let classes = model.cfg.classes.max(2);
    let mut tally = DiceTally::new(classes);
    let loss_cfg = model.cfg.loss_config();
    let (mut lm, mut la, mut lt) = (0.0, 0.0, 0.0);
    for batch in batches {
        let mut pass = Pass::new(store, false);
        let image = pass.tape.constant(batch.images.clone());
        let preds = model.forward(&mut pass, image)?;
        let out = total_loss(&mut pass, &preds, &batch.labels, model.raw_omega, &loss_cfg)?;
        tally.add(
            &hard_predictions(pass.tape.value(preds.logits_main)),
            &batch.labels,
        );
        lm += out.main_value;
        la += out.aux_values.iter().sum::<f64>();
        lt += out.total_value;
    }
    let n = batches.len() as f64;
    Ok(EvalSummary {
        tally,
        loss_main: lm / n,
        loss_aux_sum: la / n,
        loss_total: lt / n,
    })
}
