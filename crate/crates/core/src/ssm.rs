//! Selective state-space scan (Mamba-style) and its bidirectional block.
//!
//! Sequences are `[B, L, D]`. Per token t the scan computes a data-dependent
//! step size, input and readout projections, and a diagonal state update:
//!
//! ```text
//! delta_t  = softplus(x_t . w_delta + b_delta)          (scalar)
//! B_t[s]   = x_t . w_b[:,s]      C_t[s] = x_t . w_c[:,s]
//! A[d,s]   = -exp(log_a[d,s])
//! h_t[d,s] = exp(delta_t A[d,s]) h_{t-1}[d,s] + delta_t B_t[s] x_t[d]
//! y_t[d]   = sum_s C_t[s] h_t[d,s] + d_skip[d] x_t[d]
//! ```
//!
//! `log_a` is stored so the effective A is always negative, keeping
//! `|exp(delta A)| < 1` for positive step sizes. The backward pass stores
//! nothing at forward time; it recomputes the state trajectory and then
//! runs the adjoint recurrence in reverse time.

use crate::error::{Error, Result};
use crate::layers::{Linear, ParamStore, Pass, linear_std};
use crate::real::Real;
use crate::tape::{stable_sigmoid, stable_softplus, BackwardArgs, OpRule, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

impl<T: Real> Tape<T> {
    /// Reverse a `[B,L,D]` sequence along its time axis.
    pub fn seq_reverse(&mut self, x: Var) -> Result<Var> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 3 {
            return Err(Error::shape("seq_reverse", &sh, &[0, 0, 0]));
        }
        let out = reverse_time(self.value(x));
        Ok(self.push(out, vec![x], Box::new(SeqReverseOp)))
    }

    /// Causal depthwise 1-D convolution over the time axis.
    /// `x [B,L,D]`, `w [D,W]`, `b [D]`; left-padded with zeros.
    pub fn dw_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        let wsh = self.value(w).shape().to_vec();
        if xsh.len() != 3 || wsh.len() != 2 || wsh[0] != xsh[2] {
            return Err(Error::shape("dw_conv1d", &xsh, &wsh));
        }
        if self.value(b).shape() != [xsh[2]] {
            return Err(Error::shape("dw_conv1d bias", &wsh, self.value(b).shape()));
        }
        let (bsz, l, d) = (xsh[0], xsh[1], xsh[2]);
        let width = wsh[1];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..bsz {
            for t in 0..l {
                let orow = (bi * l + t) * d;
                for di in 0..d {
                    out[orow + di] = bd[di];
                }
                for j in 0..width {
                    let ti = t as isize - (width as isize - 1) + j as isize;
                    if ti < 0 {
                        continue;
                    }
                    let xrow = (bi * l + ti as usize) * d;
                    for di in 0..d {
                        out[orow + di] = out[orow + di] + wd[di * width + j] * xd[xrow + di];
                    }
                }
            }
        }
        let out = Tensor::from_parts(xsh, out);
        Ok(self.push(
            out,
            vec![x, w, b],
            Box::new(DwConv1dOp {
                b: bsz,
                l,
                d,
                width,
            }),
        ))
    }

    /// Forward-direction selective scan; see the module docs for the
    /// recurrence. `x [B,L,D]`, `log_a/w_b/w_c [D,S]`, `w_delta [D]`,
    /// `b_delta [1]`, `d_skip [D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        log_a: Var,
        w_b: Var,
        w_c: Var,
        w_delta: Var,
        b_delta: Var,
        d_skip: Var,
    ) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        let ash = self.value(log_a).shape().to_vec();
        if xsh.len() != 3 || ash.len() != 2 || ash[0] != xsh[2] {
            return Err(Error::shape("selective_scan", &xsh, &ash));
        }
        let (d, s) = (ash[0], ash[1]);
        for (name, var, want) in [
            ("selective_scan w_b", w_b, vec![d, s]),
            ("selective_scan w_c", w_c, vec![d, s]),
            ("selective_scan w_delta", w_delta, vec![d]),
            ("selective_scan b_delta", b_delta, vec![1]),
            ("selective_scan d_skip", d_skip, vec![d]),
        ] {
            if self.value(var).shape() != want {
                let _ = name;
                return Err(Error::shape("selective_scan params", self.value(var).shape(), &want));
            }
        }
        let op = SelectiveScanOp {
            b: xsh[0],
            l: xsh[1],
            d,
            s,
        };
        let out = op.forward_values(
            self.value(x).data(),
            self.value(log_a).data(),
            self.value(w_b).data(),
            self.value(w_c).data(),
            self.value(w_delta).data(),
            self.value(b_delta).data(),
            self.value(d_skip).data(),
            None,
        );
        let out = Tensor::from_parts(xsh, out);
        Ok(self.push(
            out,
            vec![x, log_a, w_b, w_c, w_delta, b_delta, d_skip],
            Box::new(op),
        ))
    }
}

fn reverse_time<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let sh = x.shape();
    let (b, l, d) = (sh[0], sh[1], sh[2]);
    let xd = x.data();
    let mut out = Vec::with_capacity(xd.len());
    for bi in 0..b {
        for t in (0..l).rev() {
            let off = (bi * l + t) * d;
            out.extend_from_slice(&xd[off..off + d]);
        }
    }
    Tensor::from_parts(sh.to_vec(), out)
}

struct SeqReverseOp;

impl<T: Real> OpRule<T> for SeqReverseOp {
    fn name(&self) -> &'static str {
        "seq_reverse"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(reverse_time(args.grad))]
    }
}

struct DwConv1dOp {
    b: usize,
    l: usize,
    d: usize,
    width: usize,
}

impl<T: Real> OpRule<T> for DwConv1dOp {
    fn name(&self) -> &'static str {
        "dw_conv1d"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = args.grad.data();
        let x = args.inputs[0].data();
        let w = args.inputs[1].data();
        let (bsz, l, d, width) = (self.b, self.l, self.d, self.width);
        let dx = args.needs[0].then(|| {
            let mut dx = vec![T::zero(); x.len()];
            for bi in 0..bsz {
                for t in 0..l {
                    let grow = (bi * l + t) * d;
                    for j in 0..width {
                        let ti = t as isize - (width as isize - 1) + j as isize;
                        if ti < 0 {
                            continue;
                        }
                        let xrow = (bi * l + ti as usize) * d;
                        for di in 0..d {
                            dx[xrow + di] += w[di * width + j] * g[grow + di];
                        }
                    }
                }
            }
            Tensor::from_parts(args.inputs[0].shape().to_vec(), dx)
        });
        let dw = args.needs[1].then(|| {
            let mut dw = vec![0.0f64; d * width];
            for bi in 0..bsz {
                for t in 0..l {
                    let grow = (bi * l + t) * d;
                    for j in 0..width {
                        let ti = t as isize - (width as isize - 1) + j as isize;
                        if ti < 0 {
                            continue;
                        }
                        let xrow = (bi * l + ti as usize) * d;
                        for di in 0..d {
                            dw[di * width + j] += (x[xrow + di] * g[grow + di]).as_f64();
                        }
                    }
                }
            }
            Tensor::from_parts(
                args.inputs[1].shape().to_vec(),
                dw.into_iter().map(T::from_f64).collect(),
            )
        });
        let db = args.needs[2].then(|| {
            let mut db = vec![0.0f64; d];
            for row in 0..bsz * l {
                for di in 0..d {
                    db[di] += g[row * d + di].as_f64();
                }
            }
            Tensor::from_parts(vec![d], db.into_iter().map(T::from_f64).collect())
        });
        vec![dx, dw, db]
    }
}

struct SelectiveScanOp {
    b: usize,
    l: usize,
    d: usize,
    s: usize,
}

/// Per-sequence trajectory captured during recomputation for the backward
/// sweep. `h` holds h_0..h_L inclusive, so `h[t]` is the state *entering*
/// step t and `h[t+1]` the state it produces.
struct Trajectory<T> {
    h: Vec<T>,     // (L+1) * D * S
    delta: Vec<T>, // L
    p: Vec<T>,     // L, pre-softplus step logits
    bt: Vec<T>,    // L * S
    ct: Vec<T>,    // L * S
}

impl SelectiveScanOp {
    /// Runs the recurrence for all sequences. When `capture` is given, the
    /// per-step internals of each sequence are stored for the adjoint sweep.
    #[allow(clippy::too_many_arguments)]
    fn forward_values<T: Real>(
        &self,
        x: &[T],
        log_a: &[T],
        w_b: &[T],
        w_c: &[T],
        w_delta: &[T],
        b_delta: &[T],
        d_skip: &[T],
        mut capture: Option<&mut Vec<Trajectory<T>>>,
    ) -> Vec<T> {
        let (bsz, l, d, s) = (self.b, self.l, self.d, self.s);
        let a: Vec<T> = log_a.iter().map(|&v| -v.exp()).collect();
        let mut out = vec![T::zero(); x.len()];
        let mut h = vec![T::zero(); d * s];
        let mut bt = vec![T::zero(); s];
        let mut ct = vec![T::zero(); s];
        for bi in 0..bsz {
            h.iter_mut().for_each(|v| *v = T::zero());
            let mut traj = capture.as_ref().map(|_| Trajectory {
                h: vec![T::zero(); (l + 1) * d * s],
                delta: Vec::with_capacity(l),
                p: Vec::with_capacity(l),
                bt: Vec::with_capacity(l * s),
                ct: Vec::with_capacity(l * s),
            });
            for t in 0..l {
                let xt = &x[(bi * l + t) * d..(bi * l + t + 1) * d];
                let mut p = b_delta[0];
                for di in 0..d {
                    p = p + xt[di] * w_delta[di];
                }
                let delta = stable_softplus(p);
                for si in 0..s {
                    let mut bv = T::zero();
                    let mut cv = T::zero();
                    for di in 0..d {
                        bv = bv + xt[di] * w_b[di * s + si];
                        cv = cv + xt[di] * w_c[di * s + si];
                    }
                    bt[si] = bv;
                    ct[si] = cv;
                }
                let yrow = &mut out[(bi * l + t) * d..(bi * l + t + 1) * d];
                for di in 0..d {
                    let hrow = &mut h[di * s..(di + 1) * s];
                    let arow = &a[di * s..(di + 1) * s];
                    let xv = xt[di];
                    let mut y = d_skip[di] * xv;
                    for si in 0..s {
                        let abar = (delta * arow[si]).exp();
                        hrow[si] = abar * hrow[si] + delta * bt[si] * xv;
                        y = y + ct[si] * hrow[si];
                    }
                    yrow[di] = y;
                }
                if let Some(traj) = traj.as_mut() {
                    traj.delta.push(delta);
                    traj.p.push(p);
                    traj.bt.extend_from_slice(&bt);
                    traj.ct.extend_from_slice(&ct);
                    traj.h[(t + 1) * d * s..(t + 2) * d * s].copy_from_slice(&h);
                }
            }
            if let Some(capture) = capture.as_mut() {
                capture.push(traj.expect("capture implies trajectory"));
            }
        }
        out
    }
}

impl<T: Real> OpRule<T> for SelectiveScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (bsz, l, d, s) = (self.b, self.l, self.d, self.s);
        let x = args.inputs[0].data();
        let log_a = args.inputs[1].data();
        let w_b = args.inputs[2].data();
        let w_c = args.inputs[3].data();
        let w_delta = args.inputs[4].data();
        let b_delta = args.inputs[5].data();
        let d_skip = args.inputs[6].data();
        let g = args.grad.data();

        let mut trajectories = Vec::with_capacity(bsz);
        let _ = self.forward_values(
            x,
            log_a,
            w_b,
            w_c,
            w_delta,
            b_delta,
            d_skip,
            Some(&mut trajectories),
        );
        let a: Vec<T> = log_a.iter().map(|&v| -v.exp()).collect();

        let mut dx = vec![T::zero(); x.len()];
        let mut d_log_a = vec![0.0f64; d * s];
        let mut d_w_b = vec![0.0f64; d * s];
        let mut d_w_c = vec![0.0f64; d * s];
        let mut d_w_delta = vec![0.0f64; d];
        let mut d_b_delta = 0.0f64;
        let mut d_d_skip = vec![0.0f64; d];

        let mut hhat = vec![T::zero(); d * s];
        let mut db_t = vec![T::zero(); s];
        let mut dc_t = vec![T::zero(); s];
        for (bi, traj) in trajectories.iter().enumerate() {
            hhat.iter_mut().for_each(|v| *v = T::zero());
            for t in (0..l).rev() {
                let xt = &x[(bi * l + t) * d..(bi * l + t + 1) * d];
                let gt = &g[(bi * l + t) * d..(bi * l + t + 1) * d];
                let dxt = &mut dx[(bi * l + t) * d..(bi * l + t + 1) * d];
                let h_prev = &traj.h[t * d * s..(t + 1) * d * s];
                let h_cur = &traj.h[(t + 1) * d * s..(t + 2) * d * s];
                let bt = &traj.bt[t * s..(t + 1) * s];
                let ct = &traj.ct[t * s..(t + 1) * s];
                let delta = traj.delta[t];

                db_t.iter_mut().for_each(|v| *v = T::zero());
                dc_t.iter_mut().for_each(|v| *v = T::zero());
                let mut d_delta = 0.0f64;

                for di in 0..d {
                    let row = di * s;
                    let arow = &a[row..row + s];
                    let gd = gt[di];
                    let xv = xt[di];
                    // y_t[d] = sum_s C_t[s] h_t[d,s] + d_skip[d] x_t[d]
                    d_d_skip[di] += (gd * xv).as_f64();
                    dxt[di] += gd * d_skip[di];
                    for si in 0..s {
                        let hh = hhat[row + si] + gd * ct[si];
                        dc_t[si] += gd * h_cur[row + si];
                        // h_t = abar h_{t-1} + delta B_t x_t
                        let abar = (delta * arow[si]).exp();
                        let via_abar = hh * h_prev[row + si] * abar;
                        d_delta += (via_abar * arow[si]).as_f64();
                        d_log_a[row + si] += (via_abar * delta).as_f64() * arow[si].as_f64();
                        d_delta += (hh * bt[si] * xv).as_f64();
                        db_t[si] += hh * delta * xv;
                        dxt[di] += hh * delta * bt[si];
                        // Propagate the state adjoint to step t-1.
                        hhat[row + si] = hh * abar;
                    }
                }
                // B_t and C_t are projections of x_t.
                for di in 0..d {
                    let mut acc = T::zero();
                    for si in 0..s {
                        d_w_b[di * s + si] += (xt[di] * db_t[si]).as_f64();
                        d_w_c[di * s + si] += (xt[di] * dc_t[si]).as_f64();
                        acc = acc + w_b[di * s + si] * db_t[si] + w_c[di * s + si] * dc_t[si];
                    }
                    dxt[di] += acc;
                }
                // delta_t = softplus(x_t . w_delta + b_delta)
                let dp = T::from_f64(d_delta) * stable_sigmoid(traj.p[t]);
                d_b_delta += dp.as_f64();
                for di in 0..d {
                    d_w_delta[di] += (dp * xt[di]).as_f64();
                    dxt[di] += dp * w_delta[di];
                }
            }
        }

        let f64_tensor = |shape: &[usize], v: Vec<f64>| {
            Some(Tensor::from_parts(
                shape.to_vec(),
                v.into_iter().map(T::from_f64).collect(),
            ))
        };
        vec![
            args.needs[0].then(|| Tensor::from_parts(args.inputs[0].shape().to_vec(), dx)),
            if args.needs[1] {
                f64_tensor(&[d, s], d_log_a)
            } else {
                None
            },
            if args.needs[2] {
                f64_tensor(&[d, s], d_w_b)
            } else {
                None
            },
            if args.needs[3] {
                f64_tensor(&[d, s], d_w_c)
            } else {
                None
            },
            if args.needs[4] {
                f64_tensor(&[d], d_w_delta)
            } else {
                None
            },
            if args.needs[5] {
                f64_tensor(&[1], vec![d_b_delta])
            } else {
                None
            },
            if args.needs[6] {
                f64_tensor(&[d], d_d_skip)
            } else {
                None
            },
        ]
    }
}

// ---- parameter bundles -------------------------------------------------------

/// One scan direction's parameters.
pub struct SsmParams {
    pub log_a: crate::layers::ParamId,
    pub w_b: crate::layers::ParamId,
    pub w_c: crate::layers::ParamId,
    pub w_delta: crate::layers::ParamId,
    pub b_delta: crate::layers::ParamId,
    pub d_skip: crate::layers::ParamId,
}

impl SsmParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_model: usize,
        d_state: usize,
    ) -> Self {
        // A = -(s+1) per state index, the usual diagonal real initialization.
        let log_a = Tensor::from_fn(&[d_model, d_state], |i| {
            T::from_f64(((i % d_state) as f64 + 1.0).ln())
        });
        let std = linear_std(d_model);
        // softplus(b_delta) == 0.05, a small positive initial step size.
        let b0 = T::from_f64((0.05f64).exp_m1().ln());
        SsmParams {
            log_a: store.add(&format!("{name}.log_a"), log_a),
            w_b: store.add(
                &format!("{name}.w_b"),
                Tensor::randn(&[d_model, d_state], std, rng),
            ),
            w_c: store.add(
                &format!("{name}.w_c"),
                Tensor::randn(&[d_model, d_state], std, rng),
            ),
            w_delta: store.add(
                &format!("{name}.w_delta"),
                Tensor::randn(&[d_model], std, rng),
            ),
            b_delta: store.add(&format!("{name}.b_delta"), Tensor::full(&[1], b0)),
            d_skip: store.add(&format!("{name}.d_skip"), Tensor::ones(&[d_model])),
        }
    }
}

/// Scan a sequence in one direction. Reverse is forward applied to the
/// time-reversed sequence, re-reversed.
pub fn scan_direction<T: Real>(
    p: &mut Pass<'_, T>,
    seq: Var,
    params: &SsmParams,
    dir: Direction,
) -> Result<Var> {
    let log_a = p.param(params.log_a);
    let w_b = p.param(params.w_b);
    let w_c = p.param(params.w_c);
    let w_delta = p.param(params.w_delta);
    let b_delta = p.param(params.b_delta);
    let d_skip = p.param(params.d_skip);
    match dir {
        Direction::Forward => p
            .tape
            .selective_scan(seq, log_a, w_b, w_c, w_delta, b_delta, d_skip),
        Direction::Reverse => {
            let r = p.tape.seq_reverse(seq)?;
            let y = p
                .tape
                .selective_scan(r, log_a, w_b, w_c, w_delta, b_delta, d_skip)?;
            p.tape.seq_reverse(y)
        }
    }
}

/// Sum of the forward and reverse scans, the raw bidirectional core without
/// the block wrapper. Passing the same bundle twice ties the directions.
pub fn bimamba_scan<T: Real>(
    p: &mut Pass<'_, T>,
    seq: Var,
    fwd: &SsmParams,
    rev: &SsmParams,
) -> Result<Var> {
    let yf = scan_direction(p, seq, fwd, Direction::Forward)?;
    let yr = scan_direction(p, seq, rev, Direction::Reverse)?;
    p.tape.add(yf, yr)
}

/// Standard Mamba block around the bidirectional scan: input projection to
/// 2x the inner width, a split into scan path and gate, causal depthwise
/// conv + SiLU on the scan path, the combined scan, SiLU gating, and an
/// output projection back to the model width.
pub struct BiMambaBlock {
    pub d_model: usize,
    pub d_inner: usize,
    in_proj: Linear,
    conv_w: crate::layers::ParamId,
    conv_b: crate::layers::ParamId,
    out_proj: Linear,
    fwd: SsmParams,
    rev: SsmParams,
}

pub const CONV1D_WIDTH: usize = 4;
pub const EXPAND: usize = 2;

impl BiMambaBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_model: usize,
        d_state: usize,
    ) -> Self {
        let d_inner = EXPAND * d_model;
        let in_proj = Linear::new(store, rng, &format!("{name}.in_proj"), d_model, 2 * d_inner);
        let conv_w = store.add(
            &format!("{name}.conv1d.weight"),
            Tensor::randn(&[d_inner, CONV1D_WIDTH], linear_std(CONV1D_WIDTH), rng),
        );
        let conv_b = store.add(&format!("{name}.conv1d.bias"), Tensor::zeros(&[d_inner]));
        let out_proj = Linear::new(store, rng, &format!("{name}.out_proj"), d_inner, d_model);
        let fwd = SsmParams::new(store, rng, &format!("{name}.fwd"), d_inner, d_state);
        let rev = SsmParams::new(store, rng, &format!("{name}.rev"), d_inner, d_state);
        BiMambaBlock {
            d_model,
            d_inner,
            in_proj,
            conv_w,
            conv_b,
            out_proj,
            fwd,
            rev,
        }
    }

    pub fn forward<T: Real>(&self, p: &mut Pass<'_, T>, seq: Var) -> Result<Var> {
        let sh = p.tape.shape(seq).to_vec();
        if sh.len() != 3 || sh[2] != self.d_model {
            return Err(Error::shape("bimamba", &sh, &[0, 0, self.d_model]));
        }
        let (b, l) = (sh[0], sh[1]);
        let flat = p.tape.reshape(seq, vec![b * l, self.d_model])?;
        let xz = self.in_proj.forward(p, flat)?;
        let xz = p.tape.reshape(xz, vec![b, l, 2 * self.d_inner])?;
        let xpath = p.tape.slice(xz, 2, 0, self.d_inner)?;
        let gate = p.tape.slice(xz, 2, self.d_inner, self.d_inner)?;

        let cw = p.param(self.conv_w);
        let cb = p.param(self.conv_b);
        let xc = p.tape.dw_conv1d(xpath, cw, cb)?;
        let xc = p.tape.silu(xc);

        let y = bimamba_scan(p, xc, &self.fwd, &self.rev)?;

        let gate = p.tape.silu(gate);
        let y = p.tape.mul(y, gate)?;
        let y = p.tape.reshape(y, vec![b * l, self.d_inner])?;
        let y = self.out_proj.forward(p, y)?;
        p.tape.reshape(y, vec![b, l, self.d_model])
    }
}
