//! Large-window Mamba scale (LMS) decoder blocks.
//!
//! Each block runs two residual-wrapped scans over a feature map:
//!
//! * PiM scans the pixels inside every m x n window independently,
//!   modelling local neighborhoods.
//! * PaM average-pools each window to one token, scans the window grid as
//!   a single sequence, and unpools, coupling distant windows.
//!
//! Both are `scan(norm(tokens)) + scale * input` with one learnable scale
//! per block. Blocks above the deepest one then upsample 2x, halve
//! channels with a 1x1 conv, and fuse the matching encoder skip by
//! concat + 1x1 conv.

use crate::encoder::ResidualBlock;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, LayerNorm, ParamStore, Pass, ResidualScale};
use crate::real::Real;
use crate::ssm::BiMambaBlock;
use crate::tape::{BackwardArgs, OpRule, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Index bookkeeping shared by the partition op and its inverse: a map of
/// `[N,C,H,W]` (already padded to multiples of the window) seen as
/// `[N*(H/m)*(W/n)]` sequences of `m*n` tokens with `C` features.
#[derive(Clone, Copy)]
struct WindowGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    m: usize,
    wn: usize,
}

impl WindowGeom {
    fn seq_shape(&self) -> Vec<usize> {
        vec![
            self.n * (self.h / self.m) * (self.w / self.wn),
            self.m * self.wn,
            self.c,
        ]
    }

    fn map_shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }

    /// Copies between map and sequence layouts; the same loop body serves
    /// both directions since the mapping is a bijection.
    fn copy<T: Real>(&self, map_to_seq: bool, src: &[T], dst: &mut [T]) {
        let (gh, gw) = (self.h / self.m, self.w / self.wn);
        for ni in 0..self.n {
            for wy in 0..gh {
                for wx in 0..gw {
                    let win = (ni * gh + wy) * gw + wx;
                    for iy in 0..self.m {
                        for ix in 0..self.wn {
                            let tok = iy * self.wn + ix;
                            let y = wy * self.m + iy;
                            let x = wx * self.wn + ix;
                            for ci in 0..self.c {
                                let map_idx = ((ni * self.c + ci) * self.h + y) * self.w + x;
                                let seq_idx = (win * self.m * self.wn + tok) * self.c + ci;
                                if map_to_seq {
                                    dst[seq_idx] = src[map_idx];
                                } else {
                                    dst[map_idx] = src[seq_idx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

struct WindowPartitionOp {
    geom: WindowGeom,
}

impl<T: Real> OpRule<T> for WindowPartitionOp {
    fn name(&self) -> &'static str {
        "window_partition"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let mut dx = vec![T::zero(); args.inputs[0].numel()];
        self.geom.copy(false, args.grad.data(), &mut dx);
        vec![Some(Tensor::from_parts(self.geom.map_shape(), dx))]
    }
}

struct WindowMergeOp {
    geom: WindowGeom,
}

impl<T: Real> OpRule<T> for WindowMergeOp {
    fn name(&self) -> &'static str {
        "window_merge"
    }

    fn backward(&self, args: &BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> {
        let mut dx = vec![T::zero(); args.inputs[0].numel()];
        self.geom.copy(true, args.grad.data(), &mut dx);
        vec![Some(Tensor::from_parts(self.geom.seq_shape(), dx))]
    }
}

impl<T: Real> Tape<T> {
    /// Splits a feature map into m x n windows and flattens each window
    /// row-major into a token sequence: `[N,C,H,W]` to
    /// `[N*(H/m)*(W/n), m*n, C]`. Extents that do not divide are
    /// zero-padded on the high side first.
    pub fn window_partition(&mut self, x: Var, m: usize, n: usize) -> Result<Var> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 4 || m == 0 || n == 0 {
            return Err(Error::shape("window_partition", &sh, &[m, n]));
        }
        let x = self.pad_to_multiple(x, m, n)?;
        let sh = self.value(x).shape().to_vec();
        let geom = WindowGeom {
            n: sh[0],
            c: sh[1],
            h: sh[2],
            w: sh[3],
            m,
            wn: n,
        };
        let mut out = vec![T::zero(); self.value(x).numel()];
        geom.copy(true, self.value(x).data(), &mut out);
        let out = Tensor::from_parts(geom.seq_shape(), out);
        Ok(self.push(out, vec![x], Box::new(WindowPartitionOp { geom })))
    }

    /// Inverse of `window_partition` for a map of `n_batch x c` channels and
    /// original extents `h x w` (pre-padding); the padded region is cropped
    /// away.
    pub fn window_merge(
        &mut self,
        seq: Var,
        m: usize,
        n: usize,
        n_batch: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let hp = h.div_ceil(m) * m;
        let wp = w.div_ceil(n) * n;
        let geom = WindowGeom {
            n: n_batch,
            c,
            h: hp,
            w: wp,
            m,
            wn: n,
        };
        if self.value(seq).shape() != geom.seq_shape() {
            return Err(Error::shape(
                "window_merge",
                self.value(seq).shape(),
                &geom.seq_shape(),
            ));
        }
        let mut out = vec![T::zero(); n_batch * c * hp * wp];
        geom.copy(false, self.value(seq).data(), &mut out);
        let out = Tensor::from_parts(geom.map_shape(), out);
        let merged = self.push(out, vec![seq], Box::new(WindowMergeOp { geom }));
        self.crop2d(merged, h, w)
    }

    fn pad_to_multiple(&mut self, x: Var, m: usize, n: usize) -> Result<Var> {
        let sh = self.value(x).shape();
        let (h, w) = (sh[2], sh[3]);
        let (ph, pw) = (h.div_ceil(m) * m - h, w.div_ceil(n) * n - w);
        if ph == 0 && pw == 0 {
            Ok(x)
        } else {
            self.zero_pad2d(x, ph, pw)
        }
    }
}

/// One decoder block: PiM scan, PaM scan, then (above the deepest stage)
/// 2x upsample and skip fusion. The scan pair can be swapped for a
/// width-matched residual conv block to ablate the windowed scans while
/// keeping the decoder plumbing identical.
pub struct LmsBlock {
    pub m: usize,
    pub n: usize,
    c: usize,
    core: Core,
    fuse: Option<Fusion>,
}

enum Core {
    Scan {
        norm_pim: LayerNorm,
        pim_scan: BiMambaBlock,
        norm_pam: LayerNorm,
        pam_scan: BiMambaBlock,
        scale: ResidualScale,
    },
    Plain(ResidualBlock),
}

struct Fusion {
    up_conv: Conv2d,
    fuse_conv: Conv2d,
}

impl LmsBlock {
    /// `c` is the block's channel width; `skip_c` the encoder skip width
    /// fused after upsampling (`None` for the final, non-upsampling block).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c: usize,
        m: usize,
        n: usize,
        d_state: usize,
        skip_c: Option<usize>,
    ) -> Self {
        assert!(m * n >= 4, "windows below 2x2 degenerate the pixel scan");
        let core = Core::Scan {
            norm_pim: LayerNorm::new(store, &format!("{name}.pim.norm"), c),
            pim_scan: BiMambaBlock::new(store, rng, &format!("{name}.pim"), c, d_state),
            norm_pam: LayerNorm::new(store, &format!("{name}.pam.norm"), c),
            pam_scan: BiMambaBlock::new(store, rng, &format!("{name}.pam"), c, d_state),
            scale: ResidualScale::new(store, &format!("{name}.scale")),
        };
        let fuse = Self::fusion(store, rng, name, c, skip_c);
        LmsBlock { m, n, c, core, fuse }
    }

    /// Scan-free variant with a residual conv body of the same width.
    pub fn new_plain<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c: usize,
        skip_c: Option<usize>,
    ) -> Self {
        let core = Core::Plain(ResidualBlock::new(
            store,
            rng,
            &format!("{name}.plain"),
            c,
            c,
            1,
        ));
        let fuse = Self::fusion(store, rng, name, c, skip_c);
        LmsBlock {
            m: 1,
            n: 1,
            c,
            core,
            fuse,
        }
    }

    fn fusion<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c: usize,
        skip_c: Option<usize>,
    ) -> Option<Fusion> {
        skip_c.map(|sc| Fusion {
            up_conv: Conv2d::new(store, rng, &format!("{name}.up_conv"), c, c / 2, 1, 1),
            fuse_conv: Conv2d::new(store, rng, &format!("{name}.fuse_conv"), c / 2 + sc, sc, 1, 1),
        })
    }

    /// Window extents clamped to the current map so oversized configured
    /// windows degrade to whole-extent scans.
    fn window(&self, h: usize, w: usize) -> (usize, usize) {
        (self.m.min(h), self.n.min(w))
    }

    /// Pixel-scan within windows: `scan(norm(window tokens)) + scale * x`.
    pub fn pim<T: Real>(&self, p: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let Core::Scan {
            norm_pim,
            pim_scan,
            scale,
            ..
        } = &self.core
        else {
            return Err(Error::Contract("pim called on a scan-free block".into()));
        };
        let sh = p.tape.shape(x).to_vec();
        let (m, n) = self.window(sh[2], sh[3]);
        let seq = p.tape.window_partition(x, m, n)?;
        let seq = norm_pim.forward(p, seq)?;
        let y = pim_scan.forward(p, seq)?;
        let y = p.tape.window_merge(y, m, n, sh[0], sh[1], sh[2], sh[3])?;
        scale.apply(p, y, x)
    }

    /// Window-grid scan: pool each window to one token, scan the grid
    /// row-major, unpool, `+ scale * x`.
    pub fn pam<T: Real>(&self, p: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let Core::Scan {
            norm_pam,
            pam_scan,
            scale,
            ..
        } = &self.core
        else {
            return Err(Error::Contract("pam called on a scan-free block".into()));
        };
        let sh = p.tape.shape(x).to_vec();
        let (m, n) = self.window(sh[2], sh[3]);
        let padded = p.tape.pad_to_multiple(x, m, n)?;
        let pooled = p.tape.avg_pool(padded, m, n)?;
        let psh = p.tape.shape(pooled).to_vec();
        // The whole pooled grid is one sequence per sample.
        let seq = p.tape.window_partition(pooled, psh[2], psh[3])?;
        let seq = norm_pam.forward(p, seq)?;
        let y = pam_scan.forward(p, seq)?;
        let y = p
            .tape
            .window_merge(y, psh[2], psh[3], psh[0], psh[1], psh[2], psh[3])?;
        let y = p.tape.unpool(y, m, n)?;
        let y = p.tape.crop2d(y, sh[2], sh[3])?;
        scale.apply(p, y, x)
    }

    /// Full block. With a skip: scans (or the plain body), 2x upsample,
    /// channel-halving 1x1 conv, concat with the skip, 1x1 conv to the skip
    /// width. Without: the body only.
    pub fn forward<T: Real>(&self, p: &mut Pass<'_, T>, x: Var, skip: Option<Var>) -> Result<Var> {
        let sh = p.tape.shape(x).to_vec();
        if sh.len() != 4 || sh[1] != self.c {
            return Err(Error::shape("lms_block", &sh, &[0, self.c, 0, 0]));
        }
        let y = match &self.core {
            Core::Scan { .. } => {
                let y = self.pim(p, x)?;
                self.pam(p, y)?
            }
            Core::Plain(body) => body.forward(p, x)?,
        };
        match (&self.fuse, skip) {
            (Some(fuse), Some(skip)) => {
                let up = p.tape.upsample_bilinear_2x(y)?;
                let up = fuse.up_conv.forward(p, up)?;
                if p.tape.shape(up)[2..] != p.tape.shape(skip)[2..] {
                    return Err(Error::shape(
                        "lms_block skip",
                        p.tape.shape(skip),
                        p.tape.shape(up),
                    ));
                }
                let cat = p.tape.concat(&[up, skip], 1)?;
                fuse.fuse_conv.forward(p, cat)
            }
            (None, None) => Ok(y),
            _ => Err(Error::Contract(
                "lms_block fusion stage and skip presence must agree".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{check_gradients, sample_away_from_kinks};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_block(
        store: &mut ParamStore<f32>,
        rng: &mut ChaCha8Rng,
        c: usize,
        m: usize,
        n: usize,
    ) -> LmsBlock {
        LmsBlock::new(store, rng, "lms", c, m, n, 4, None)
    }

    #[test]
    fn partition_counts_windows_and_tokens() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::randn(
            &[2, 3, 8, 8],
            1.0,
            &mut ChaCha8Rng::seed_from_u64(40),
        ));
        let seq = tape.window_partition(x, 4, 4).unwrap();
        assert_eq!(tape.shape(seq), [2 * 4, 16, 3]);
        let whole = tape.window_partition(x, 8, 8).unwrap();
        assert_eq!(tape.shape(whole), [2, 64, 3]);
    }

    #[test]
    fn partition_then_merge_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for &(h, w, m, n) in &[(8usize, 8usize, 4usize, 4usize), (5, 6, 4, 4), (7, 7, 7, 7), (6, 9, 2, 3)] {
            let x = Tensor::<f32>::randn(&[2, 3, h, w], 1.0, &mut rng);
            let mut tape = Tape::<f32>::new();
            let xv = tape.constant(x.clone());
            let seq = tape.window_partition(xv, m, n).unwrap();
            let back = tape.window_merge(seq, m, n, 2, 3, h, w).unwrap();
            assert_eq!(tape.value(back).data(), x.data(), "{h}x{w} {m}x{n}");
        }
    }

    #[test]
    fn partition_tokens_are_row_major_within_window() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f32));
        let seq = tape.window_partition(x, 2, 2).unwrap();
        // Window 0 covers rows 0-1, cols 0-1 of the map.
        assert_eq!(&tape.value(seq).data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        // Window 1 is to its right.
        assert_eq!(&tape.value(seq).data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn zeroed_output_projections_make_pim_a_pure_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::<f32>::new();
        let block = small_block(&mut store, &mut rng, 3, 4, 4);
        for name in ["lms.pim.out_proj.weight", "lms.pim.out_proj.bias"] {
            let id = store.find(name).unwrap();
            let sh = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::zeros(&sh);
        }
        let x = Tensor::<f32>::randn(&[1, 3, 8, 8], 1.0, &mut rng);
        let mut pass = Pass::new(&mut store, false);
        let xv = pass.tape.constant(x.clone());
        let y = block.pim(&mut pass, xv).unwrap();
        assert_eq!(pass.tape.value(y).data(), x.data());
    }

    #[test]
    fn pim_and_pam_preserve_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut store = ParamStore::<f32>::new();
        let block = small_block(&mut store, &mut rng, 64, 4, 4);
        let mut pass = Pass::new(&mut store, false);
        let x = pass
            .tape
            .constant(Tensor::randn(&[1, 64, 28, 28], 1.0, &mut rng));
        let y = block.pim(&mut pass, x).unwrap();
        assert_eq!(pass.tape.shape(y), [1, 64, 28, 28]);
        let y = block.pam(&mut pass, y).unwrap();
        assert_eq!(pass.tape.shape(y), [1, 64, 28, 28]);
    }

    #[test]
    fn pim_windows_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut store = ParamStore::<f32>::new();
        let block = small_block(&mut store, &mut rng, 2, 4, 4);
        let x0 = Tensor::<f32>::randn(&[1, 2, 8, 8], 1.0, &mut rng);
        let run = |store: &mut ParamStore<f32>, x: Tensor<f32>| {
            let mut pass = Pass::new(store, false);
            let xv = pass.tape.constant(x);
            let y = block.pim(&mut pass, xv).unwrap();
            pass.tape.value(y).clone()
        };
        let base = run(&mut store, x0.clone());
        let mut hit = x0;
        // Perturb inside the top-left window.
        let v = hit.at(&[0, 0, 1, 2]) + 3.0;
        hit.set(&[0, 0, 1, 2], v);
        let changed = run(&mut store, hit);
        let mut top_left_diff = false;
        for ci in 0..2 {
            for y in 0..8 {
                for x in 0..8 {
                    let a = base.at(&[0, ci, y, x]);
                    let b = changed.at(&[0, ci, y, x]);
                    if y < 4 && x < 4 {
                        top_left_diff |= a != b;
                    } else {
                        assert_eq!(a, b, "window ({y},{x}) leaked");
                    }
                }
            }
        }
        assert!(top_left_diff);
    }

    #[test]
    fn pam_couples_distant_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut store = ParamStore::<f32>::new();
        let block = small_block(&mut store, &mut rng, 2, 4, 4);
        let x0 = Tensor::<f32>::randn(&[1, 2, 8, 8], 1.0, &mut rng);
        let run = |store: &mut ParamStore<f32>, x: Tensor<f32>| {
            let mut pass = Pass::new(store, false);
            let xv = pass.tape.constant(x);
            let y = block.pam(&mut pass, xv).unwrap();
            pass.tape.value(y).clone()
        };
        let base = run(&mut store, x0.clone());
        let mut hit = x0;
        let v = hit.at(&[0, 0, 1, 2]) + 3.0;
        hit.set(&[0, 0, 1, 2], v);
        let changed = run(&mut store, hit);
        // The bottom-right window shares no pixels with the perturbed one.
        let mut far_diff = 0.0f32;
        for ci in 0..2 {
            for y in 4..8 {
                for x in 4..8 {
                    far_diff += (base.at(&[0, ci, y, x]) - changed.at(&[0, ci, y, x])).abs();
                }
            }
        }
        assert!(far_diff > 0.0);
    }

    #[test]
    fn single_window_pam_degenerates_cleanly() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let mut store = ParamStore::<f32>::new();
        let block = small_block(&mut store, &mut rng, 3, 4, 4);
        let mut pass = Pass::new(&mut store, false);
        let x = pass
            .tape
            .constant(Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng));
        let y = block.pam(&mut pass, x).unwrap();
        assert_eq!(pass.tape.shape(y), [1, 3, 4, 4]);
        assert!(pass.tape.value(y).is_finite());
    }

    #[test]
    fn fusion_stage_follows_the_shape_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut store = ParamStore::<f32>::new();
        let block = LmsBlock::new(&mut store, &mut rng, "lms", 16, 4, 4, 4, Some(8));
        let mut pass = Pass::new(&mut store, false);
        let x = pass
            .tape
            .constant(Tensor::randn(&[1, 16, 8, 8], 1.0, &mut rng));
        let skip = pass
            .tape
            .constant(Tensor::randn(&[1, 8, 16, 16], 1.0, &mut rng));
        let y = block.forward(&mut pass, x, Some(skip)).unwrap();
        assert_eq!(pass.tape.shape(y), [1, 8, 16, 16]);
    }

    #[test]
    fn mismatched_skip_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let mut store = ParamStore::<f32>::new();
        let block = LmsBlock::new(&mut store, &mut rng, "lms", 16, 4, 4, 4, Some(8));
        let mut pass = Pass::new(&mut store, false);
        let x = pass
            .tape
            .constant(Tensor::randn(&[1, 16, 8, 8], 1.0, &mut rng));
        let skip = pass
            .tape
            .constant(Tensor::randn(&[1, 8, 12, 12], 1.0, &mut rng));
        assert!(block.forward(&mut pass, x, Some(skip)).is_err());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let mut store = ParamStore::<f64>::new();
        let block = LmsBlock::new(&mut store, &mut rng, "lms", 2, 4, 4, 2, None);
        let x = sample_away_from_kinks::<f64, _>(&[1, 2, 8, 8], &mut rng);
        let report = check_gradients(&mut store, &[x], 1e-5, &|p, inputs| {
            let y = block.forward(p, inputs[0], None)?;
            let y2 = p.tape.mul(y, y)?;
            Ok(p.tape.mean(y2))
        })
        .unwrap();
        for t in &report.targets {
            assert!(t.rel_err < 1e-4, "{}: {}", t.name, t.rel_err);
        }
    }

    #[test]
    fn scale_receives_nonzero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let mut store = ParamStore::<f32>::new();
        let block = small_block(&mut store, &mut rng, 3, 4, 4);
        let scale_id = store.find("lms.scale").unwrap();
        let mut pass = Pass::new(&mut store, true);
        let x = pass
            .tape
            .constant(Tensor::randn(&[1, 3, 8, 8], 1.0, &mut rng));
        let y = block.forward(&mut pass, x, None).unwrap();
        let y2 = pass.tape.mul(y, y).unwrap();
        let s = pass.tape.mean(y2);
        pass.backward(s).unwrap();
        let grads = pass.grads();
        let g = &grads.iter().find(|(id, _)| *id == scale_id).unwrap().1;
        assert!(g.l2_norm() > 0.0);
    }
}
