//! Multiscale attention aggregation: three adjacent decoder stages are
//! aligned to the center stage's resolution and concatenated, then run
//! through a spatial-attention path (channel reduction, parallel 3/5/7
//! convolutions, pooled 7x7 gate) and a channel-attention path (global
//! avg+max descriptor, squeeze, FC, sigmoid). The two attention maps are
//! multiplied and projected to the segmentation-head width.

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Linear, ParamStore, Pass};
use crate::real::Real;
use crate::tape::Var;
use rand::Rng;

/// How the pooling inside the spatial gate reduces its input: over a local
/// 2x2 neighborhood keeping all channels, or across channels to single-map
/// statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsaaPool {
    SpatialLocal,
    ChannelReduce,
}

pub struct Msaa {
    pool: MsaaPool,
    reduce: Conv2d,
    k3: Conv2d,
    k5: Conv2d,
    k7: Conv2d,
    gate7: Conv2d,
    ch_squeeze: Conv2d,
    ch_fc: Linear,
    out_proj: Conv2d,
    pub c1: usize,
    pub c2: usize,
}

/// Align two neighbor stages to the center stage's extents and concatenate
/// along channels in the order center, deeper, third. The deeper stage is
/// bilinearly upsampled 2x; the third stage is used as is when it already
/// matches the center, or downsampled by the exact 2x2 block mean (the
/// bilinear adjoint under the half-pixel convention) when it is one level
/// finer.
pub fn align_and_concat<T: Real>(
    p: &mut Pass<'_, T>,
    center: Var,
    deeper: Var,
    third: Var,
) -> Result<Var> {
    let csh = p.tape.shape(center).to_vec();
    let dsh = p.tape.shape(deeper).to_vec();
    let tsh = p.tape.shape(third).to_vec();
    if dsh[2] * 2 != csh[2] || dsh[3] * 2 != csh[3] {
        return Err(Error::shape("align_and_concat deeper", &dsh, &csh));
    }
    let aligned = if tsh[2] == csh[2] && tsh[3] == csh[3] {
        third
    } else if tsh[2] == csh[2] * 2 && tsh[3] == csh[3] * 2 {
        p.tape.avg_pool(third, 2, 2)?
    } else {
        return Err(Error::shape("align_and_concat third", &tsh, &csh));
    };
    let up = p.tape.upsample_bilinear_2x(deeper)?;
    p.tape.concat(&[center, up, aligned], 1)
}

impl Msaa {
    /// `c1` is the concatenated width (sum of the three stage widths);
    /// the internal reduced width is `c1/4`.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c1: usize,
        out_c: usize,
        pool: MsaaPool,
    ) -> Self {
        assert!(c1 % 4 == 0, "concatenated width must reduce by 4");
        let c2 = c1 / 4;
        let gate_in = match pool {
            MsaaPool::SpatialLocal => c2,
            MsaaPool::ChannelReduce => 1,
        };
        Msaa {
            pool,
            reduce: Conv2d::new(store, rng, &format!("{name}.reduce"), c1, c2, 1, 1),
            k3: Conv2d::new(store, rng, &format!("{name}.k3"), c2, c2, 3, 1),
            k5: Conv2d::new(store, rng, &format!("{name}.k5"), c2, c2, 5, 1),
            k7: Conv2d::new(store, rng, &format!("{name}.k7"), c2, c2, 7, 1),
            gate7: Conv2d::new(store, rng, &format!("{name}.gate7"), gate_in, c2, 7, 1),
            ch_squeeze: Conv2d::new(store, rng, &format!("{name}.ch_squeeze"), c1, c2, 1, 1),
            ch_fc: Linear::new(store, rng, &format!("{name}.ch_fc"), c2, c2),
            out_proj: Conv2d::new(store, rng, &format!("{name}.out_proj"), c2, out_c, 1, 1),
            c1,
            c2,
        }
    }

    /// Parallel multiscale stack over the reduced features:
    /// `F2 = Conv3(F1) + Conv5(F1) + Conv7(F1)`.
    pub fn multiscale<T: Real>(&self, p: &mut Pass<'_, T>, f1: Var) -> Result<Var> {
        let a = self.k3.forward(p, f1)?;
        let b = self.k5.forward(p, f1)?;
        let c = self.k7.forward(p, f1)?;
        let ab = p.tape.add(a, b)?;
        p.tape.add(ab, c)
    }

    /// `Conv7(AvgPool(F2) + MaxPool(F2)) * sigmoid(F2)`, same shape as F2.
    pub fn spatial_path<T: Real>(&self, p: &mut Pass<'_, T>, fhat: Var) -> Result<Var> {
        let f1 = self.reduce.forward(p, fhat)?;
        let f2 = self.multiscale(p, f1)?;
        let pooled = match self.pool {
            MsaaPool::SpatialLocal => {
                let a = p.tape.avg_pool_same2(f2)?;
                let m = p.tape.max_pool_same2(f2)?;
                p.tape.add(a, m)?
            }
            MsaaPool::ChannelReduce => {
                let a = channel_stat(p, f2, false)?;
                let m = channel_stat(p, f2, true)?;
                p.tape.add(a, m)?
            }
        };
        let gate = self.gate7.forward(p, pooled)?;
        let sig = p.tape.sigmoid(f2);
        p.tape.mul(gate, sig)
    }

    /// Global avg+max channel descriptor, `[N, C1, 1, 1]`.
    pub fn channel_descriptor<T: Real>(&self, p: &mut Pass<'_, T>, fhat: Var) -> Result<Var> {
        let a = p.tape.global_avg_pool(fhat)?;
        let m = p.tape.global_max_pool(fhat)?;
        p.tape.add(a, m)
    }

    /// Per-channel gate in (0,1): `sigmoid(FC(relu(Conv1(descriptor))))`,
    /// shape `[N, C2, 1, 1]`, broadcast against spatial maps when used.
    pub fn channel_path<T: Real>(&self, p: &mut Pass<'_, T>, fhat: Var) -> Result<Var> {
        let n = p.tape.shape(fhat)[0];
        let f3 = self.channel_descriptor(p, fhat)?;
        let f3 = self.ch_squeeze.forward(p, f3)?;
        let f3 = p.tape.relu(f3);
        let f3 = p.tape.reshape(f3, vec![n, self.c2])?;
        let f3 = self.ch_fc.forward(p, f3)?;
        let f3 = p.tape.sigmoid(f3);
        p.tape.reshape(f3, vec![n, self.c2, 1, 1])
    }

    /// Full module over three adjacent stages; output keeps the center
    /// stage's extents with `out_proj`'s channel width.
    pub fn forward<T: Real>(
        &self,
        p: &mut Pass<'_, T>,
        center: Var,
        deeper: Var,
        third: Var,
    ) -> Result<Var> {
        let fhat = align_and_concat(p, center, deeper, third)?;
        if p.tape.shape(fhat)[1] != self.c1 {
            return Err(Error::shape(
                "msaa widths",
                p.tape.shape(fhat),
                &[0, self.c1, 0, 0],
            ));
        }
        let spatial = self.spatial_path(p, fhat)?;
        let channel = self.channel_path(p, fhat)?;
        let fused = p.tape.mul(spatial, channel)?;
        self.out_proj.forward(p, fused)
    }
}

/// Mean or max over the channel axis, `[N,C,H,W]` to `[N,1,H,W]`, built
/// from a permutation and a 1xC spatial pool.
fn channel_stat<T: Real>(p: &mut Pass<'_, T>, x: Var, max: bool) -> Result<Var> {
    let sh = p.tape.shape(x).to_vec();
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let t = p.tape.permute(x, &[0, 2, 3, 1])?;
    let t = p.tape.reshape(t, vec![n * h * w, 1, 1, c])?;
    let t = if max {
        p.tape.max_pool(t, 1, c)?
    } else {
        p.tape.avg_pool(t, 1, c)?
    };
    p.tape.reshape(t, vec![n, 1, h, w])
}
