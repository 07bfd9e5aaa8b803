//! Four-stage residual feature pyramid. Every stage halves the spatial
//! extents with a stride-2 first convolution and widens the channels,
//! producing the skip features the decoder consumes.

use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, ParamStore, Pass};
use crate::real::Real;
use crate::tape::Var;
use rand::Rng;

/// conv-BN-ReLU, conv-BN, plus a skip that is the identity when shapes
/// allow and a 1x1 projection otherwise; ReLU after the join.
pub struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    proj: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv2d::new_no_bias(store, rng, &format!("{name}.conv1"), c_in, c_out, 3, stride);
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), c_out);
        let conv2 = Conv2d::new_no_bias(store, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1);
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), c_out);
        let proj = (c_in != c_out || stride != 1).then(|| {
            Conv2d::new(store, rng, &format!("{name}.proj"), c_in, c_out, 1, stride)
        });
        ResidualBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            proj,
        }
    }

    pub fn forward<T: Real>(&self, p: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(p, x)?;
        let y = self.bn1.forward(p, y)?;
        let y = p.tape.relu(y);
        let y = self.conv2.forward(p, y)?;
        let y = self.bn2.forward(p, y)?;
        let skip = match &self.proj {
            Some(proj) => proj.forward(p, x)?,
            None => x,
        };
        let y = p.tape.add(y, skip)?;
        Ok(p.tape.relu(y))
    }
}

pub struct Encoder {
    stages: Vec<ResidualBlock>,
}

impl Encoder {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        widths: &[usize],
    ) -> Self {
        let mut stages = Vec::with_capacity(widths.len());
        let mut c = c_in;
        for (k, &w) in widths.iter().enumerate() {
            stages.push(ResidualBlock::new(
                store,
                rng,
                &format!("{name}.stage{}", k + 1),
                c,
                w,
                2,
            ));
            c = w;
        }
        Encoder { stages }
    }

    /// Shallowest-to-deepest stage outputs for an `[N,1,H,W]` image.
    pub fn forward<T: Real>(&self, p: &mut Pass<'_, T>, image: Var) -> Result<Vec<Var>> {
        let sh = p.tape.shape(image).to_vec();
        if sh.len() != 4 {
            return Err(Error::shape("encode", &sh, &[0, 0, 0, 0]));
        }
        let factor = 1usize << self.stages.len();
        if sh[2] % factor != 0 || sh[3] % factor != 0 {
            return Err(Error::Contract(format!(
                "encoder input extents must be divisible by {factor}, got {}x{}",
                sh[2], sh[3]
            )));
        }
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut cur = image;
        for stage in &self.stages {
            cur = stage.forward(p, cur)?;
            feats.push(cur);
        }
        Ok(feats)
    }
}
