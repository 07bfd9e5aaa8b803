//! Full segmentation model: residual encoder, four decoder blocks with
//! windowed scans and skip fusion, optional multiscale attention
//! aggregation in front of the main head, and per-stage auxiliary heads.

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ParamId, ParamStore, Pass};
use crate::lms::LmsBlock;
use crate::loss::{AuxHead, LossConfig, PredictionSet};
use crate::msaa::{Msaa, MsaaPool};
use crate::real::Real;
use crate::tape::Var;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Where the attention aggregation sits. Shallow centers it on the middle
/// of the three shallowest decoder stages and adds the result back onto the
/// topmost stage, so the head keeps the finest extents and starts from the
/// plain decoder features. Deep shifts it one level down, with the
/// encoder's deepest features standing in for the missing neighbor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsaaPlacement {
    Shallow,
    Deep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Output classes; 1 selects binary (sigmoid) mode.
    pub classes: usize,
    /// Encoder stage widths, shallow to deep.
    pub channels: [usize; 4],
    /// Scan state size per channel.
    pub d_state: usize,
    /// Decoder window extents, deepest block first.
    pub windows: [(usize, usize); 4],
    pub use_lms: bool,
    pub use_aux: bool,
    pub use_msaa: bool,
    pub msaa_pool: MsaaPool,
    pub msaa_placement: MsaaPlacement,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 3,
            channels: [32, 64, 128, 256],
            d_state: 8,
            windows: [(7, 7), (7, 7), (4, 4), (4, 4)],
            use_lms: true,
            use_aux: true,
            use_msaa: true,
            msaa_pool: MsaaPool::SpatialLocal,
            msaa_placement: MsaaPlacement::Shallow,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("class count must be at least 1".into()));
        }
        if self.d_state == 0 {
            return Err(Error::Config("state size must be at least 1".into()));
        }
        for (i, &c) in self.channels.iter().enumerate() {
            if c < 2 {
                return Err(Error::Config(format!(
                    "encoder stage {} width {c} is too narrow",
                    i + 1
                )));
            }
            if i > 0 && c != 2 * self.channels[i - 1] {
                return Err(Error::Config(format!(
                    "encoder stage {} width {c} must double stage {}'s {}",
                    i + 1,
                    i,
                    self.channels[i - 1]
                )));
            }
        }
        for &(m, n) in &self.windows {
            if m * n < 4 {
                return Err(Error::Config(format!(
                    "window {m}x{n} is below the 4-pixel minimum"
                )));
            }
        }
        if self.loss.epsilon < 0.0 {
            return Err(Error::Config("epsilon must be nonnegative".into()));
        }
        Ok(())
    }

    /// Epsilon actually applied: auxiliary supervision off forces 0.
    pub fn effective_epsilon(&self) -> f64 {
        if self.use_aux {
            self.loss.epsilon
        } else {
            0.0
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            epsilon: self.effective_epsilon(),
            ..self.loss.clone()
        }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    encoder: Encoder,
    blocks: Vec<LmsBlock>,
    msaa: Option<Msaa>,
    aux_heads: Vec<AuxHead>,
    main_head: Conv2d,
    pub raw_omega: ParamId,
}

pub const N_STAGES: usize = 4;

impl Model {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let [c1, c2, c3, c4] = cfg.channels;
        let encoder = Encoder::new(store, &mut rng, "encoder", 1, &cfg.channels);

        // Deepest to shallowest; the first three fuse encoder skips, the
        // last scans the shallowest map without upsampling.
        let widths = [c4, c3, c2, c1];
        let skips = [Some(c3), Some(c2), Some(c1), None];
        let mut blocks = Vec::with_capacity(N_STAGES);
        for i in 0..N_STAGES {
            let name = format!("decoder{}", i + 1);
            let block = if cfg.use_lms {
                let (m, n) = cfg.windows[i];
                LmsBlock::new(store, &mut rng, &name, widths[i], m, n, cfg.d_state, skips[i])
            } else {
                LmsBlock::new_plain(store, &mut rng, &name, widths[i], skips[i])
            };
            blocks.push(block);
        }

        let msaa = cfg.use_msaa.then(|| {
            let concat_c = match cfg.msaa_placement {
                MsaaPlacement::Shallow => c1 + c2 + c1,
                MsaaPlacement::Deep => c3 + c4 + c2,
            };
            Msaa::new(store, &mut rng, "msaa", concat_c, c1, cfg.msaa_pool)
        });

        let stage_widths = [c3, c2, c1, c1];
        let aux_heads = if cfg.use_aux {
            stage_widths
                .iter()
                .enumerate()
                .map(|(i, &w)| AuxHead::new(store, &mut rng, &format!("aux{}", i + 1), w, cfg.classes))
                .collect()
        } else {
            Vec::new()
        };

        let main_head = Conv2d::new(store, &mut rng, "main_head", c1, cfg.classes, 1, 1);
        let raw_omega = store.add(
            "raw_omega",
            crate::tensor::Tensor::zeros(&[if cfg.use_aux { N_STAGES } else { 1 }]),
        );

        Ok(Model {
            cfg,
            encoder,
            blocks,
            msaa,
            aux_heads,
            main_head,
            raw_omega,
        })
    }

    /// Runs the encoder and decoder and returns main logits at the input
    /// resolution plus one upsampled auxiliary map per decoder stage.
    pub fn forward<T: Real>(&self, p: &mut Pass<'_, T>, image: Var) -> Result<PredictionSet> {
        let sh = p.tape.shape(image).to_vec();
        let feats = self.encoder.forward(p, image)?;
        let e4 = feats[3];

        let mut cur = e4;
        let mut stage_outs = Vec::with_capacity(N_STAGES);
        for (i, block) in self.blocks.iter().enumerate() {
            let skip = if i < 3 { Some(feats[2 - i]) } else { None };
            cur = block.forward(p, cur, skip).map_err(|e| {
                Error::Contract(format!("decoder stage {} failed: {e}", i + 1))
            })?;
            stage_outs.push(cur);
        }
        let (s3, s2, s1a, s1b) = (stage_outs[0], stage_outs[1], stage_outs[2], stage_outs[3]);

        let mut head_in = match (&self.msaa, self.cfg.msaa_placement) {
            (Some(msaa), MsaaPlacement::Shallow) => {
                let att = msaa.forward(p, s1a, s2, s1b)?;
                p.tape.add(s1b, att)?
            }
            (Some(msaa), MsaaPlacement::Deep) => msaa.forward(p, s3, e4, s2)?,
            (None, _) => s1b,
        };
        let shallow_hw = p.tape.shape(s1b)[2];
        while p.tape.shape(head_in)[2] < shallow_hw {
            head_in = p.tape.upsample_bilinear_2x(head_in)?;
        }
        let up = p.tape.upsample_bilinear_2x(head_in)?;
        let logits_main = self.main_head.forward(p, up)?;

        let mut logits_aux = Vec::with_capacity(self.aux_heads.len());
        for (head, &feat) in self.aux_heads.iter().zip(&[s3, s2, s1a, s1b]) {
            logits_aux.push(head.forward(p, feat, sh[2])?);
        }
        Ok(PredictionSet {
            logits_main,
            logits_aux,
        })
    }
}
