//! Attention fusion of the two deepest backbone maps into one refined map.
//!
//! ```text
//! u     = bilinear(f_m5 -> H4 x W4)
//! p     = conv1x1(u)                           c5 -> c4
//! alpha = sigmoid(conv1x1(gap([f_m4, p])))      2*c4 -> c4, per channel
//! out   = alpha * f_m4 + (1 - alpha) * p
//! ```

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{lecun_uniform, ParamRegistry};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AttentionFusion {
    pub c4: usize,
    pub c5: usize,
    prefix: String,
}

/// Output of [`AttentionFusion::forward`].
#[derive(Clone, Copy, Debug)]
pub struct FusedFeatureMap {
    /// `[N,c4,H4,W4]`.
    pub f_ffr: Var,
    /// Per-channel gate `[N,c4]`.
    pub alpha: Var,
    /// Projected upsampled deep map `[N,c4,H4,W4]`.
    pub projected: Var,
}

impl AttentionFusion {
    pub fn new(c4: usize, c5: usize, prefix: &str) -> Self {
        AttentionFusion { c4, c5, prefix: prefix.to_string() }
    }

    fn name(&self, rest: &str) -> String {
        format!("{}.{rest}", self.prefix)
    }

    pub fn register(&self, reg: &mut ParamRegistry, rng: &mut ChaCha8Rng) -> Result<()> {
        reg.insert(&self.name("proj.weight"), lecun_uniform(&[self.c4, self.c5], self.c5, rng))?;
        reg.insert(&self.name("gate.weight"), lecun_uniform(&[self.c4, 2 * self.c4], 2 * self.c4, rng))?;
        reg.insert(&self.name("gate.bias"), Tensor::zeros(&[self.c4]))?;
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, reg: &ParamRegistry, f_m4: Var, f_m5: Var) -> Result<FusedFeatureMap> {
        let s4 = tape.shape(f_m4).to_vec();
        let s5 = tape.shape(f_m5).to_vec();
        if s4.len() != 4 || s5.len() != 4 || s4[0] != s5[0] {
            return Err(Error::config(format!("fusion inputs {s4:?} and {s5:?} must be [N,C,H,W]")));
        }
        if s4[1] != self.c4 || s5[1] != self.c5 {
            return Err(Error::config(format!(
                "fusion expects {} and {} channels, got {} and {}",
                self.c4, self.c5, s4[1], s5[1]
            )));
        }
        let (n, h4, w4) = (s4[0], s4[2], s4[3]);
        if s5[2] != h4.div_ceil(2) || s5[3] != w4.div_ceil(2) {
            return Err(Error::config(format!(
                "deep map {}x{} is not the ceil-half of {h4}x{w4}",
                s5[2], s5[3]
            )));
        }
        let up = tape.bilinear_upsample(f_m5, h4, w4)?;
        let up = tape.reshape(up, &[n, self.c5, h4 * w4])?;
        let proj_w = tape.param(reg, &self.name("proj.weight"))?;
        let p = tape.conv1x1(up, proj_w, None)?;
        let projected = tape.reshape(p, &[n, self.c4, h4, w4])?;

        let both = tape.concat(&[f_m4, projected])?;
        let pooled = tape.global_avg_pool(both)?;
        let pooled = tape.reshape(pooled, &[n, 2 * self.c4, 1])?;
        let gate_w = tape.param(reg, &self.name("gate.weight"))?;
        let gate_b = tape.param(reg, &self.name("gate.bias"))?;
        let logits = tape.conv1x1(pooled, gate_w, Some(gate_b))?;
        let logits = tape.reshape(logits, &[n, self.c4])?;
        let alpha = tape.sigmoid(logits);
        let f_ffr = tape.gated_mix(alpha, f_m4, projected)?;
        Ok(FusedFeatureMap { f_ffr, alpha, projected })
    }
}
