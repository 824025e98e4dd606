//! Uniform dispatch over the four normalization layers, used by the model
//! body, the gradient checker and the checkpoint format.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::norm::{
    bn_backward, bn_forward_eval, bn_forward_train, cn_backward, cn_forward_eval,
    cn_forward_train, gn_backward, gn_forward_eval, gn_forward_train, tbbn_backward,
    tbbn_forward_eval, tbbn_forward_train, BatchComposition, BnCache, CnCache, GnCache,
    NormLayerState, TbbnCache,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Bn,
    Gn,
    Cn,
    Tbbn,
}

impl NormKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bn" => Some(Self::Bn),
            "gn" => Some(Self::Gn),
            "cn" => Some(Self::Cn),
            "tbbn" => Some(Self::Tbbn),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Bn => "bn",
            Self::Gn => "gn",
            Self::Cn => "cn",
            Self::Tbbn => "tbbn",
        }
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
pub enum NormCache {
    Bn(BnCache),
    Gn(GnCache),
    Cn(CnCache),
    Tbbn(TbbnCache),
}

/// One normalization layer: a kind plus its parameter/state record.
#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer {
    pub kind: NormKind,
    pub state: NormLayerState,
}

impl NormLayer {
    pub fn new(kind: NormKind, channels: usize) -> Self {
        Self {
            kind,
            state: NormLayerState::new(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.state.channels()
    }

    /// Group normalization carries no learnable parameters here.
    pub fn has_affine(&self) -> bool {
        !matches!(self.kind, NormKind::Gn)
    }

    pub fn forward_train(
        &mut self,
        x: &Tensor,
        comp: BatchComposition,
    ) -> Result<(Tensor, NormCache)> {
        match self.kind {
            NormKind::Bn => {
                let (y, c) = bn_forward_train(x, &mut self.state)?;
                Ok((y, NormCache::Bn(c)))
            }
            NormKind::Gn => {
                let (y, c) = gn_forward_train(x, self.state.groups, self.state.epsilon)?;
                Ok((y, NormCache::Gn(c)))
            }
            NormKind::Cn => {
                let (y, c) = cn_forward_train(x, &mut self.state)?;
                Ok((y, NormCache::Cn(c)))
            }
            NormKind::Tbbn => {
                let (y, c) = tbbn_forward_train(x, comp, &mut self.state)?;
                Ok((y, NormCache::Tbbn(c)))
            }
        }
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        match self.kind {
            NormKind::Bn => Ok(bn_forward_eval(x, &self.state)),
            NormKind::Gn => gn_forward_eval(x, self.state.groups, self.state.epsilon),
            NormKind::Cn => cn_forward_eval(x, &self.state),
            NormKind::Tbbn => Ok(tbbn_forward_eval(x, &self.state)),
        }
    }

    /// Returns (d_input, d_gamma, d_beta); the affine gradients are empty for
    /// group normalization.
    pub fn backward(
        &self,
        grad_output: &Tensor,
        cache: NormCache,
    ) -> (Tensor, Vec<f64>, Vec<f64>) {
        match (self.kind, cache) {
            (NormKind::Bn, NormCache::Bn(c)) => bn_backward(grad_output, c, &self.state),
            (NormKind::Gn, NormCache::Gn(c)) => {
                (gn_backward(grad_output, c), Vec::new(), Vec::new())
            }
            (NormKind::Cn, NormCache::Cn(c)) => cn_backward(grad_output, c, &self.state),
            (NormKind::Tbbn, NormCache::Tbbn(c)) => tbbn_backward(grad_output, c, &self.state),
            _ => panic!("cache kind does not match layer kind"),
        }
    }

    /// Replaces the running statistics with the plain per-channel statistics
    /// of this input (for continual normalization, of its group-normalized
    /// input) and returns the eval-path output under the new statistics.
    pub fn recompute_stats(&mut self, x: &Tensor) -> Result<Tensor> {
        let stats_input = match self.kind {
            NormKind::Cn => gn_forward_eval(x, self.state.groups, self.state.epsilon)?,
            _ => x.clone(),
        };
        if !matches!(self.kind, NormKind::Gn) {
            let (mean, var) = stats_input.channel_stats()?;
            self.state.running_mean = mean;
            self.state.running_var = var;
        }
        match self.kind {
            NormKind::Gn => self.forward_eval(x),
            NormKind::Cn => Ok(bn_forward_eval(&stats_input, &self.state)),
            _ => self.forward_eval(x),
        }
    }
}
