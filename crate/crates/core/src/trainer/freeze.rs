use crate::error::{CdaError, Result};
use crate::models::{CdaModel, ParamGroup};
use crate::nn::Real;

/// Fingerprints of groups that must not change until `verify`.
pub struct FreezeGuard {
    held: Vec<(ParamGroup, String)>,
}

impl FreezeGuard {
    pub fn capture<R: Real>(model: &CdaModel<R>, frozen: &[ParamGroup]) -> Self {
        FreezeGuard {
            held: frozen.iter().map(|&g| (g, model.fingerprint(g))).collect(),
        }
    }

    /// Every group except `updated`.
    pub fn complement<R: Real>(model: &CdaModel<R>, updated: &[ParamGroup]) -> Self {
        let frozen: Vec<ParamGroup> = ParamGroup::ALL.into_iter().filter(|g| !updated.contains(g)).collect();
        Self::capture(model, &frozen)
    }

    pub fn groups(&self) -> impl Iterator<Item = ParamGroup> + '_ {
        self.held.iter().map(|(g, _)| *g)
    }

    pub fn verify<R: Real>(&self, model: &CdaModel<R>, context: &str) -> Result<()> {
        for (g, fp) in &self.held {
            if &model.fingerprint(*g) != fp {
                return Err(CdaError::Invariant(format!(
                    "freeze contract broken: {g} changed during {context}"
                )));
            }
        }
        Ok(())
    }
}
