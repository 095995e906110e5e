use std::fmt;

use serde::{Deserialize, Serialize};

use super::params::{ParamStore, Partition};
use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// The individual terms of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossTerm {
    /// Cross-entropy of the target discriminator on z_T.
    Target,
    /// Cross-entropy of the sensitive discriminator on z_S.
    Sensitive,
    /// `Σ q log q` of the sensitive discriminator on z_T.
    Entropy,
    /// KL of the target posterior to its prior.
    KlTarget,
    /// KL of the sensitive posterior to its prior.
    KlSensitive,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [
        LossTerm::Target,
        LossTerm::Sensitive,
        LossTerm::Entropy,
        LossTerm::KlTarget,
        LossTerm::KlSensitive,
    ];

    /// Partitions a term is allowed to update.
    ///
    /// The sensitive classification loss deliberately excludes the shared
    /// trunk: it trains only θ_S \ θ and φ_S.
    pub fn routes(self) -> &'static [Partition] {
        use Partition::*;
        match self {
            LossTerm::Target => &[SharedTrunk, TargetBranch, TargetDiscriminator],
            LossTerm::Sensitive => &[SensitiveBranch, SensitiveDiscriminator],
            LossTerm::Entropy => &[SharedTrunk, TargetBranch, SensitiveDiscriminator],
            LossTerm::KlTarget => &[SharedTrunk, TargetBranch],
            LossTerm::KlSensitive => &[SharedTrunk, SensitiveBranch],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Target => "L_T",
            LossTerm::Sensitive => "L_S",
            LossTerm::Entropy => "L_E",
            LossTerm::KlTarget => "L_zT",
            LossTerm::KlSensitive => "L_zS",
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Extracts per-parameter gradients in store order.
pub fn collect_grads(grads: &Gradients, vars: &[Var]) -> Vec<Option<Tensor>> {
    vars.iter().map(|v| grads.get(*v).cloned()).collect()
}

/// Runs one reverse sweep per weighted term, zeroes every gradient that lands
/// on a partition outside the term's routes, and sums the results.
///
/// This is the literal per-term gradient application map. Training uses a
/// single sweep with a stop-gradient at the trunk/branch boundary instead;
/// both must agree.
pub fn masked_backward(
    tape: &Tape,
    store: &ParamStore,
    vars: &[Var],
    terms: &[(LossTerm, Var, f64)],
) -> Result<Vec<Option<Tensor>>> {
    if vars.len() != store.len() {
        return Err(Error::Contract(format!(
            "{} bound variables for {} parameters",
            vars.len(),
            store.len()
        )));
    }
    let mut total: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    for &(term, var, weight) in terms {
        if weight == 0.0 {
            continue;
        }
        let grads = tape.gradients(&[(var, weight)])?;
        for ((param, v), acc) in store.iter().zip(vars).zip(&mut total) {
            if !term.routes().contains(&param.partition) {
                continue;
            }
            if let Some(g) = grads.get(*v) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }
    Ok(total.into_iter().map(Some).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routes_cover_only_model_partitions() {
        for term in LossTerm::ALL {
            assert!(!term.routes().is_empty());
            assert!(!term.routes().contains(&Partition::Probe));
        }
        assert!(!LossTerm::Sensitive.routes().contains(&Partition::SharedTrunk));
        let mut reached: Vec<Partition> = LossTerm::ALL
            .iter()
            .flat_map(|t| t.routes().iter().copied())
            .collect();
        reached.sort();
        reached.dedup();
        assert_eq!(reached, Partition::MODEL.to_vec());
    }
}
