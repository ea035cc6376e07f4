//! Finite-difference check of the full training objective.
//!
//! Autodiff runs the real objective with the reversal layer in place. The
//! reference side differentiates, by central differences, the function each
//! parameter group is actually descending: `λ L_c − α L_d` for the
//! extractor, multi-scale module and classifier, and `L_d` for the
//! discriminator.

use m2dan_tensor::{relative_error, Tape};

use crate::data::DomainBatch;
use crate::error::Result;
use crate::layers::ParamGroup;
use crate::losses::HyperParams;
use crate::model::{DomainHead, ModelBundle};
use crate::training::{build_objective, Objective};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub path: String,
    pub group: ParamGroup,
    pub max_rel_error: f64,
}

struct Parts {
    classification: f64,
    domain: f64,
}

fn loss_parts(model: &ModelBundle, batch: &DomainBatch, hp: &HyperParams, objective: &Objective) -> Result<Parts> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let l = build_objective(model, &mut tape, &bound, batch, hp, objective, DomainHead::Direct)?;
    let class = tape.value(l.class)[0];
    let entropy = tape.value(l.entropy)[0];
    Ok(Parts {
        classification: if objective.entropy { class + hp.eta * entropy } else { class },
        domain: l.domain.map_or(0.0, |d| tape.value(d)[0]),
    })
}

fn target(group: ParamGroup, p: &Parts, hp: &HyperParams) -> f64 {
    match group {
        ParamGroup::Gd => p.domain,
        _ => hp.lambda * p.classification - hp.alpha * p.domain,
    }
}

/// Compares every parameter gradient of one objective evaluation on `batch`
/// with central differences of step `h`. The reversal coefficient is
/// `hp.alpha`.
pub fn check_objective_gradients(
    model: &ModelBundle,
    batch: &DomainBatch,
    hp: &HyperParams,
    objective: &Objective,
    h: f64,
) -> Result<Vec<ParamCheck>> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let losses = build_objective(model, &mut tape, &bound, batch, hp, objective, DomainHead::Reversed(hp.alpha))?;
    tape.backward(losses.total)?;

    let mut out = Vec::new();
    for (path, t) in model.params.iter() {
        let group = ParamGroup::of_path(path).expect("model paths carry a group prefix");
        let analytic = tape
            .grad(bound.get(path)?)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut worst = 0.0f64;
        for (i, &a) in analytic.iter().enumerate() {
            let mut shifted = model.clone();
            let eval = |m: &ModelBundle| loss_parts(m, batch, hp, objective).map(|p| target(group, &p, hp));
            shifted.params.get_mut(path).expect("path exists").data_mut()[i] += h;
            let plus = eval(&shifted)?;
            shifted.params.get_mut(path).expect("path exists").data_mut()[i] -= 2.0 * h;
            let minus = eval(&shifted)?;
            worst = worst.max(relative_error(a, (plus - minus) / (2.0 * h)));
        }
        out.push(ParamCheck {
            path: path.to_string(),
            group,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
