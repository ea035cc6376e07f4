//! Plain SGD over mixed-domain batches, with per-epoch validation history.

use std::fmt::Write as _;

use m2dan_tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::data::{source_only, BatchSampler, DomainBatch, DomainData};
use crate::error::{Error, Result};
use crate::layers::{BoundParams, ParamSet};
use crate::losses::{
    cross_entropy, domain_loss, entropy_loss, focal_loss, mean_of, total_objective, HyperParams,
    LogClamp,
};
use crate::metrics::{evaluate, DomainMetrics};
use crate::model::{DomainHead, ModelBundle};

/// Supervised loss on labeled source rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClassLoss {
    #[serde(rename = "ce")]
    CrossEntropy,
    #[default]
    Focal,
}

/// Which terms enter the minimized objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    pub classification: ClassLoss,
    pub domain: bool,
    pub entropy: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Self::full()
    }
}

impl Objective {
    pub fn full() -> Self {
        Self {
            classification: ClassLoss::Focal,
            domain: true,
            entropy: true,
        }
    }

    pub fn source_only() -> Self {
        Self {
            classification: ClassLoss::Focal,
            domain: false,
            entropy: false,
        }
    }

    pub fn label(&self) -> String {
        let mut s = match self.classification {
            ClassLoss::CrossEntropy => "ce".to_string(),
            ClassLoss::Focal => "focal".to_string(),
        };
        if self.domain {
            s.push_str("+domain");
        }
        if self.entropy {
            s.push_str("+entropy");
        }
        s
    }
}

/// Loss nodes of one batch.
#[derive(Debug, Clone)]
pub struct LossVars {
    /// Focal or cross-entropy term on the source rows.
    pub class: Var,
    /// Entropy over all rows; recorded even when it is not optimized.
    pub entropy: Var,
    /// Branch-averaged domain loss, when the discriminator runs.
    pub domain: Option<Var>,
    pub total: Var,
}

/// Scalar values of one step's losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub class: f64,
    pub entropy: f64,
    pub domain: f64,
    pub total: f64,
}

/// Records `λ (L_cls + η L_en) + L_d` for `batch` on `tape`.
///
/// `head` decides how branch features reach the discriminator; with
/// [`DomainHead::Skip`] or `objective.domain == false` no domain term is
/// built.
pub fn build_objective(
    model: &ModelBundle,
    tape: &mut Tape,
    bound: &BoundParams,
    batch: &DomainBatch,
    hp: &HyperParams,
    objective: &Objective,
    head: DomainHead,
) -> Result<LossVars> {
    let head = if objective.domain { head } else { DomainHead::Skip };
    let images = tape.constant(batch.images.shape(), batch.images.data().to_vec())?;
    let fwd = model.forward(tape, bound, images, head)?;

    let rows = batch.source_rows();
    if rows.is_empty() {
        return Err(Error::InvalidSpec("batch has no labeled source rows".into()));
    }
    let source_probs = tape.select_rows(fwd.class_probs, &rows)?;
    let labels = tape.constant(batch.class_labels.shape(), batch.class_labels.data().to_vec())?;
    let class = match objective.classification {
        ClassLoss::Focal => focal_loss(tape, source_probs, labels, hp.gamma, LogClamp::On)?,
        ClassLoss::CrossEntropy => cross_entropy(tape, source_probs, labels, LogClamp::On)?,
    };
    let entropy = entropy_loss(tape, fwd.class_probs, LogClamp::On)?;
    let classification = if objective.entropy {
        let weighted = tape.scale(entropy, hp.eta)?;
        tape.add(class, weighted)?
    } else {
        class
    };

    let domain = if fwd.domain_probs.is_empty() {
        None
    } else {
        let d = tape.constant(batch.domain_labels.shape(), batch.domain_labels.data().to_vec())?;
        let per_branch = fwd
            .domain_probs
            .iter()
            .map(|&p| domain_loss(tape, p, d, LogClamp::On))
            .collect::<Result<Vec<_>>>()?;
        Some(mean_of(tape, &per_branch)?)
    };
    let total = total_objective(tape, classification, domain, hp.lambda)?;
    Ok(LossVars {
        class,
        entropy,
        domain,
        total,
    })
}

/// `p ← p − lr · grad(p)` for every trainable parameter, then clears the
/// gradients.
pub fn sgd_step(params: &mut ParamSet, lr: f64) -> Result<()> {
    for (path, t) in params.iter() {
        if t.requires_grad() && t.grad().is_none() {
            return Err(Error::MissingGradient(path.to_string()));
        }
    }
    for (_, t) in params.iter_mut() {
        if let Some(g) = t.take_grad() {
            for (p, g) in t.data_mut().iter_mut().zip(g) {
                *p -= lr * g;
            }
        }
    }
    Ok(())
}

/// One forward, backward and SGD update on `batch`.
pub fn train_step(
    model: &mut ModelBundle,
    batch: &DomainBatch,
    hp: &HyperParams,
    objective: &Objective,
    step: u64,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let head = DomainHead::Reversed(hp.grl().at(step));
    let losses = build_objective(model, &mut tape, &bound, batch, hp, objective, head)?;
    let value = |v: Var| tape.value(v)[0];
    let out = StepLosses {
        class: value(losses.class),
        entropy: value(losses.entropy),
        domain: losses.domain.map_or(0.0, value),
        total: value(losses.total),
    };
    if !out.total.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    tape.backward(losses.total)?;
    model.params.collect_grads(&tape, &bound)?;
    sgd_step(&mut model.params, hp.lr)?;
    Ok(out)
}

/// Mean losses of one epoch plus validation metrics of every domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_fo: f64,
    pub l_en: f64,
    pub l_d: f64,
    pub domains: Vec<DomainMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelBundle,
    pub hp: HyperParams,
    pub objective: Objective,
    pub step: u64,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(model: ModelBundle, hp: HyperParams, objective: Objective) -> Self {
        Self {
            model,
            hp,
            objective,
            step: 0,
            history: Vec::new(),
        }
    }

    /// Runs one epoch over `train_sets`, then scores `eval_sets`.
    pub fn run_epoch(&mut self, train_sets: &[DomainData], eval_sets: &[DomainData]) -> Result<&EpochRecord> {
        let epoch = self.history.len();
        let sampler = BatchSampler::new(train_sets, self.hp.batch_size, self.hp.seed)?;
        let mut sums = [0.0; 3];
        let mut batches = 0usize;
        for batch in sampler.epoch(epoch) {
            let l = train_step(&mut self.model, &batch?, &self.hp, &self.objective, self.step)?;
            self.step += 1;
            sums[0] += l.class;
            sums[1] += l.entropy;
            sums[2] += l.domain;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let report = evaluate(&self.model, eval_sets)?;
        self.history.push(EpochRecord {
            epoch: epoch + 1,
            l_fo: sums[0] / n,
            l_en: sums[1] / n,
            l_d: sums[2] / n,
            domains: report.all_domains().cloned().collect(),
        });
        Ok(self.history.last().expect("just pushed"))
    }

    /// History as CSV: `epoch,l_fo,l_en,l_d` then `acc_<d>,auc_<d>` per
    /// domain in index order.
    pub fn history_csv(&self) -> String {
        history_csv(&self.history)
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,l_fo,l_en,l_d");
    if let Some(first) = history.first() {
        for d in &first.domains {
            let _ = write!(out, ",acc_{0},auc_{0}", d.name);
        }
    }
    out.push('\n');
    for r in history {
        let _ = write!(out, "{},{},{},{}", r.epoch, r.l_fo, r.l_en, r.l_d);
        for d in &r.domains {
            let _ = write!(out, ",{},{}", d.accuracy, d.auc);
        }
        out.push('\n');
    }
    out
}

/// Trains for `hp.epochs` epochs. Batches mix every domain of `datasets`
/// and every domain's test split is scored after each epoch.
pub fn train(
    model: ModelBundle,
    datasets: &[DomainData],
    hp: &HyperParams,
    objective: Objective,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainState> {
    hp.validate()?;
    if objective.domain && datasets.len() != model.spec.num_domains {
        return Err(Error::InvalidSpec(format!(
            "model expects {} domains, data has {}",
            model.spec.num_domains,
            datasets.len()
        )));
    }
    let mut state = TrainState::new(model, hp.clone(), objective);
    for _ in 0..hp.epochs {
        on_epoch(state.run_epoch(datasets, datasets)?);
    }
    Ok(state)
}

/// The source-only baseline: batches hold only source samples, as many per
/// step as the adapted run draws from the source, and the objective is the
/// classification term alone. All domains are still scored.
pub fn train_source_only(
    model: ModelBundle,
    datasets: &[DomainData],
    hp: &HyperParams,
    classification: ClassLoss,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainState> {
    hp.validate()?;
    let domains = datasets.len().max(1);
    if hp.batch_size % domains != 0 {
        return Err(Error::IndivisibleBatch {
            batch_size: hp.batch_size,
            domains,
        });
    }
    let source = source_only(datasets);
    if source.is_empty() {
        return Err(Error::InvalidSpec("no source domain".into()));
    }
    let mut inner = hp.clone();
    inner.batch_size = hp.batch_size / domains;
    let objective = Objective {
        classification,
        domain: false,
        entropy: false,
    };
    let mut state = TrainState::new(model, inner, objective);
    for _ in 0..hp.epochs {
        on_epoch(state.run_epoch(&source, datasets)?);
    }
    state.hp = hp.clone();
    Ok(state)
}
