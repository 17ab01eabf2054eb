//! Losses and the per-task training loop.
//!
//! The objective for a bag is `cls + dist`: negative log-likelihood over all
//! known classes plus a sigmoid cross-entropy that pulls each old-class
//! logit towards the frozen previous model's output on the same bag.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{self, Gradients};
use crate::model::{Bag, MilModel};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub dist: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub shuffle_seed: u64,
    pub distill_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.01,
            shuffle_seed: 0,
            distill_enabled: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be at least 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::contract(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// `−log softmax(logits)[target]`.
pub fn classification_loss(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::contract(format!(
            "target {target} out of range for {} logits",
            logits.len()
        )));
    }
    Ok((-math::log_softmax_at(logits, target)).max(0.0))
}

/// Sigmoid cross-entropy with the old model's sigmoids as soft targets,
/// summed over the first `old_class_count` logits.
pub fn distillation_loss(
    old_logits: &[f64],
    new_logits: &[f64],
    old_class_count: usize,
) -> Result<f64> {
    if old_class_count > old_logits.len() || old_class_count > new_logits.len() {
        return Err(Error::contract(format!(
            "old class count {old_class_count} exceeds logits ({} old, {} new)",
            old_logits.len(),
            new_logits.len()
        )));
    }
    Ok(old_logits[..old_class_count]
        .iter()
        .zip(new_logits)
        .map(|(&o, &n)| soft_bce(o, n))
        .sum())
}

/// `−(p ln σ(x) + (1−p) ln(1−σ(x)))` with `p = σ(o)`, split into the
/// entropy of `p` plus `KL(p ‖ σ(x))`. The KL part is exactly zero at
/// `x == o` and clamped at zero against rounding, so the loss can never
/// drop below its value at matching logits.
#[inline]
fn soft_bce(o: f64, x: f64) -> f64 {
    let p = math::sigmoid(o);
    let (so_neg, so_pos) = (math::softplus(-o), math::softplus(o));
    let entropy = p * so_neg + (1.0 - p) * so_pos;
    let kl = p * (math::softplus(-x) - so_neg) + (1.0 - p) * (math::softplus(x) - so_pos);
    entropy + kl.max(0.0)
}

fn target_index(model: &MilModel, bag: &Bag) -> Result<usize> {
    model.class_index(bag.label).ok_or_else(|| {
        Error::contract(format!(
            "bag {} has label {} unknown to the model (classes {:?})",
            bag.bag_id,
            bag.label,
            model.class_ids()
        ))
    })
}

fn check_prev(model: &MilModel, prev: &MilModel) -> Result<usize> {
    let old = prev.num_classes();
    if old > model.num_classes() || prev.class_ids() != &model.class_ids()[..old] {
        return Err(Error::contract(format!(
            "previous model classes {:?} are not a prefix of {:?}",
            prev.class_ids(),
            model.class_ids()
        )));
    }
    Ok(old)
}

/// Loss of one bag under the current model and, optionally, a frozen previous model.
pub fn combined_loss(
    model: &MilModel,
    prev: Option<&MilModel>,
    bag: &Bag,
) -> Result<LossBreakdown> {
    let target = target_index(model, bag)?;
    let logits = model.logits(bag)?;
    let cls = classification_loss(&logits, target)?;
    let dist = match prev {
        Some(p) => {
            let old = check_prev(model, p)?;
            distillation_loss(&p.logits(bag)?, &logits, old)?
        }
        None => 0.0,
    };
    Ok(LossBreakdown {
        cls,
        dist,
        total: cls + dist,
    })
}

/// [`combined_loss`] together with its analytic parameter gradient.
pub fn loss_and_grad(
    model: &MilModel,
    prev: Option<&MilModel>,
    bag: &Bag,
) -> Result<(LossBreakdown, Gradients)> {
    let target = target_index(model, bag)?;
    let trace = model.forward_trace(bag)?;
    let logits = &trace.output.logits;
    let cls = classification_loss(logits, target)?;

    // d(cls)/d(logits) = softmax − onehot
    let mut grad = math::softmax(logits)?;
    grad[target] -= 1.0;

    let mut dist = 0.0;
    if let Some(p) = prev {
        let old = check_prev(model, p)?;
        let old_logits = p.logits(bag)?;
        dist = distillation_loss(&old_logits, logits, old)?;
        for j in 0..old {
            grad[j] += math::sigmoid(logits[j]) - math::sigmoid(old_logits[j]);
        }
    }
    let grads = model.backward(bag, &trace, &grad);
    Ok((
        LossBreakdown {
            cls,
            dist,
            total: cls + dist,
        },
        grads,
    ))
}

/// Result of a [`train_task`] call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSummary {
    /// Mean total loss over the bags of the final epoch.
    pub final_epoch_loss: f64,
}

/// Per-bag SGD over `bags` for `cfg.epochs` epochs. The bag order is
/// reshuffled every epoch from `cfg.shuffle_seed + epoch`.
pub fn train_task(
    model: &mut MilModel,
    prev: Option<&MilModel>,
    bags: &[&Bag],
    cfg: &TrainConfig,
) -> Result<TrainSummary> {
    cfg.validate()?;
    for bag in bags {
        target_index(model, bag)?;
    }
    if let Some(p) = prev {
        check_prev(model, p)?;
    }
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut epoch_loss = 0.0;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed.wrapping_add(epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        epoch_loss = 0.0;
        for &i in &order {
            let bag = bags[i];
            let (loss, grads) = loss_and_grad(model, prev, bag)?;
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    bag_id: bag.bag_id.clone(),
                    loss: loss.total,
                });
            }
            math::sgd_step(model, &grads, cfg.lr)?;
            epoch_loss += loss.total;
        }
        if !model.is_finite() {
            return Err(Error::Divergence {
                epoch,
                bag_id: String::from("<parameters>"),
                loss: f64::NAN,
            });
        }
    }
    Ok(TrainSummary {
        final_epoch_loss: if bags.is_empty() {
            0.0
        } else {
            epoch_loss / bags.len() as f64
        },
    })
}
