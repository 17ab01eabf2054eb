//! Instance-level rehearsal memory.
//!
//! Every instance of a class gets a value
//!
//! ```text
//! v_i = α_i + ‖h_i − B̄_j‖₂ + ‖h_i − C̄‖₂
//! ```
//!
//! where `h_i` is the instance feature under the current model, `α_i` its
//! attention inside its bag, `B̄_j` the mean feature of its bag and `C̄` the
//! mean of the class's bag means. A 0/1 knapsack over unit-cost items then
//! picks the class's share of the memory, and the survivors are regrouped
//! into partial bags in their original order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::knapsack;
use crate::math;
use crate::model::{Bag, ByteReader, MilModel};

/// One knapsack item: an instance of a bag with its value and memory cost.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueItem {
    pub bag_id: String,
    pub instance_index: usize,
    pub value: f64,
    pub cost: usize,
}

/// A (possibly partial) bag held in memory with one value per instance.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredBag {
    pub bag: Bag,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub class_id: usize,
    pub bag_means: Vec<Vec<f64>>,
    pub class_mean: Vec<f64>,
}

/// Knobs for instance scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ValueOptions {
    /// Z-score each distance term over the class, then shift it so its
    /// minimum is zero. Off by default.
    pub normalize_distances: bool,
}

/// Memory of at most `capacity` instances, grouped into partial bags.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarMemory {
    capacity: usize,
    class_ids: Vec<usize>,
    bags: Vec<StoredBag>,
}

/// `⌊K / classes⌋`.
pub fn per_class_budget(capacity: usize, num_classes: usize) -> Result<usize> {
    if num_classes == 0 {
        return Err(Error::contract("per-class budget needs at least one class"));
    }
    Ok(capacity / num_classes)
}

/// Bag means of `ψ(I_i)` and their mean.
pub fn compute_class_stats(bags: &[&Bag], model: &MilModel) -> Result<ClassStats> {
    let first = bags
        .first()
        .ok_or_else(|| Error::contract("class statistics need at least one bag"))?;
    let d = model.config().feature_dim;
    let mut bag_means = Vec::with_capacity(bags.len());
    for bag in bags {
        if bag.label != first.label {
            return Err(Error::contract(format!(
                "bag {} has label {}, expected {}",
                bag.bag_id, bag.label, first.label
            )));
        }
        if bag.is_empty() {
            return Err(Error::contract(format!(
                "bag {} has no instances",
                bag.bag_id
            )));
        }
        if bag.dim() != model.config().d_in {
            return Err(Error::shape(
                "compute_class_stats",
                format!("model d_in {}", model.config().d_in),
                format!("bag {} dim {}", bag.bag_id, bag.dim()),
            ));
        }
        let feats: Vec<Vec<f64>> = bag
            .instances
            .iter()
            .map(|x| model.instance_feature(x))
            .collect();
        bag_means.push(math::mean_of(feats.iter().map(Vec::as_slice), d));
    }
    let class_mean = math::mean_of(bag_means.iter().map(Vec::as_slice), d);
    Ok(ClassStats {
        class_id: first.label,
        bag_means,
        class_mean,
    })
}

/// `α + ‖h − B̄‖₂ + ‖h − C̄‖₂`.
pub fn instance_value(
    feature: &[f64],
    attention: f64,
    bag_mean: &[f64],
    class_mean: &[f64],
) -> Result<f64> {
    if feature.len() != bag_mean.len() || feature.len() != class_mean.len() {
        return Err(Error::shape(
            "instance_value",
            format!("feature dim {}", feature.len()),
            format!(
                "bag mean dim {}, class mean dim {}",
                bag_mean.len(),
                class_mean.len()
            ),
        ));
    }
    Ok(attention + math::euclidean(feature, bag_mean) + math::euclidean(feature, class_mean))
}

/// Exact 0/1 knapsack over the items; returns selected positions in increasing order.
pub fn knapsack_select(items: &[ValueItem], capacity: usize) -> Vec<usize> {
    let values: Vec<f64> = items.iter().map(|it| it.value).collect();
    let costs: Vec<usize> = items.iter().map(|it| it.cost.max(1)).collect();
    knapsack::solve(&values, &costs, capacity)
}

/// Values for every instance of every bag of one class, under `model`.
pub fn score_class(bags: &[&Bag], model: &MilModel, opts: ValueOptions) -> Result<Vec<Vec<f64>>> {
    if bags.is_empty() {
        return Ok(Vec::new());
    }
    let d = model.config().feature_dim;
    let mut outputs = Vec::with_capacity(bags.len());
    let mut bag_means = Vec::with_capacity(bags.len());
    for bag in bags {
        let out = model.forward(bag)?;
        bag_means.push(math::mean_of(
            out.instance_features.iter().map(Vec::as_slice),
            d,
        ));
        outputs.push(out);
    }
    let class_mean = math::mean_of(bag_means.iter().map(Vec::as_slice), d);

    let mut to_bag = Vec::new();
    let mut to_class = Vec::new();
    for (out, bag_mean) in outputs.iter().zip(&bag_means) {
        for h in &out.instance_features {
            to_bag.push(math::euclidean(h, bag_mean));
            to_class.push(math::euclidean(h, &class_mean));
        }
    }
    if opts.normalize_distances {
        standardize_shifted(&mut to_bag);
        standardize_shifted(&mut to_class);
    }

    let mut k = 0;
    let mut values = Vec::with_capacity(bags.len());
    for out in &outputs {
        let mut vs = Vec::with_capacity(out.attentions.len());
        for &a in &out.attentions {
            vs.push(a + to_bag[k] + to_class[k]);
            k += 1;
        }
        values.push(vs);
    }
    Ok(values)
}

fn standardize_shifted(xs: &mut [f64]) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 0.0 {
        xs.iter_mut().for_each(|x| *x = (*x - mean) / std);
    } else {
        xs.iter_mut().for_each(|x| *x = 0.0);
    }
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    xs.iter_mut().for_each(|x| *x -= min);
}

/// Picks the `budget` most valuable unit-cost instances of one class by
/// knapsack and regroups them into partial bags. Bags losing every
/// instance are dropped.
pub fn select_class(
    bags: &[&Bag],
    model: &MilModel,
    budget: usize,
    opts: ValueOptions,
) -> Result<Vec<StoredBag>> {
    let values = score_class(bags, model, opts)?;
    let items: Vec<ValueItem> = bags
        .iter()
        .zip(&values)
        .flat_map(|(bag, vs)| {
            vs.iter().enumerate().map(|(i, &v)| ValueItem {
                bag_id: bag.bag_id.clone(),
                instance_index: i,
                value: v,
                cost: 1,
            })
        })
        .collect();
    let picked = knapsack_select(&items, budget);
    Ok(regroup(bags, &values, &picked))
}

/// Rebuilds partial bags from flat item positions (bag-major, instance order).
fn regroup(bags: &[&Bag], values: &[Vec<f64>], picked: &[usize]) -> Vec<StoredBag> {
    let mut keep: Vec<Vec<usize>> = vec![Vec::new(); bags.len()];
    let offsets: Vec<usize> = bags
        .iter()
        .scan(0, |acc, b| {
            let start = *acc;
            *acc += b.len();
            Some(start)
        })
        .collect();
    for &p in picked {
        let b = offsets.partition_point(|&o| o <= p) - 1;
        keep[b].push(p - offsets[b]);
    }
    bags.iter()
        .zip(values)
        .zip(keep)
        .filter(|(_, idx)| !idx.is_empty())
        .map(|((bag, vs), idx)| StoredBag {
            bag: Bag {
                bag_id: bag.bag_id.clone(),
                label: bag.label,
                instances: idx.iter().map(|&i| bag.instances[i].clone()).collect(),
            },
            values: idx.iter().map(|&i| vs[i]).collect(),
        })
        .collect()
}

/// Fresh memory over the classes of `per_class`, each given `⌊K / classes⌋` instances.
pub fn build_exemplar_set(
    per_class: &BTreeMap<usize, Vec<Bag>>,
    model: &MilModel,
    capacity: usize,
) -> Result<ExemplarMemory> {
    build_exemplar_set_with(per_class, model, capacity, ValueOptions::default())
}

pub fn build_exemplar_set_with(
    per_class: &BTreeMap<usize, Vec<Bag>>,
    model: &MilModel,
    capacity: usize,
    opts: ValueOptions,
) -> Result<ExemplarMemory> {
    let mut memory = ExemplarMemory::new(capacity);
    if per_class.is_empty() {
        return Ok(memory);
    }
    let budget = per_class_budget(capacity, per_class.len())?;
    for (&class, bags) in per_class {
        if model.class_index(class).is_none() {
            return Err(Error::contract(format!(
                "model does not cover class {class}"
            )));
        }
        let refs: Vec<&Bag> = bags.iter().collect();
        memory.insert_class(class, select_class(&refs, model, budget, opts)?)?;
    }
    Ok(memory)
}

/// Re-scores every stored instance with the current model and keeps each
/// class's `⌊K / new_num_classes⌋` most valuable ones.
pub fn reduce_exemplar_set(
    memory: &ExemplarMemory,
    model: &MilModel,
    new_num_classes: usize,
) -> Result<ExemplarMemory> {
    reduce_exemplar_set_with(memory, model, new_num_classes, ValueOptions::default())
}

pub fn reduce_exemplar_set_with(
    memory: &ExemplarMemory,
    model: &MilModel,
    new_num_classes: usize,
    opts: ValueOptions,
) -> Result<ExemplarMemory> {
    let budget = per_class_budget(memory.capacity, new_num_classes)?;
    let mut out = ExemplarMemory::new(memory.capacity);
    for &class in &memory.class_ids {
        let refs: Vec<&Bag> = memory.class_bags(class).map(|s| &s.bag).collect();
        out.insert_class(class, select_class(&refs, model, budget, opts)?)?;
    }
    Ok(out)
}

impl ExemplarMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            class_ids: Vec::new(),
            bags: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn bags(&self) -> &[StoredBag] {
        &self.bags
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn class_bags(&self, class: usize) -> impl Iterator<Item = &StoredBag> {
        self.bags.iter().filter(move |s| s.bag.label == class)
    }

    pub fn total_instances(&self) -> usize {
        self.bags.iter().map(|s| s.bag.len()).sum()
    }

    pub fn class_instances(&self, class: usize) -> usize {
        self.class_bags(class).map(|s| s.bag.len()).sum()
    }

    /// Bags to replay during training.
    pub fn training_bags(&self) -> impl Iterator<Item = &Bag> {
        self.bags.iter().map(|s| &s.bag)
    }

    /// Adds (or replaces) the stored bags of one class. Empty bags are skipped.
    pub fn insert_class(&mut self, class: usize, bags: Vec<StoredBag>) -> Result<()> {
        for s in &bags {
            if s.bag.label != class {
                return Err(Error::contract(format!(
                    "bag {} has label {}, inserted under class {class}",
                    s.bag.bag_id, s.bag.label
                )));
            }
            if s.values.len() != s.bag.len() {
                return Err(Error::contract(format!(
                    "bag {}: one value per instance required",
                    s.bag.bag_id
                )));
            }
        }
        self.bags.retain(|s| s.bag.label != class);
        if !self.class_ids.contains(&class) {
            self.class_ids.push(class);
        }
        self.bags
            .extend(bags.into_iter().filter(|s| !s.bag.is_empty()));
        Ok(())
    }

    /// Capacity, per-class budget and no-empty-bag checks.
    pub fn check_invariants(&self, num_classes: usize) -> Result<()> {
        let total = self.total_instances();
        if total > self.capacity {
            return Err(Error::contract(format!(
                "memory holds {total} instances, capacity {}",
                self.capacity
            )));
        }
        let budget = per_class_budget(self.capacity, num_classes.max(1))?;
        for &c in &self.class_ids {
            let n = self.class_instances(c);
            if n > budget {
                return Err(Error::contract(format!(
                    "class {c} holds {n} instances, budget {budget}"
                )));
            }
        }
        for s in &self.bags {
            if s.bag.is_empty() {
                return Err(Error::contract(format!(
                    "empty bag {} in memory",
                    s.bag.bag_id
                )));
            }
            if !s.values.iter().all(|v| v.is_finite()) {
                return Err(Error::contract(format!(
                    "non-finite value in bag {}",
                    s.bag.bag_id
                )));
            }
        }
        Ok(())
    }

    /// Serializes to the `CMX1` container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MEMORY_MAGIC);
        let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u64).to_le_bytes());
        put(&mut out, self.capacity);
        put(&mut out, self.class_ids.len());
        for &c in &self.class_ids {
            put(&mut out, c);
        }
        put(&mut out, self.bags.len());
        for s in &self.bags {
            put(&mut out, s.bag.bag_id.len());
            out.extend_from_slice(s.bag.bag_id.as_bytes());
            put(&mut out, s.bag.label);
            put(&mut out, s.bag.len());
            put(&mut out, s.bag.dim());
            for x in s.bag.instances.iter().flatten() {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for v in &s.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MEMORY_MAGIC {
            return Err(Error::format("offset 0", "bad memory magic, expected CMX1"));
        }
        let capacity = r.u64()? as usize;
        let n_classes = r.count()?;
        let class_ids = (0..n_classes)
            .map(|_| r.count())
            .collect::<Result<Vec<_>>>()?;
        let n_bags = r.count()?;
        let mut bags = Vec::with_capacity(n_bags.min(1 << 16));
        for _ in 0..n_bags {
            let at = r.offset();
            let id_len = r.count()?;
            let bag_id = std::str::from_utf8(r.take(id_len)?)
                .map_err(|_| Error::format(format!("offset {at}"), "bag id is not UTF-8"))?
                .to_owned();
            let label = r.count()?;
            let n = r.count()?;
            let d = r.count()?;
            if n == 0 || d == 0 {
                return Err(Error::format(
                    format!("offset {at}"),
                    format!("bag {bag_id} is empty"),
                ));
            }
            if !class_ids.contains(&label) {
                return Err(Error::format(
                    format!("offset {at}"),
                    format!("bag {bag_id} label {label} not among class ids"),
                ));
            }
            let mut instances = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                instances.push((0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
            }
            let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            bags.push(StoredBag {
                bag: Bag {
                    bag_id,
                    label,
                    instances,
                },
                values,
            });
        }
        r.finish()?;
        Ok(Self {
            capacity,
            class_ids,
            bags,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const MEMORY_MAGIC: &[u8; 4] = b"CMX1";
