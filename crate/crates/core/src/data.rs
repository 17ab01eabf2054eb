//! Synthetic bag datasets, stratified splitting and the MILDS text format.
//!
//! Each class owns a hallmark center `μ_c` at distance `class_separation`
//! from the origin, with centers pairwise at least `class_separation` apart.
//! A bag of class `c` mixes `⌈hallmark_fraction · N⌉` draws from
//! `N(μ_c, σ²I)` with background draws from `N(0, σ²I)` shared by all
//! classes, shuffled together.
//!
//! MILDS layout (UTF-8, LF):
//!
//! ```text
//! MILDS 1 <d_in> <num_classes>
//! <class name>\t<class name>...
//! <bag_id>\t<label>\t<split>\t<N>
//! <d_in space-separated floats>      (N lines)
//! ...
//! ```
//!
//! `<split>` is `train`, `test` or `-`. Floats use Rust's shortest
//! round-trip formatting, so a write/read cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Bag;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unassigned => "-",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "-" => Ok(Split::Unassigned),
            other => Err(format!("unknown split tag {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub bags_per_class: usize,
    /// Optional per-class bag counts; overrides `bags_per_class` when set.
    pub class_bag_counts: Option<Vec<usize>>,
    pub instances_per_bag: usize,
    pub d_in: usize,
    pub hallmark_fraction: f64,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            bags_per_class: 50,
            class_bag_counts: None,
            instances_per_bag: 64,
            d_in: 16,
            hallmark_fraction: 0.1,
            class_separation: 3.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts_ok = match &self.class_bag_counts {
            Some(c) => c.len() == self.num_classes && c.iter().all(|&n| n >= 1),
            None => self.bags_per_class >= 1,
        };
        if self.num_classes == 0 || self.instances_per_bag == 0 || self.d_in == 0 || !counts_ok {
            return Err(Error::Spec(format!(
                "all counts must be at least 1: {self:?}"
            )));
        }
        if !(self.hallmark_fraction > 0.0 && self.hallmark_fraction <= 1.0) {
            return Err(Error::Spec(format!(
                "hallmark_fraction must be in (0, 1], got {}",
                self.hallmark_fraction
            )));
        }
        if !(self.class_separation > 0.0) || !self.class_separation.is_finite() {
            return Err(Error::Spec(format!(
                "class_separation must be positive, got {}",
                self.class_separation
            )));
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Spec(format!(
                "noise_sigma must be positive, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    fn bags_for(&self, class: usize) -> usize {
        self.class_bag_counts
            .as_ref()
            .map_or(self.bags_per_class, |c| c[class])
    }

    pub fn hallmarks_per_bag(&self) -> usize {
        ((self.hallmark_fraction * self.instances_per_bag as f64).ceil() as usize)
            .clamp(1, self.instances_per_bag)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub d_in: usize,
    pub class_names: Vec<String>,
    pub bags: Vec<Bag>,
    /// One tag per bag, parallel to `bags`.
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn bags_with(&self, split: Split) -> impl Iterator<Item = &Bag> {
        self.bags
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == split)
            .map(|(b, _)| b)
    }

    pub fn train_bags(&self) -> impl Iterator<Item = &Bag> {
        self.bags_with(Split::Train)
    }

    pub fn test_bags(&self) -> impl Iterator<Item = &Bag> {
        self.bags_with(Split::Test)
    }

    pub fn total_instances(&self) -> usize {
        self.bags.iter().map(Bag::len).sum()
    }

    /// Structural checks: dimensions, labels, unique ids, one tag per bag.
    pub fn validate(&self) -> Result<()> {
        if self.splits.len() != self.bags.len() {
            return Err(Error::contract(format!(
                "{} split tags for {} bags",
                self.splits.len(),
                self.bags.len()
            )));
        }
        let mut ids = std::collections::HashSet::new();
        for bag in &self.bags {
            bag.check()?;
            if bag.dim() != self.d_in {
                return Err(Error::shape(
                    "Dataset",
                    format!("d_in {}", self.d_in),
                    format!("bag {} dim {}", bag.bag_id, bag.dim()),
                ));
            }
            if bag.label >= self.num_classes() {
                return Err(Error::contract(format!(
                    "bag {} label {} out of range",
                    bag.bag_id, bag.label
                )));
            }
            if !ids.insert(bag.bag_id.as_str()) {
                return Err(Error::contract(format!("duplicate bag id {}", bag.bag_id)));
            }
        }
        Ok(())
    }

    /// Every class has at least one train and one test bag.
    pub fn check_split(&self) -> Result<()> {
        for c in 0..self.num_classes() {
            for want in [Split::Train, Split::Test] {
                if !self.bags_with(want).any(|b| b.label == c) {
                    return Err(Error::contract(format!(
                        "class {c} ({}) has no {} bag",
                        self.class_names[c],
                        want.as_str()
                    )));
                }
            }
        }
        Ok(())
    }
}

const MAX_CENTER_TRIES: usize = 10_000;

/// Draws a dataset from `spec`; bags come back untagged.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d_in;

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    let mut tries = 0;
    while centers.len() < spec.num_classes {
        tries += 1;
        if tries > MAX_CENTER_TRIES {
            return Err(Error::Spec(format!(
                "could not place {} centers {} apart in {d} dimensions after {MAX_CENTER_TRIES} tries",
                spec.num_classes, spec.class_separation
            )));
        }
        let raw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let c: Vec<f64> = raw
            .iter()
            .map(|x| x / norm * spec.class_separation)
            .collect();
        if centers
            .iter()
            .all(|o| crate::math::euclidean(o, &c) >= spec.class_separation)
        {
            centers.push(c);
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let n = spec.instances_per_bag;
    let hallmarks = spec.hallmarks_per_bag();
    let mut bags = Vec::new();
    for (class, mu) in centers.iter().enumerate() {
        for b in 0..spec.bags_for(class) {
            let mut instances: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    (0..d)
                        .map(|k| noise.sample(&mut rng) + if i < hallmarks { mu[k] } else { 0.0 })
                        .collect()
                })
                .collect();
            instances.shuffle(&mut rng);
            bags.push(Bag {
                bag_id: format!("c{class}_b{b:04}"),
                label: class,
                instances,
            });
        }
    }
    let count = bags.len();
    Ok(Dataset {
        d_in: d,
        class_names: (0..spec.num_classes)
            .map(|c| format!("class_{c}"))
            .collect(),
        bags,
        splits: vec![Split::Unassigned; count],
    })
}

/// Stratified split: per class, `clamp(⌈f · n⌉, 1, n − 1)` bags go to train
/// after a seeded shuffle; the rest go to test.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::contract(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = vec![Split::Test; dataset.bags.len()];
    for class in 0..dataset.num_classes() {
        let mut idx: Vec<usize> = (0..dataset.bags.len())
            .filter(|&i| dataset.bags[i].label == class)
            .collect();
        if idx.len() < 2 {
            return Err(Error::contract(format!(
                "class {class} has {} bag(s); splitting needs at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_train = train_count(idx.len(), train_fraction);
        for &i in &idx[..n_train] {
            splits[i] = Split::Train;
        }
    }
    Ok(Dataset {
        splits,
        ..dataset.clone()
    })
}

/// Number of training bags for a class of `n` bags.
pub fn train_count(n: usize, train_fraction: f64) -> usize {
    ((train_fraction * n as f64).ceil() as usize).clamp(1, n.saturating_sub(1).max(1))
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_milds(dataset)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_milds(&text)
}

pub fn to_milds(dataset: &Dataset) -> Result<String> {
    dataset.validate()?;
    if dataset.class_names.iter().any(|n| n.contains(['\t', '\n'])) {
        return Err(Error::contract(
            "class names must not contain tabs or newlines",
        ));
    }
    let mut out = String::new();
    writeln!(out, "MILDS 1 {} {}", dataset.d_in, dataset.num_classes()).unwrap();
    writeln!(out, "{}", dataset.class_names.join("\t")).unwrap();
    for (bag, split) in dataset.bags.iter().zip(&dataset.splits) {
        if bag.bag_id.contains(['\t', '\n']) || bag.bag_id.is_empty() {
            return Err(Error::contract(format!(
                "bag id {:?} is not representable",
                bag.bag_id
            )));
        }
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            bag.bag_id,
            bag.label,
            split.as_str(),
            bag.len()
        )
        .unwrap();
        for x in &bag.instances {
            let mut first = true;
            for v in x {
                if !first {
                    out.push(' ');
                }
                first = false;
                write!(out, "{v:?}").unwrap();
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn parse_milds(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let bad = |line: usize, msg: String| Error::format(format!("line {line}"), msg);

    let (ln, header) = lines
        .next()
        .filter(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| Error::format("line 1", "missing manifest"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (d_in, num_classes) = match fields.as_slice() {
        ["MILDS", "1", d, c] => (
            d.parse::<usize>()
                .map_err(|e| bad(ln, format!("bad d_in: {e}")))?,
            c.parse::<usize>()
                .map_err(|e| bad(ln, format!("bad class count: {e}")))?,
        ),
        _ => {
            return Err(bad(
                ln,
                format!("missing manifest: expected `MILDS 1 <d_in> <classes>`, got {header:?}"),
            ))
        }
    };
    if d_in == 0 {
        return Err(bad(ln, "d_in must be positive".into()));
    }
    let (ln, names) = lines
        .next()
        .ok_or_else(|| bad(2, "missing class names line".into()))?;
    let class_names: Vec<String> = names.split('\t').map(str::to_owned).collect();
    if class_names.len() != num_classes {
        return Err(bad(
            ln,
            format!(
                "expected {num_classes} class names, found {}",
                class_names.len()
            ),
        ));
    }

    let mut bags = Vec::new();
    let mut splits = Vec::new();
    while let Some((ln, rec)) = lines.next() {
        if rec.is_empty() {
            continue;
        }
        let parts: Vec<&str> = rec.split('\t').collect();
        let [bag_id, label, split, n] = parts.as_slice() else {
            return Err(bad(
                ln,
                format!("expected 4 tab-separated bag fields, got {}", parts.len()),
            ));
        };
        let label: usize = label
            .parse()
            .map_err(|e| bad(ln, format!("bad label: {e}")))?;
        if label >= num_classes {
            return Err(bad(
                ln,
                format!("label {label} out of range for {num_classes} classes"),
            ));
        }
        let split: Split = split.parse().map_err(|e| bad(ln, e))?;
        let n: usize = n
            .parse()
            .map_err(|e| bad(ln, format!("bad instance count: {e}")))?;
        if n == 0 {
            return Err(bad(ln, format!("bag {bag_id} has no instances")));
        }
        let mut instances = Vec::with_capacity(n);
        for _ in 0..n {
            let (il, row) = lines
                .next()
                .ok_or_else(|| bad(ln, format!("bag {bag_id}: file ends before {n} instances")))?;
            let x = row
                .split(' ')
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| bad(il, format!("bad float {t:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if x.len() != d_in {
                return Err(Error::format(
                    format!("line {il}"),
                    format!(
                        "bag {bag_id}: instance has {} values, expected {d_in}",
                        x.len()
                    ),
                ));
            }
            if let Some(v) = x.iter().find(|v| !v.is_finite()) {
                return Err(bad(il, format!("non-finite value {v}")));
            }
            instances.push(x);
        }
        bags.push(Bag {
            bag_id: bag_id.to_string(),
            label,
            instances,
        });
        splits.push(split);
    }
    let ds = Dataset {
        d_in,
        class_names,
        bags,
        splits,
    };
    ds.validate()
        .map_err(|e| Error::format("dataset", e.to_string()))?;
    Ok(ds)
}
