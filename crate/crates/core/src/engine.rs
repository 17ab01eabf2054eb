//! Class-incremental scenario runner.
//!
//! At step `t` the head grows by the classes of task `t`, the model trains on
//! the task's bags plus whatever the method replays, every task seen so far
//! is evaluated on held-out bags, and the rehearsal memory is refreshed.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::memory::{self, ExemplarMemory, StoredBag, ValueOptions};
use crate::model::{Bag, MilModel, ModelConfig};
use crate::training::{self, TrainConfig};

/// Ordered, disjoint class groups `C_1 .. C_T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSchedule {
    tasks: Vec<Vec<usize>>,
}

impl TaskSchedule {
    pub fn new(tasks: Vec<Vec<usize>>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::contract("schedule has no tasks"));
        }
        let mut seen = HashSet::new();
        for (t, group) in tasks.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::contract(format!("task {} has no classes", t + 1)));
            }
            for &c in group {
                if !seen.insert(c) {
                    return Err(Error::contract(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
        }
        Ok(Self { tasks })
    }

    /// `num_classes / per_task` consecutive groups: `[0,1], [2,3], ...`.
    pub fn consecutive(num_classes: usize, per_task: usize) -> Result<Self> {
        if per_task == 0 || num_classes == 0 || !num_classes.is_multiple_of(per_task) {
            return Err(Error::contract(format!(
                "{num_classes} classes cannot be cut into tasks of {per_task}"
            )));
        }
        Self::new(
            (0..num_classes / per_task)
                .map(|t| (t * per_task..(t + 1) * per_task).collect())
                .collect(),
        )
    }

    pub fn tasks(&self) -> &[Vec<usize>] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.tasks.iter().position(|g| g.contains(&class))
    }

    /// The schedule covers exactly the dataset's classes.
    pub fn check_against(&self, dataset: &Dataset) -> Result<()> {
        let mut covered: Vec<usize> = self.tasks.iter().flatten().copied().collect();
        covered.sort_unstable();
        let expected: Vec<usize> = (0..dataset.num_classes()).collect();
        if covered != expected {
            return Err(Error::contract(format!(
                "schedule covers classes {covered:?}, dataset has {} classes",
                dataset.num_classes()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for TaskSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let groups: Vec<String> = self
            .tasks
            .iter()
            .map(|g| g.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
            .collect();
        f.write_str(&groups.join(";"))
    }
}

impl FromStr for TaskSchedule {
    type Err = Error;

    /// `"0,1;2,3"` → `[[0, 1], [2, 3]]`.
    fn from_str(s: &str) -> Result<Self> {
        let tasks = s
            .split(';')
            .map(|g| {
                g.split(',')
                    .map(|c| {
                        c.trim().parse::<usize>().map_err(|e| {
                            Error::contract(format!("bad class id {c:?} in schedule: {e}"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(tasks)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Knapsack-selected instances plus distillation.
    Comil,
    /// Current task only, no memory, no distillation.
    Finetune,
    /// Whole bags sampled per class until the budget is full, plus distillation.
    RehearseFullBags,
    /// Highest-attention instances of each bag, plus distillation.
    AttentionTopk,
    /// All training data of every task seen so far, no distillation.
    UpperBound,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Comil,
        Method::Finetune,
        Method::RehearseFullBags,
        Method::AttentionTopk,
        Method::UpperBound,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Comil => "comil",
            Method::Finetune => "finetune",
            Method::RehearseFullBags => "rehearse_full_bags",
            Method::AttentionTopk => "attention_topk",
            Method::UpperBound => "upper_bound",
        }
    }

    pub fn distills(self) -> bool {
        matches!(
            self,
            Method::Comil | Method::RehearseFullBags | Method::AttentionTopk
        )
    }

    pub fn uses_memory(self) -> bool {
        self.distills()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown method {s:?}")))
    }
}

/// `a[t][j]`: accuracy on task `j`'s test classes after step `t` (`j ≤ t`, 0-based).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccuracyMatrix(pub Vec<Vec<f64>>);

impl AccuracyMatrix {
    pub fn steps(&self) -> usize {
        self.0.len()
    }

    fn check_complete(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::contract("accuracy matrix is empty"));
        }
        for (t, row) in self.0.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::contract(format!(
                    "accuracy row {} has {} entries, expected {}",
                    t + 1,
                    row.len(),
                    t + 1
                )));
            }
        }
        Ok(())
    }

    /// Mean of the final row.
    pub fn average_accuracy(&self) -> Result<f64> {
        self.check_complete()?;
        let last = self.0.last().expect("nonempty");
        Ok(last.iter().sum::<f64>() / last.len() as f64)
    }

    /// Mean over `j < T` of `max_{j ≤ t < T} a[t][j] − a[T][j]`.
    pub fn average_forgetting(&self) -> Result<f64> {
        self.check_complete()?;
        let steps = self.0.len();
        if steps < 2 {
            return Err(Error::contract("forgetting needs at least two steps"));
        }
        let last = &self.0[steps - 1];
        let total: f64 = (0..steps - 1)
            .map(|j| {
                let peak = (j..steps - 1)
                    .map(|t| self.0[t][j])
                    .fold(f64::NEG_INFINITY, f64::max);
                peak - last[j]
            })
            .sum();
        Ok(total / (steps - 1) as f64)
    }
}

/// Memory occupancy after one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryStats {
    pub total_instances: usize,
    pub max_class_instances: usize,
    pub class_budget: usize,
    pub empty_bags: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub capacity: usize,
    pub schedule: TaskSchedule,
    pub train: TrainConfig,
    pub accuracy: AccuracyMatrix,
    /// Wall-clock seconds per step; the only nondeterministic field.
    pub step_seconds: Vec<f64>,
    pub memory: Vec<MemoryStats>,
}

impl RunRecord {
    pub fn average_accuracy(&self) -> Result<f64> {
        self.accuracy.average_accuracy()
    }

    /// `None` for single-task runs.
    pub fn average_forgetting(&self) -> Option<f64> {
        self.accuracy.average_forgetting().ok()
    }

    /// Plain-text report: `key=value` header, `acc,t,j,value` rows (1-based),
    /// then `summary,avg_acc,avg_forget` (`NA` when forgetting is undefined).
    pub fn to_report(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("method={}\n", self.method));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("K={}\n", self.capacity));
        out.push_str(&format!("schedule={}\n", self.schedule));
        out.push_str(&format!("epochs={}\n", self.train.epochs));
        out.push_str(&format!("lr={}\n", self.train.lr));
        for (t, row) in self.accuracy.0.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                out.push_str(&format!("acc,{},{},{}\n", t + 1, j + 1, a));
            }
        }
        let acc = self
            .average_accuracy()
            .map_or_else(|_| "NA".into(), |a| a.to_string());
        let forget = self
            .average_forgetting()
            .map_or_else(|| "NA".into(), |f| f.to_string());
        out.push_str(&format!("summary,{acc},{forget}\n"));
        out
    }
}

/// Fields recovered from a report produced by [`RunRecord::to_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedReport {
    pub method: Method,
    pub seed: u64,
    pub capacity: usize,
    pub schedule: TaskSchedule,
    pub accuracy: AccuracyMatrix,
    pub avg_acc: f64,
    pub avg_forget: Option<f64>,
}

pub fn parse_report(text: &str) -> Result<ParsedReport> {
    let mut method = None;
    let mut seed = None;
    let mut capacity = None;
    let mut schedule = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut summary = None;
    for (i, line) in text.lines().enumerate() {
        let at = || format!("line {}", i + 1);
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::format(at(), format!("bad number {s:?}: {e}")))
        };
        if let Some((k, v)) = line.split_once('=') {
            match k {
                "method" => method = Some(v.parse::<Method>()?),
                "seed" => {
                    seed = Some(
                        v.parse::<u64>()
                            .map_err(|e| Error::format(at(), e.to_string()))?,
                    )
                }
                "K" => {
                    capacity = Some(
                        v.parse::<usize>()
                            .map_err(|e| Error::format(at(), e.to_string()))?,
                    )
                }
                "schedule" => schedule = Some(v.parse::<TaskSchedule>()?),
                _ => {}
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        match f.as_slice() {
            ["acc", t, j, v] => {
                let t: usize = t.parse().map_err(|_| Error::format(at(), "bad step"))?;
                let j: usize = j.parse().map_err(|_| Error::format(at(), "bad task"))?;
                if t == rows.len() + 1 {
                    rows.push(Vec::new());
                }
                if t == 0 || t != rows.len() || rows[t - 1].len() + 1 != j || j > t {
                    return Err(Error::format(at(), "accuracy rows out of order"));
                }
                rows[t - 1].push(num(v)?);
            }
            ["summary", a, f] => {
                let forget = if *f == "NA" { None } else { Some(num(f)?) };
                summary = Some((num(a)?, forget));
            }
            [""] => {}
            _ => {
                return Err(Error::format(
                    at(),
                    format!("unrecognized report line {line:?}"),
                ))
            }
        }
    }
    let missing = |what: &str| Error::format("report", format!("missing {what}"));
    let (avg_acc, avg_forget) = summary.ok_or_else(|| missing("summary"))?;
    Ok(ParsedReport {
        method: method.ok_or_else(|| missing("method"))?,
        seed: seed.ok_or_else(|| missing("seed"))?,
        capacity: capacity.ok_or_else(|| missing("K"))?,
        schedule: schedule.ok_or_else(|| missing("schedule"))?,
        accuracy: AccuracyMatrix(rows),
        avg_acc,
        avg_forget,
    })
}

/// Everything one scenario run depends on.
#[derive(Clone, Debug)]
pub struct Scenario<'a> {
    pub dataset: &'a Dataset,
    pub schedule: &'a TaskSchedule,
    pub method: Method,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub capacity: usize,
    pub seed: u64,
    pub values: ValueOptions,
}

/// Runs one method over the schedule with the default model size.
pub fn run_scenario(
    dataset: &Dataset,
    schedule: &TaskSchedule,
    method: Method,
    cfg: &TrainConfig,
    capacity: usize,
    seed: u64,
) -> Result<RunRecord> {
    Scenario::new(dataset, schedule, method, *cfg, capacity, seed).run()
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl<'a> Scenario<'a> {
    pub fn new(
        dataset: &'a Dataset,
        schedule: &'a TaskSchedule,
        method: Method,
        train: TrainConfig,
        capacity: usize,
        seed: u64,
    ) -> Self {
        Self {
            dataset,
            schedule,
            method,
            train,
            model: ModelConfig::with_input_dim(dataset.d_in),
            capacity,
            seed,
            values: ValueOptions::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.dataset.validate()?;
        self.schedule.check_against(self.dataset)?;
        self.dataset.check_split()?;
        if self.model.d_in != self.dataset.d_in {
            return Err(Error::shape(
                "run_scenario",
                format!("model d_in {}", self.model.d_in),
                format!("dataset d_in {}", self.dataset.d_in),
            ));
        }
        let train: HashSet<&str> = self
            .dataset
            .train_bags()
            .map(|b| b.bag_id.as_str())
            .collect();
        if let Some(b) = self
            .dataset
            .test_bags()
            .find(|b| train.contains(b.bag_id.as_str()))
        {
            return Err(Error::contract(format!(
                "bag id {} is in both train and test",
                b.bag_id
            )));
        }
        Ok(())
    }

    pub fn run(&self) -> Result<RunRecord> {
        self.validate()?;
        let ds = self.dataset;
        let tasks = self.schedule.tasks();
        let mut model = MilModel::new(self.model, &[], self.seed)?;
        let mut memory = ExemplarMemory::new(self.capacity);
        let mut sampler = ChaCha8Rng::seed_from_u64(mix(self.seed, 0xbae5));
        let mut accuracy = Vec::with_capacity(tasks.len());
        let mut step_seconds = Vec::with_capacity(tasks.len());
        let mut mem_stats = Vec::with_capacity(tasks.len());

        for (t, new_classes) in tasks.iter().enumerate() {
            let started = Instant::now();
            let distill = self.method.distills() && self.train.distill_enabled && t > 0;
            let prev = distill.then(|| model.clone());
            model.expand_head(new_classes, mix(self.seed, 1000 + t as u64))?;

            let seen: Vec<usize> = tasks[..=t].iter().flatten().copied().collect();
            let mut bags: Vec<&Bag> = match self.method {
                Method::UpperBound => ds
                    .train_bags()
                    .filter(|b| seen.contains(&b.label))
                    .collect(),
                _ => ds
                    .train_bags()
                    .filter(|b| new_classes.contains(&b.label))
                    .collect(),
            };
            if self.method.uses_memory() {
                bags.extend(memory.training_bags());
            }
            let cfg = TrainConfig {
                shuffle_seed: mix(self.train.shuffle_seed ^ self.seed, 2000 + t as u64),
                distill_enabled: distill,
                ..self.train
            };
            training::train_task(&mut model, prev.as_ref(), &bags, &cfg)?;

            let mut row = Vec::with_capacity(t + 1);
            for group in &tasks[..=t] {
                row.push(evaluate(
                    &model,
                    ds.test_bags().filter(|b| group.contains(&b.label)),
                )?);
            }
            accuracy.push(row);

            if self.method.uses_memory() {
                memory =
                    self.update_memory(&memory, &model, new_classes, seen.len(), &mut sampler)?;
            }
            let stats = memory_stats(&memory, self.capacity, seen.len())?;
            memory.check_invariants(seen.len())?;
            mem_stats.push(stats);
            step_seconds.push(started.elapsed().as_secs_f64());
        }

        Ok(RunRecord {
            method: self.method,
            seed: self.seed,
            capacity: self.capacity,
            schedule: self.schedule.clone(),
            train: self.train,
            accuracy: AccuracyMatrix(accuracy),
            step_seconds,
            memory: mem_stats,
        })
    }

    fn update_memory(
        &self,
        memory: &ExemplarMemory,
        model: &MilModel,
        new_classes: &[usize],
        num_seen: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ExemplarMemory> {
        let budget = memory::per_class_budget(self.capacity, num_seen)?;
        let class_train = |c: usize| -> Vec<&Bag> {
            self.dataset.train_bags().filter(|b| b.label == c).collect()
        };
        match self.method {
            Method::Comil => {
                let mut next =
                    memory::reduce_exemplar_set_with(memory, model, num_seen, self.values)?;
                for &c in new_classes {
                    next.insert_class(
                        c,
                        memory::select_class(&class_train(c), model, budget, self.values)?,
                    )?;
                }
                Ok(next)
            }
            Method::RehearseFullBags => {
                let mut next = ExemplarMemory::new(self.capacity);
                for &c in memory.class_ids() {
                    let kept: Vec<&Bag> = memory.class_bags(c).map(|s| &s.bag).collect();
                    next.insert_class(c, fill_whole_bags(&kept, budget))?;
                }
                for &c in new_classes {
                    let mut pool = class_train(c);
                    pool.shuffle(rng);
                    next.insert_class(c, fill_whole_bags(&pool, budget))?;
                }
                Ok(next)
            }
            Method::AttentionTopk => {
                let mut next = ExemplarMemory::new(self.capacity);
                for &c in memory.class_ids() {
                    let kept: Vec<&Bag> = memory.class_bags(c).map(|s| &s.bag).collect();
                    next.insert_class(c, top_attention(&kept, model, budget)?)?;
                }
                for &c in new_classes {
                    let mut pool = class_train(c);
                    pool.shuffle(rng);
                    next.insert_class(c, top_attention(&pool, model, budget)?)?;
                }
                Ok(next)
            }
            Method::Finetune | Method::UpperBound => Ok(memory.clone()),
        }
    }
}

/// Whole bags, in the given order, skipping any that no longer fit.
fn fill_whole_bags(bags: &[&Bag], budget: usize) -> Vec<StoredBag> {
    let mut used = 0;
    let mut out = Vec::new();
    for bag in bags {
        if used + bag.len() <= budget {
            used += bag.len();
            out.push(StoredBag {
                bag: (*bag).clone(),
                values: vec![0.0; bag.len()],
            });
        }
    }
    out
}

/// Per bag, the `⌈budget / bags⌉` highest-attention instances (original
/// order kept), visiting bags in the given order until the budget is spent.
fn top_attention(bags: &[&Bag], model: &MilModel, budget: usize) -> Result<Vec<StoredBag>> {
    if bags.is_empty() || budget == 0 {
        return Ok(Vec::new());
    }
    let quota = budget.div_ceil(bags.len());
    let mut left = budget;
    let mut out = Vec::new();
    for bag in bags {
        if left == 0 {
            break;
        }
        let att = model.forward(bag)?.attentions;
        let mut order: Vec<usize> = (0..bag.len()).collect();
        order.sort_by(|&a, &b| att[b].total_cmp(&att[a]).then(a.cmp(&b)));
        let take = quota.min(left).min(bag.len());
        let mut keep = order[..take].to_vec();
        keep.sort_unstable();
        left -= take;
        out.push(StoredBag {
            bag: Bag {
                bag_id: bag.bag_id.clone(),
                label: bag.label,
                instances: keep.iter().map(|&i| bag.instances[i].clone()).collect(),
            },
            values: keep.iter().map(|&i| att[i]).collect(),
        });
    }
    Ok(out)
}

fn memory_stats(memory: &ExemplarMemory, capacity: usize, num_seen: usize) -> Result<MemoryStats> {
    Ok(MemoryStats {
        total_instances: memory.total_instances(),
        max_class_instances: memory
            .class_ids()
            .iter()
            .map(|&c| memory.class_instances(c))
            .max()
            .unwrap_or(0),
        class_budget: memory::per_class_budget(capacity, num_seen)?,
        empty_bags: memory.bags().iter().filter(|s| s.bag.is_empty()).count(),
    })
}

/// Top-1 bag accuracy over all classes the model knows.
pub fn evaluate<'b>(model: &MilModel, bags: impl IntoIterator<Item = &'b Bag>) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for bag in bags {
        let idx = model.predict_index(bag)?;
        if model.class_ids()[idx] == bag.label {
            correct += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(Error::contract("no test bags to evaluate"));
    }
    Ok(correct as f64 / total as f64)
}
