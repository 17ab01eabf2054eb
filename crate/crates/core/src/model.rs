//! Attention-based MIL network.
//!
//! Per instance, a two-layer tanh transform produces `h_i`. Attention scores
//! are `α = softmax_i(wᵀ tanh(V h_i))`, the bag feature is `z = Σ α_i h_i`,
//! and a two-layer tanh classifier maps `z` to one logit per known class.
//! The classifier head grows by appending rows when new classes arrive.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math::{self, Gradients, Mat64, ParamSet};

/// A labeled, ordered collection of instance feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub bag_id: String,
    /// Dataset class id.
    pub label: usize,
    pub instances: Vec<Vec<f64>>,
}

impl Bag {
    pub fn new(bag_id: impl Into<String>, label: usize, instances: Vec<Vec<f64>>) -> Result<Self> {
        let bag = Self {
            bag_id: bag_id.into(),
            label,
            instances,
        };
        bag.check()?;
        Ok(bag)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.instances.first().map_or(0, Vec::len)
    }

    /// Nonempty, consistent dimension, finite entries.
    pub fn check(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::contract(format!(
                "bag {} has no instances",
                self.bag_id
            )));
        }
        let d = self.dim();
        for (i, x) in self.instances.iter().enumerate() {
            if x.len() != d {
                return Err(Error::shape(
                    "Bag",
                    format!("bag {} instance 0 dim {d}", self.bag_id),
                    format!("instance {i} dim {}", x.len()),
                ));
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::contract(format!(
                    "bag {} instance {i} has a non-finite entry",
                    self.bag_id
                )));
            }
        }
        Ok(())
    }
}

/// Layer sizes of a [`MilModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_in: usize,
    /// Instance feature dimension `d`.
    pub feature_dim: usize,
    /// Attention space dimension `D`.
    pub attention_dim: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            feature_dim: 16,
            attention_dim: 8,
            head_hidden: 16,
        }
    }
}

impl ModelConfig {
    pub fn with_input_dim(d_in: usize) -> Self {
        Self {
            d_in,
            ..Self::default()
        }
    }
}

/// Fully connected layer `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Mat64,
    pub bias: Vec<f64>,
}

impl Dense {
    fn init(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Self {
        let std = 1.0 / (inputs.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..inputs * outputs).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Mat64::from_vec(outputs, inputs, data).expect("sized"),
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.mul_vec(x);
        for (yi, b) in y.iter_mut().zip(&self.bias) {
            *yi += b;
        }
        y
    }

    /// Accumulates `∂L/∂W += g xᵀ`, `∂L/∂b += g` and returns `Wᵀ g`.
    fn backward(&self, x: &[f64], g: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
        let cols = self.weight.cols();
        for (r, &gr) in g.iter().enumerate() {
            gb[r] += gr;
            if gr == 0.0 {
                continue;
            }
            for (w, &xc) in gw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *w += gr * xc;
            }
        }
        self.weight.mul_vec_t(g)
    }
}

fn tanh_inplace(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

/// Output of one forward pass over a bag.
#[derive(Clone, Debug, PartialEq)]
pub struct BagOutput {
    /// One raw score per known class, in `class_ids` order.
    pub logits: Vec<f64>,
    /// One attention weight per instance; sums to 1.
    pub attentions: Vec<f64>,
    pub bag_feature: Vec<f64>,
    pub instance_features: Vec<Vec<f64>>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct ForwardTrace {
    psi_hidden: Vec<Vec<f64>>,
    attn_hidden: Vec<Vec<f64>>,
    head_hidden: Vec<f64>,
    pub(crate) output: BagOutput,
}

/// Attention weights `softmax_i(wᵀ tanh(V h_i))`.
pub fn attention_scores(features: &[Vec<f64>], v: &Mat64, w: &[f64]) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Err(Error::contract("attention over an empty bag"));
    }
    if w.len() != v.rows() {
        return Err(Error::shape(
            "attention_scores",
            format!("V {}", v.shape_str()),
            format!("w len {}", w.len()),
        ));
    }
    for h in features {
        if h.len() != v.cols() {
            return Err(Error::shape(
                "attention_scores",
                format!("V {}", v.shape_str()),
                format!("h len {}", h.len()),
            ));
        }
    }
    let scores: Vec<f64> = features
        .iter()
        .map(|h| {
            let mut t = v.mul_vec(h);
            tanh_inplace(&mut t);
            math::dot(w, &t)
        })
        .collect();
    math::softmax(&scores)
}

/// Attention pooling `z = Σ α_k h_k`.
pub fn pool(features: &[Vec<f64>], attentions: &[f64]) -> Result<Vec<f64>> {
    if features.len() != attentions.len() || features.is_empty() {
        return Err(Error::contract(format!(
            "pool: {} features vs {} attentions",
            features.len(),
            attentions.len()
        )));
    }
    let total: f64 = attentions.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!(
            "pool: attentions sum to {total}, expected 1"
        )));
    }
    let d = features[0].len();
    let mut z = vec![0.0; d];
    for (h, &a) in features.iter().zip(attentions) {
        if h.len() != d {
            return Err(Error::shape(
                "pool",
                format!("feature dim {d}"),
                format!("feature dim {}", h.len()),
            ));
        }
        for (zk, hk) in z.iter_mut().zip(h) {
            *zk += a * hk;
        }
    }
    Ok(z)
}

/// The attention-MIL network and the ordered list of classes its head covers.
#[derive(Clone, Debug, PartialEq)]
pub struct MilModel {
    config: ModelConfig,
    pub psi1: Dense,
    pub psi2: Dense,
    /// Attention projection `V` (D × d).
    pub attn_v: Mat64,
    /// Attention vector `w` (D).
    pub attn_w: Vec<f64>,
    pub head1: Dense,
    pub head2: Dense,
    class_ids: Vec<usize>,
}

const NEW_ROW_STD: f64 = 0.01;

impl MilModel {
    /// Seeded initialization with a head over `classes` (may be empty).
    pub fn new(config: ModelConfig, classes: &[usize], seed: u64) -> Result<Self> {
        if config.d_in == 0
            || config.feature_dim == 0
            || config.attention_dim == 0
            || config.head_hidden == 0
        {
            return Err(Error::contract(format!(
                "model dimensions must be positive: {config:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi1 = Dense::init(&mut rng, config.d_in, config.feature_dim);
        let psi2 = Dense::init(&mut rng, config.feature_dim, config.feature_dim);
        let attn = Dense::init(&mut rng, config.feature_dim, config.attention_dim);
        let attn_w = Dense::init(&mut rng, config.attention_dim, 1)
            .weight
            .as_slice()
            .to_vec();
        let head1 = Dense::init(&mut rng, config.feature_dim, config.head_hidden);
        let mut model = Self {
            config,
            psi1,
            psi2,
            attn_v: attn.weight,
            attn_w,
            head1,
            head2: Dense {
                weight: Mat64::zeros(0, config.head_hidden),
                bias: Vec::new(),
            },
            class_ids: Vec::new(),
        };
        model.expand_head(classes, seed ^ 0x9e37_79b9_7f4a_7c15)?;
        Ok(model)
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Logit index of a dataset class id.
    pub fn class_index(&self, class_id: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    /// Appends one head row per new class. Existing parameters are untouched;
    /// new weights are drawn from N(0, 0.01²) and new biases are zero.
    pub fn expand_head(&mut self, new_classes: &[usize], seed: u64) -> Result<()> {
        for (i, c) in new_classes.iter().enumerate() {
            if self.class_ids.contains(c) || new_classes[..i].contains(c) {
                return Err(Error::contract(format!(
                    "class {c} is already covered by the head"
                )));
            }
        }
        if new_classes.is_empty() {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, NEW_ROW_STD).expect("valid std");
        let fresh: Vec<f64> = (0..new_classes.len() * self.config.head_hidden)
            .map(|_| normal.sample(&mut rng))
            .collect();
        self.head2.weight.push_rows(&fresh);
        self.head2
            .bias
            .extend(std::iter::repeat_n(0.0, new_classes.len()));
        self.class_ids.extend_from_slice(new_classes);
        Ok(())
    }

    fn check_input(&self, bag: &Bag) -> Result<()> {
        if bag.instances.is_empty() {
            return Err(Error::contract(format!(
                "bag {} has no instances",
                bag.bag_id
            )));
        }
        for x in &bag.instances {
            if x.len() != self.config.d_in {
                return Err(Error::shape(
                    "forward",
                    format!("model d_in {}", self.config.d_in),
                    format!("bag {} instance dim {}", bag.bag_id, x.len()),
                ));
            }
        }
        Ok(())
    }

    /// Feature transform `h = tanh(W2 tanh(W1 x + b1) + b2)` for one instance.
    pub fn instance_feature(&self, x: &[f64]) -> Vec<f64> {
        let mut u = self.psi1.apply(x);
        tanh_inplace(&mut u);
        let mut h = self.psi2.apply(&u);
        tanh_inplace(&mut h);
        h
    }

    pub fn forward(&self, bag: &Bag) -> Result<BagOutput> {
        Ok(self.forward_trace(bag)?.output)
    }

    /// Logits only; convenience for evaluation.
    pub fn logits(&self, bag: &Bag) -> Result<Vec<f64>> {
        Ok(self.forward(bag)?.logits)
    }

    /// Index of the highest logit (first one on ties).
    pub fn predict_index(&self, bag: &Bag) -> Result<usize> {
        let logits = self.logits(bag)?;
        let mut best = 0;
        for (k, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = k;
            }
        }
        Ok(best)
    }

    pub(crate) fn forward_trace(&self, bag: &Bag) -> Result<ForwardTrace> {
        self.check_input(bag)?;
        let n = bag.instances.len();
        let mut psi_hidden = Vec::with_capacity(n);
        let mut features = Vec::with_capacity(n);
        let mut attn_hidden = Vec::with_capacity(n);
        let mut scores = Vec::with_capacity(n);
        for x in &bag.instances {
            let mut u = self.psi1.apply(x);
            tanh_inplace(&mut u);
            let mut h = self.psi2.apply(&u);
            tanh_inplace(&mut h);
            let mut t = self.attn_v.mul_vec(&h);
            tanh_inplace(&mut t);
            scores.push(math::dot(&self.attn_w, &t));
            psi_hidden.push(u);
            features.push(h);
            attn_hidden.push(t);
        }
        let attentions = math::softmax(&scores)?;
        let mut z = vec![0.0; self.config.feature_dim];
        for (h, &a) in features.iter().zip(&attentions) {
            for (zk, hk) in z.iter_mut().zip(h) {
                *zk += a * hk;
            }
        }
        let mut head_hidden = self.head1.apply(&z);
        tanh_inplace(&mut head_hidden);
        let logits = self.head2.apply(&head_hidden);
        Ok(ForwardTrace {
            psi_hidden,
            attn_hidden,
            head_hidden,
            output: BagOutput {
                logits,
                attentions,
                bag_feature: z,
                instance_features: features,
            },
        })
    }

    /// Parameter gradients given `∂L/∂logits` for the traced bag.
    pub(crate) fn backward(
        &self,
        bag: &Bag,
        trace: &ForwardTrace,
        grad_logits: &[f64],
    ) -> Gradients {
        let mut grads = self.zero_gradients();
        let [g_p1w, g_p1b, g_p2w, g_p2b, g_v, g_w, g_h1w, g_h1b, g_h2w, g_h2b] =
            &mut grads.tensors[..]
        else {
            unreachable!("model has ten tensors");
        };
        let out = &trace.output;

        // classifier head
        let g_u = self
            .head2
            .backward(&trace.head_hidden, grad_logits, g_h2w, g_h2b);
        let g_a1: Vec<f64> = g_u
            .iter()
            .zip(&trace.head_hidden)
            .map(|(g, u)| g * (1.0 - u * u))
            .collect();
        let g_z = self.head1.backward(&out.bag_feature, &g_a1, g_h1w, g_h1b);

        // pooling: z = Σ α_k h_k
        let g_alpha: Vec<f64> = out
            .instance_features
            .iter()
            .map(|h| math::dot(&g_z, h))
            .collect();
        let mean_g: f64 = out
            .attentions
            .iter()
            .zip(&g_alpha)
            .map(|(a, g)| a * g)
            .sum();

        let d = self.config.feature_dim;
        for (k, x) in bag.instances.iter().enumerate() {
            let alpha = out.attentions[k];
            let h = &out.instance_features[k];
            let t = &trace.attn_hidden[k];

            // softmax Jacobian
            let g_score = alpha * (g_alpha[k] - mean_g);
            let mut g_h: Vec<f64> = g_z.iter().map(|g| alpha * g).collect();

            // score = wᵀ tanh(V h)
            for (gw, tj) in g_w.iter_mut().zip(t) {
                *gw += g_score * tj;
            }
            let g_pre: Vec<f64> = self
                .attn_w
                .iter()
                .zip(t)
                .map(|(w, tj)| g_score * w * (1.0 - tj * tj))
                .collect();
            for (r, &gp) in g_pre.iter().enumerate() {
                if gp == 0.0 {
                    continue;
                }
                for (gv, &hc) in g_v[r * d..(r + 1) * d].iter_mut().zip(h) {
                    *gv += gp * hc;
                }
            }
            for (gh, back) in g_h.iter_mut().zip(self.attn_v.mul_vec_t(&g_pre)) {
                *gh += back;
            }

            // h = tanh(W2 u + b2), u = tanh(W1 x + b1)
            let g_a2: Vec<f64> = g_h
                .iter()
                .zip(h)
                .map(|(g, hv)| g * (1.0 - hv * hv))
                .collect();
            let u = &trace.psi_hidden[k];
            let g_u = self.psi2.backward(u, &g_a2, g_p2w, g_p2b);
            let g_a1: Vec<f64> = g_u
                .iter()
                .zip(u)
                .map(|(g, uv)| g * (1.0 - uv * uv))
                .collect();
            self.psi1.backward(x, &g_a1, g_p1w, g_p1b);
        }
        grads
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Serializes to the `CML1` checkpoint container.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let c = self.config;
        let mut out = Vec::with_capacity(64 + 8 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            c.d_in,
            c.feature_dim,
            c.attention_dim,
            c.head_hidden,
            self.class_ids.len(),
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for &id in &self.class_ids {
            out.extend_from_slice(&(id as u64).to_le_bytes());
        }
        for t in self.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(
                "offset 0",
                "bad checkpoint magic, expected CML1",
            ));
        }
        let config = ModelConfig {
            d_in: r.count()?,
            feature_dim: r.count()?,
            attention_dim: r.count()?,
            head_hidden: r.count()?,
        };
        let n_classes = r.count()?;
        let class_ids = (0..n_classes)
            .map(|_| r.count())
            .collect::<Result<Vec<_>>>()?;
        let mut model = MilModel::new(config, &[], 0)
            .map_err(|e| Error::format("offset 4", format!("invalid header: {e}")))?;
        model
            .expand_head(&class_ids, 0)
            .map_err(|e| Error::format("header", e.to_string()))?;
        for t in model.tensors_mut() {
            for v in t.iter_mut() {
                *v = r.f64()?;
            }
        }
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read(path)?)
    }
}

impl ParamSet for MilModel {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.psi1.weight.as_slice(),
            &self.psi1.bias,
            self.psi2.weight.as_slice(),
            &self.psi2.bias,
            self.attn_v.as_slice(),
            &self.attn_w,
            self.head1.weight.as_slice(),
            &self.head1.bias,
            self.head2.weight.as_slice(),
            &self.head2.bias,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.psi1.weight.as_mut_slice(),
            &mut self.psi1.bias,
            self.psi2.weight.as_mut_slice(),
            &mut self.psi2.bias,
            self.attn_v.as_mut_slice(),
            &mut self.attn_w,
            self.head1.weight.as_mut_slice(),
            &mut self.head1.bias,
            self.head2.weight.as_mut_slice(),
            &mut self.head2.bias,
        ]
    }
}

pub(crate) const CHECKPOINT_MAGIC: &[u8; 4] = b"CML1";

/// Little-endian cursor that reports the failing offset.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    format!("offset {}", self.pos),
                    format!(
                        "truncated input: need {n} bytes, {} left",
                        self.bytes.len() - self.pos
                    ),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    /// A u64 that must fit in memory-sized counts.
    pub(crate) fn count(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        if v > (self.bytes.len() as u64).max(1 << 20) {
            return Err(Error::format(
                format!("offset {at}"),
                format!("implausible count {v}"),
            ));
        }
        Ok(v as usize)
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                format!("offset {}", self.pos),
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}
