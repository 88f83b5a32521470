//! The learnable denoiser: a small pre-norm transformer over the `C` codebook
//! positions that scores, for each position, every possible count `0..=M`.
//!
//! Position `j`'s input is a learned embedding of its current count plus a learned
//! positional embedding plus a per-sample conditioning vector (sinusoidal time
//! features through a two-layer MLP, plus a class embedding whose last row is the
//! "no label" embedding used for classifier-free guidance).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::codec::CountVector;
use crate::error::{Error, Result};
use crate::kernels::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub codebook_size: usize,
    pub total: u32,
    /// 0 means unconditional.
    pub num_classes: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub label_drop_prob: f64,
}

impl DenoiserConfig {
    /// Desk-scale defaults: width 64, two layers, four heads.
    pub fn new(codebook_size: usize, total: u32) -> Self {
        Self {
            codebook_size,
            total,
            num_classes: 0,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            mlp_ratio: 4,
            label_drop_prob: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("C", self.codebook_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.total == 0 {
            return Err(Error::InvalidArgument("M must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.embed_dim % 2 != 0 {
            return Err(Error::InvalidArgument("embed_dim must be even".into()));
        }
        if !(0.0..1.0).contains(&self.label_drop_prob) {
            return Err(Error::InvalidArgument(format!(
                "label_drop_prob {} outside [0, 1)",
                self.label_drop_prob
            )));
        }
        Ok(())
    }

    /// Number of count values scored per position.
    pub fn width(&self) -> usize {
        self.total as usize + 1
    }

    /// Ordered parameter names and shapes.
    pub fn parameter_layout(&self) -> Vec<(String, usize, usize)> {
        let d = self.embed_dim;
        let hidden = d * self.mlp_ratio;
        let mut v = vec![
            ("count_embed".to_string(), self.width(), d),
            ("pos_embed".to_string(), self.codebook_size, d),
            ("time_fc1.w".to_string(), d, d),
            ("time_fc1.b".to_string(), 1, d),
            ("time_fc2.w".to_string(), d, d),
            ("time_fc2.b".to_string(), 1, d),
            ("class_embed".to_string(), self.num_classes + 1, d),
        ];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("block{l}.{s}");
            v.extend([
                (p("ln1.g"), 1, d),
                (p("ln1.b"), 1, d),
                (p("qkv.w"), d, 3 * d),
                (p("qkv.b"), 1, 3 * d),
                (p("proj.w"), d, d),
                (p("proj.b"), 1, d),
                (p("ln2.g"), 1, d),
                (p("ln2.b"), 1, d),
                (p("fc1.w"), d, hidden),
                (p("fc1.b"), 1, hidden),
                (p("fc2.w"), hidden, d),
                (p("fc2.b"), 1, d),
            ]);
        }
        v.extend([
            ("final_ln.g".to_string(), 1, d),
            ("final_ln.b".to_string(), 1, d),
            ("head.w".to_string(), d, self.width()),
            ("head.b".to_string(), 1, self.width()),
        ]);
        v
    }
}

/// Named tensors in a fixed order; shapes never change after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn zeros_like_layout(layout: &[(String, usize, usize)]) -> Self {
        Self {
            names: layout.iter().map(|(n, _, _)| n.clone()).collect(),
            tensors: layout.iter().map(|&(_, r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<S>>) -> Self {
        assert_eq!(names.len(), tensors.len());
        Self { names, tensors }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.rows, t.cols))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn l2_norm(&self) -> S {
        self.tensors.iter().map(Tensor::sum_sq).sum::<S>().sqrt()
    }

    pub fn same_shapes(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn cast<T: Scalar>(&self) -> ParameterStore<T> {
        ParameterStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Per-position scores over count values; row-major `C x (M+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserLogits {
    pub codebook_size: usize,
    pub width: usize,
    pub grid: Vec<f64>,
}

impl DenoiserLogits {
    pub fn row(&self, j: usize) -> &[f64] {
        &self.grid[j * self.width..(j + 1) * self.width]
    }

    pub fn is_finite(&self) -> bool {
        self.grid.iter().all(|v| v.is_finite())
    }
}

/// One element of a denoiser batch.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    /// Per-position counts, each in `0..=M`; the sum is not required to be `M`.
    pub counts: &'a [u32],
    pub t: f64,
    /// `None` selects the learned "no label" embedding.
    pub class_label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<S> {
    pub config: DenoiserConfig,
    pub params: ParameterStore<S>,
}

const TIME_SCALE: f64 = 1000.0;
const INIT_STD: f64 = 0.02;

/// `[sin(1000 t w_k), cos(1000 t w_k)]` with geometrically spaced frequencies.
pub fn time_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = TIME_SCALE * t * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

impl<S: Scalar> Denoiser<S> {
    /// Gaussian(0, 0.02) weights and embeddings, zero biases, unit layer-norm gains.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        let mut params = ParameterStore::zeros_like_layout(&layout);
        let mut rng = RngStream::new(seed, 0x1a17);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for (name, tensor) in params.names.iter().zip(params.tensors.iter_mut()) {
            if name.ends_with(".g") {
                tensor.data.fill(S::one());
            } else if name.ends_with(".b") {
                continue;
            } else {
                for v in tensor.data.iter_mut() {
                    *v = S::of(normal.sample(&mut rng));
                }
            }
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: DenoiserConfig, params: ParameterStore<S>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        let expected = ParameterStore::<S>::zeros_like_layout(&layout);
        if !expected.same_shapes(&params) {
            return Err(Error::Shape("parameter layout does not match config".into()));
        }
        Ok(Self { config, params })
    }

    fn check_input(&self, input: &DenoiserInput<'_>) -> Result<()> {
        let cfg = &self.config;
        if input.counts.len() != cfg.codebook_size {
            return Err(Error::Shape(format!(
                "input has {} positions, model expects C = {}",
                input.counts.len(),
                cfg.codebook_size
            )));
        }
        if let Some(&v) = input.counts.iter().find(|&&v| v > cfg.total) {
            return Err(Error::Constraint(format!("count {v} exceeds M = {}", cfg.total)));
        }
        if !(0.0..=1.0).contains(&input.t) {
            return Err(Error::InvalidArgument(format!("t = {} outside [0, 1]", input.t)));
        }
        if let Some(c) = input.class_label {
            if c >= cfg.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "class {c} out of range for {} classes",
                    cfg.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Records the batched forward pass on `tape`; returns the `(B*C) x (M+1)` logits node.
    pub fn forward_on_tape(&self, tape: &mut Tape<S>, batch: &[DenoiserInput<'_>]) -> Result<Var> {
        for input in batch {
            self.check_input(input)?;
        }
        let cfg = &self.config;
        let (b, c, d) = (batch.len(), cfg.codebook_size, cfg.embed_dim);
        let p: Vec<Var> = self
            .params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(i, t.clone()))
            .collect();
        let mut slot = 0usize;
        let mut next = || {
            slot += 1;
            p[slot - 1]
        };
        let (count_embed, pos_embed) = (next(), next());
        let (t1w, t1b, t2w, t2b) = (next(), next(), next(), next());
        let class_embed = next();

        let idx: Vec<usize> = batch
            .iter()
            .flat_map(|x| x.counts.iter().map(|&v| v as usize))
            .collect();
        let mut h = tape.embed(count_embed, idx);
        let pos = tape.tile(pos_embed, b);
        h = tape.add(h, pos);

        let feats: Vec<S> = batch
            .iter()
            .flat_map(|x| time_features(x.t, d))
            .map(S::of)
            .collect();
        let feats = tape.input(Tensor::from_vec(b, d, feats));
        let temb = tape.linear(feats, t1w, t1b);
        let temb = tape.silu(temb);
        let temb = tape.linear(temb, t2w, t2b);
        let labels: Vec<usize> = batch
            .iter()
            .map(|x| x.class_label.unwrap_or(cfg.num_classes))
            .collect();
        let cemb = tape.embed(class_embed, labels);
        let cond = tape.add(temb, cemb);
        let cond = tape.repeat(cond, c);
        h = tape.add(h, cond);

        for _ in 0..cfg.num_layers {
            let (ln1g, ln1b, qkvw, qkvb, projw, projb) = (next(), next(), next(), next(), next(), next());
            let (ln2g, ln2b, fc1w, fc1b, fc2w, fc2b) = (next(), next(), next(), next(), next(), next());
            let a = tape.layer_norm(h, ln1g, ln1b);
            let a = tape.linear(a, qkvw, qkvb);
            let a = tape.attention(a, b, c, cfg.num_heads);
            let a = tape.linear(a, projw, projb);
            h = tape.add(h, a);
            let m = tape.layer_norm(h, ln2g, ln2b);
            let m = tape.linear(m, fc1w, fc1b);
            let m = tape.gelu(m);
            let m = tape.linear(m, fc2w, fc2b);
            h = tape.add(h, m);
        }
        let (lnfg, lnfb, headw, headb) = (next(), next(), next(), next());
        h = tape.layer_norm(h, lnfg, lnfb);
        Ok(tape.linear(h, headw, headb))
    }

    /// Logits for every element of `batch`.
    pub fn forward_batch(&self, batch: &[DenoiserInput<'_>]) -> Result<Vec<DenoiserLogits>> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, batch)?;
        let v = tape.value(out);
        let (c, w) = (self.config.codebook_size, self.config.width());
        Ok((0..batch.len())
            .map(|i| DenoiserLogits {
                codebook_size: c,
                width: w,
                grid: v.data[i * c * w..(i + 1) * c * w]
                    .iter()
                    .map(|s| s.to_f64_lossy())
                    .collect(),
            })
            .collect())
    }

    pub fn forward(&self, x_t: &CountVector, t: f64, class_label: Option<usize>) -> Result<DenoiserLogits> {
        self.check_vector(x_t)?;
        let input = DenoiserInput {
            counts: x_t.counts(),
            t,
            class_label,
        };
        Ok(self.forward_batch(&[input])?.remove(0))
    }

    fn check_vector(&self, x: &CountVector) -> Result<()> {
        if x.codebook_size() != self.config.codebook_size || x.total() != self.config.total {
            return Err(Error::Shape(format!(
                "vector has (C, M) = ({}, {}), model expects ({}, {})",
                x.codebook_size(),
                x.total(),
                self.config.codebook_size,
                self.config.total
            )));
        }
        Ok(())
    }

    /// Mean cross-entropy over all positions of the batch, and its gradient.
    pub fn loss_and_grad(
        &self,
        batch: &[DenoiserInput<'_>],
        targets: &[&CountVector],
    ) -> Result<(S, ParameterStore<S>)> {
        let (tape, loss) = self.loss_tape(batch, targets)?;
        let mut grads = self.params.zeros_like();
        for (slot, g) in tape.backward(loss) {
            grads.tensors[slot].add_assign(&g);
        }
        Ok((tape.value(loss).data[0], grads))
    }

    pub fn loss(&self, batch: &[DenoiserInput<'_>], targets: &[&CountVector]) -> Result<S> {
        let (tape, loss) = self.loss_tape(batch, targets)?;
        Ok(tape.value(loss).data[0])
    }

    fn loss_tape(&self, batch: &[DenoiserInput<'_>], targets: &[&CountVector]) -> Result<(Tape<S>, Var)> {
        if batch.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} targets",
                batch.len(),
                targets.len()
            )));
        }
        for x0 in targets {
            self.check_vector(x0)?;
        }
        let mut tape = Tape::new();
        let logits = self.forward_on_tape(&mut tape, batch)?;
        let idx = targets
            .iter()
            .flat_map(|x| x.counts().iter().map(|&v| v as usize))
            .collect();
        let loss = tape.cross_entropy(logits, idx);
        Ok((tape, loss))
    }

    /// Exact gradient of the single-example loss with respect to every parameter.
    pub fn backward(
        &self,
        x_t: &CountVector,
        t: f64,
        class_label: Option<usize>,
        x0: &CountVector,
    ) -> Result<ParameterStore<S>> {
        self.check_vector(x_t)?;
        let input = DenoiserInput {
            counts: x_t.counts(),
            t,
            class_label,
        };
        Ok(self.loss_and_grad(&[input], &[x0])?.1)
    }

    /// Replaces the class label by the null label with probability `label_drop_prob`.
    pub fn drop_label<R: Rng + ?Sized>(&self, label: Option<usize>, rng: &mut R) -> Option<usize> {
        let label = label?;
        if self.config.num_classes == 0 {
            return None;
        }
        let u: f64 = rng.random();
        if u < self.config.label_drop_prob {
            None
        } else {
            Some(label)
        }
    }
}

/// Mean over positions of `-log softmax(logits[j])[x0[j]]`.
pub fn cross_entropy_loss(logits: &DenoiserLogits, x0: &CountVector) -> Result<f64> {
    if x0.codebook_size() != logits.codebook_size || x0.total() as usize + 1 != logits.width {
        return Err(Error::Shape("logits and target disagree on (C, M)".into()));
    }
    let mut total = 0.0;
    for j in 0..logits.codebook_size {
        let row = logits.row(j);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        total += log_z - row[x0[j] as usize];
    }
    Ok(total / logits.codebook_size as f64)
}
