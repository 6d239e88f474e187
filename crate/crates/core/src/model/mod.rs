//! Compact CNN classifier with hand-written reverse-mode gradients.

use std::fmt;

use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};

use crate::config::{KvConfig, KvWriter};
use crate::corpus::rng_for;
use crate::error::{Error, Result};

mod checkpoint;
pub mod layers;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, load_state, save_state, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::{backward, forward, forward_batch, predict_many, predict_window, stack_inputs, Gradients, Pass, Tape};
pub use train::{train, EpochRecord, Sample, TrainConfig, TrainReport, ValScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    /// `(1, 1)` disables pooling.
    pub pool: (usize, usize),
    pub batch_norm: bool,
}

impl ConvBlock {
    pub fn new(out_channels: usize) -> Self {
        Self {
            out_channels,
            kernel: (3, 3),
            stride: 1,
            pool: (2, 2),
            batch_norm: true,
        }
    }
}

impl fmt::Display for ConvBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}x{}:{}:{}x{}:{}",
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
            self.stride,
            self.pool.0,
            self.pool.1,
            if self.batch_norm { "bn" } else { "nobn" }
        )
    }
}

impl std::str::FromStr for ConvBlock {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("conv block `{s}`: expected out:KHxKW:stride:PHxPW:bn|nobn"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        if parts.len() != 5 {
            return Err(bad());
        }
        let pair = |p: &str| -> Result<(usize, usize)> {
            let (a, b) = p.split_once('x').ok_or_else(bad)?;
            Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
        };
        Ok(Self {
            out_channels: parts[0].parse().map_err(|_| bad())?,
            kernel: pair(parts[1])?,
            stride: parts[2].parse().map_err(|_| bad())?,
            pool: pair(parts[3])?,
            batch_norm: match parts[4] {
                "bn" => true,
                "nobn" => false,
                _ => return Err(bad()),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub blocks: Vec<ConvBlock>,
    /// Hidden dense width; 0 feeds pooled features straight to the output.
    pub dense_units: usize,
    pub dropout_rate: f64,
    pub input_shape: (usize, usize),
}

impl ModelConfig {
    /// Four blocks of 16, 32, 64, 64 channels, then a 32-unit dense layer.
    pub fn default_for(input_shape: (usize, usize)) -> Self {
        Self {
            blocks: [16, 32, 64, 64].into_iter().map(ConvBlock::new).collect(),
            dense_units: 32,
            dropout_rate: 0.2,
            input_shape,
        }
    }

    /// `(channels, rows, cols)` after each block's activation, before pooling.
    pub fn block_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = self.input_shape;
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            h = layers::conv_out_len(h, b.stride.max(1));
            w = layers::conv_out_len(w, b.stride.max(1));
            out.push((b.out_channels, h, w));
            h /= b.pool.0.max(1);
            w /= b.pool.1.max(1);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("model needs at least one conv block".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        for b in &self.blocks {
            if b.out_channels == 0 || b.kernel.0 == 0 || b.kernel.1 == 0 || b.stride == 0 || b.pool.0 == 0 || b.pool.1 == 0 {
                return Err(Error::Config(format!("conv block {b} has a zero dimension")));
            }
        }
        let (mut h, mut w) = self.input_shape;
        for b in &self.blocks {
            h = layers::conv_out_len(h, b.stride) / b.pool.0;
            w = layers::conv_out_len(w, b.stride) / b.pool.1;
            if h == 0 || w == 0 {
                return Err(Error::Config(format!(
                    "input {:?} shrinks to an empty map at block {b}",
                    self.input_shape
                )));
            }
        }
        Ok(())
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        let blocks: Vec<String> = self.blocks.iter().map(|b| b.to_string()).collect();
        w.put("model.blocks", blocks.join(","))
            .put("model.dense_units", self.dense_units)
            .put("model.dropout", self.dropout_rate)
            .put("model.input_rows", self.input_shape.0)
            .put("model.input_cols", self.input_shape.1);
    }

    /// Reads `model.*` keys, falling back to `self`.
    pub fn read(mut self, kv: &mut KvConfig) -> Result<Self> {
        if let Some(blocks) = kv.get::<String>("model.blocks")? {
            self.blocks = blocks.split(',').map(str::parse).collect::<Result<_>>()?;
        }
        self.dense_units = kv.get_or("model.dense_units", self.dense_units)?;
        self.dropout_rate = kv.get_or("model.dropout", self.dropout_rate)?;
        self.input_shape.0 = kv.get_or("model.input_rows", self.input_shape.0)?;
        self.input_shape.1 = kv.get_or("model.input_cols", self.input_shape.1)?;
        self.validate()?;
        Ok(self)
    }

    fn head_inputs(&self) -> usize {
        self.blocks.last().map_or(1, |b| b.out_channels)
    }
}

/// Ordered named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<ArrayD<f64>>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: ArrayD<f64>) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.index(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    fn as4(&self, name: &str) -> Array4<f64> {
        self.tensor(name).into_dimensionality().expect("rank-4 tensor")
    }

    fn as2(&self, name: &str) -> Array2<f64> {
        self.tensor(name).into_dimensionality().expect("rank-2 tensor")
    }

    fn as1(&self, name: &str) -> Array1<f64> {
        self.tensor(name).into_dimensionality().expect("rank-1 tensor")
    }

    fn tensor(&self, name: &str) -> ArrayD<f64> {
        self.get(name)
            .unwrap_or_else(|| panic!("missing tensor {name}"))
            .clone()
    }
}

pub(crate) fn conv_w(i: usize) -> String {
    format!("block{i}.conv.weight")
}
pub(crate) fn conv_b(i: usize) -> String {
    format!("block{i}.conv.bias")
}
pub(crate) fn bn_gamma(i: usize) -> String {
    format!("block{i}.bn.gamma")
}
pub(crate) fn bn_beta(i: usize) -> String {
    format!("block{i}.bn.beta")
}
pub(crate) fn bn_mean(i: usize) -> String {
    format!("block{i}.bn.running_mean")
}
pub(crate) fn bn_var(i: usize) -> String {
    format!("block{i}.bn.running_var")
}
pub(crate) const HIDDEN_W: &str = "hidden.weight";
pub(crate) const HIDDEN_B: &str = "hidden.bias";
pub(crate) const OUT_W: &str = "out.weight";
pub(crate) const OUT_B: &str = "out.bias";

/// Name of the feature map after block `i`'s activation.
pub fn block_name(i: usize) -> String {
    format!("block{i}")
}

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    /// Trainable tensors.
    pub params: ParamSet,
    /// Batch-norm running statistics.
    pub buffers: ParamSet,
    pub seed: u64,
    /// Bumped on every parameter change; tapes from older versions are stale.
    pub version: u64,
}

impl ModelState {
    /// He-normal weights, zero biases, unit batch-norm scale.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "init");
        let mut he = |shape: &[usize], fan_in: usize| -> ArrayD<f64> {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(&mut rng))
        };
        let mut params = ParamSet::default();
        let mut buffers = ParamSet::default();
        let mut in_ch = 1;
        for (i, b) in config.blocks.iter().enumerate() {
            let fan_in = in_ch * b.kernel.0 * b.kernel.1;
            params.push(conv_w(i), he(&[b.out_channels, in_ch, b.kernel.0, b.kernel.1], fan_in));
            if b.batch_norm {
                params.push(bn_gamma(i), ArrayD::ones(IxDyn(&[b.out_channels])));
                params.push(bn_beta(i), ArrayD::zeros(IxDyn(&[b.out_channels])));
                buffers.push(bn_mean(i), ArrayD::zeros(IxDyn(&[b.out_channels])));
                buffers.push(bn_var(i), ArrayD::ones(IxDyn(&[b.out_channels])));
            } else {
                params.push(conv_b(i), ArrayD::zeros(IxDyn(&[b.out_channels])));
            }
            in_ch = b.out_channels;
        }
        let mut head_in = config.head_inputs();
        if config.dense_units > 0 {
            params.push(HIDDEN_W, he(&[config.dense_units, head_in], head_in));
            params.push(HIDDEN_B, ArrayD::zeros(IxDyn(&[config.dense_units])));
            head_in = config.dense_units;
        }
        params.push(OUT_W, he(&[1, head_in], head_in).mapv(|v| v * 0.5));
        params.push(OUT_B, ArrayD::zeros(IxDyn(&[1])));
        Ok(Self {
            config,
            params,
            buffers,
            seed,
            version: 0,
        })
    }

    /// Every parameter (and running statistic) set to zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut s = Self::init(config, 0)?;
        s.params = s.params.zeros_like();
        s.buffers = s.buffers.zeros_like();
        Ok(s)
    }

    pub fn bump(&mut self) {
        self.version += 1;
    }

    /// Folds a training pass's batch statistics into the running averages.
    pub fn absorb_batch_stats(&mut self, tape: &Tape) {
        for (i, stats) in tape.batch_stats() {
            let (mean, var) = stats;
            let rm = self.buffers.get_mut(&bn_mean(i)).expect("running mean");
            rm.zip_mut_with(&mean.view().into_dyn(), |r, &m| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
            let rv = self.buffers.get_mut(&bn_var(i)).expect("running var");
            rv.zip_mut_with(&var.view().into_dyn(), |r, &v| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v);
        }
    }

    pub fn layer_names(&self) -> Vec<String> {
        (0..self.config.blocks.len()).map(block_name).collect()
    }

    /// The last convolutional block's feature map.
    pub fn default_target_layer(&self) -> String {
        block_name(self.config.blocks.len() - 1)
    }
}
