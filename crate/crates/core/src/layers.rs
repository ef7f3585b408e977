//! Temporal convolution layers and the two modality branches.
//!
//! Sequences travel through the network as `[batch, time, features]`
//! tensors. Both branches use kernel 3 with one step of zero padding on each
//! side, so convolutions preserve length and only max pooling shortens the
//! audio sequence.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{Forward, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{NormAxes, Var};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;
/// Layer normalization floor; small enough that `layernorm(c·x) == layernorm(x)`
/// to ~1e-12 for unit-scale rows.
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Audio,
    Vision,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Vision => "vision",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Audio => Modality::Vision,
            Modality::Vision => Modality::Audio,
        }
    }
}

/// He-normal initialization: gaussian with standard deviation `sqrt(2/fan_in)`.
pub fn he_init(shape: &[usize], fan_in: usize, seed: u64) -> Tensor {
    let std = libm::sqrt(2.0 / fan_in.max(1) as f64);
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gaussian() * std).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("Conv1d::new", "kernel and stride must be at least 1"));
        }
        let seed = store.next_seed();
        let weight = store.add(
            format!("{name}.weight"),
            he_init(&[out_ch, in_ch, kernel], in_ch * kernel, seed),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_ch]), true));
        Ok(Conv1d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        })
    }

    pub fn output_len(&self, n: usize) -> Option<usize> {
        (n + 2 * self.pad)
            .checked_sub(self.kernel)
            .map(|r| r / self.stride + 1)
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let w = f.var(self.weight);
        let y = f.tape.conv1d(x, w, self.stride, self.pad)?;
        match self.bias {
            Some(b) => {
                let b = f.var(b);
                f.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Batch normalization over every axis but the last.
///
/// Training mode normalizes with batch statistics and records updated
/// running statistics on the [`Forward`] context; evaluation mode is the
/// fixed affine map given by the running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm1d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros([channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones([channels]), false),
            channels,
            momentum: BN_MOMENTUM,
            eps: NORM_EPS,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let s = f.tape.shape(x);
        if s.last() != Some(&self.channels) {
            return Err(Error::shape("batchnorm1d", s, &[self.channels]));
        }
        let normalized = if f.is_train() {
            let (xhat, m) = f.tape.standardize(x, NormAxes::Channels, self.eps)?;
            // running variance tracks the unbiased estimate
            let unbias = if m.count > 1 {
                m.count as f64 / (m.count - 1) as f64
            } else {
                1.0
            };
            let mom = self.momentum;
            let rm = f.value(self.running_mean).data();
            let rv = f.value(self.running_var).data();
            let new_mean: Vec<f64> = rm
                .iter()
                .zip(&m.mean)
                .map(|(r, b)| (1.0 - mom) * r + mom * b)
                .collect();
            let new_var: Vec<f64> = rv
                .iter()
                .zip(&m.var)
                .map(|(r, b)| (1.0 - mom) * r + mom * b * unbias)
                .collect();
            f.push_update(self.running_mean, Tensor::vector(&new_mean));
            f.push_update(self.running_var, Tensor::vector(&new_var));
            xhat
        } else {
            let mean = f.value(self.running_mean).clone();
            let inv: Vec<f64> = f
                .value(self.running_var)
                .data()
                .iter()
                .map(|v| 1.0 / libm::sqrt(v.max(0.0) + self.eps))
                .collect();
            let mean = f.tape.constant(mean);
            let inv = f.tape.constant(Tensor::vector(&inv));
            let centered = f.tape.sub(x, mean)?;
            f.tape.mul(centered, inv)?
        };
        let (g, b) = (f.var(self.gamma), f.var(self.beta));
        let y = f.tape.mul(normalized, g)?;
        f.tape.add(y, b)
    }
}

/// Affine map over the last axis: `x·W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let seed = store.next_seed();
        let weight = store.add(
            format!("{name}.weight"),
            he_init(&[in_dim, out_dim], in_dim, seed),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_dim]), true));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let s = f.tape.shape(x).to_vec();
        if s.last() != Some(&self.in_dim) {
            return Err(Error::shape("linear", &s, &[self.in_dim, self.out_dim]));
        }
        // matmul wants at least two axes
        let (x2, restore) = if s.len() == 1 {
            (f.tape.reshape(x, &[1, self.in_dim])?, true)
        } else {
            (x, false)
        };
        let w = f.var(self.weight);
        let mut y = f.tape.matmul(x2, w)?;
        if let Some(b) = self.bias {
            let b = f.var(b);
            y = f.tape.add(y, b)?;
        }
        if restore {
            y = f.tape.reshape(y, &[self.out_dim])?;
        }
        Ok(y)
    }
}

/// Per-row normalization over the feature axis followed by an affine map.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([dim]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim]), true),
            dim,
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let s = f.tape.shape(x);
        if s.last() != Some(&self.dim) {
            return Err(Error::shape("layernorm", s, &[self.dim]));
        }
        let (xhat, _) = f.tape.standardize(x, NormAxes::Rows, self.eps)?;
        let (g, b) = (f.var(self.gamma), f.var(self.beta));
        let y = f.tape.mul(xhat, g)?;
        f.tape.add(y, b)
    }
}

/// Non-overlapping temporal max pooling of `[B, N, C]`.
pub fn maxpool1d(f: &mut Forward, x: Var, k: usize) -> Result<Var> {
    f.tape.maxpool1d(x, k)
}

/// Mean over the temporal axis: `[B, N, C]` to `[B, C]`.
pub fn global_avg_pool(f: &mut Forward, x: Var) -> Result<Var> {
    let s = f.tape.shape(x);
    if s.len() != 3 {
        return Err(Error::shape("global_avg_pool", s, &[]));
    }
    f.tape.mean_axis(x, 1)
}

/// Conv1d + BatchNorm1d + ReLU, optionally followed by max pooling.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv1d,
    pub bn: BatchNorm1d,
    pub pool: Option<usize>,
}

impl ConvBlock {
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        let y = f.tape.relu(y);
        match self.pool {
            Some(k) => maxpool1d(f, y, k),
            None => Ok(y),
        }
    }
}

/// Channel layout of one modality branch: two stages of two blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchConfig {
    pub modality: Modality,
    pub input_dim: usize,
    pub stage1: [usize; 2],
    pub stage2: [usize; 2],
    /// Max-pool window applied after every block, if any.
    pub pool: Option<usize>,
    pub kernel: usize,
    pub pad: usize,
    pub conv_bias: bool,
}

impl BranchConfig {
    /// Vision: 64, 64 | 128, 128 with length-preserving convolutions.
    pub fn vision(input_dim: usize) -> Self {
        BranchConfig {
            modality: Modality::Vision,
            input_dim,
            stage1: [64, 64],
            stage2: [128, 128],
            pool: None,
            kernel: 3,
            pad: 1,
            conv_bias: false,
        }
    }

    /// Audio: 64, 128 | 256, 128 with a window-2 max pool after each block.
    pub fn audio(input_dim: usize) -> Self {
        BranchConfig {
            modality: Modality::Audio,
            input_dim,
            stage1: [64, 128],
            stage2: [256, 128],
            pool: Some(2),
            kernel: 3,
            pad: 1,
            conv_bias: false,
        }
    }

    pub fn stage1_channels(&self) -> usize {
        self.stage1[1]
    }

    pub fn stage2_channels(&self) -> usize {
        self.stage2[1]
    }

    /// Temporal length after each stage for an input of length `n`, or
    /// `None` if the sequence is too short for the pooling.
    pub fn stage_lengths(&self, n: usize) -> Option<(usize, usize)> {
        let step = |len: usize| -> Option<usize> {
            let conv = (len + 2 * self.pad).checked_sub(self.kernel)? + 1;
            match self.pool {
                Some(k) if conv < k => None,
                Some(k) => Some(conv / k),
                None => Some(conv),
            }
        };
        let s1 = step(step(n)?)?;
        let s2 = step(step(s1)?)?;
        Some((s1, s2))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    First,
    Second,
    Both,
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub config: BranchConfig,
    pub stage1: Vec<ConvBlock>,
    pub stage2: Vec<ConvBlock>,
}

impl Branch {
    pub fn new(store: &mut ParamStore, name: &str, config: BranchConfig) -> Result<Self> {
        let mut in_ch = config.input_dim;
        let mut build = |stage: usize, chans: [usize; 2], store: &mut ParamStore| -> Result<Vec<ConvBlock>> {
            let mut blocks = Vec::new();
            for (i, &out) in chans.iter().enumerate() {
                let prefix = format!("{name}.stage{stage}.block{i}");
                let conv = Conv1d::new(
                    store,
                    &format!("{prefix}.conv"),
                    in_ch,
                    out,
                    config.kernel,
                    1,
                    config.pad,
                    config.conv_bias,
                )?;
                let bn = BatchNorm1d::new(store, &format!("{prefix}.bn"), out);
                blocks.push(ConvBlock {
                    conv,
                    bn,
                    pool: config.pool,
                });
                in_ch = out;
            }
            Ok(blocks)
        };
        let stage1 = build(1, config.stage1, store)?;
        let stage2 = build(2, config.stage2, store)?;
        Ok(Branch {
            config,
            stage1,
            stage2,
        })
    }

    /// Runs the requested stage(s). For [`Stage::Second`] the input must be
    /// a stage-1 output; [`Stage::Both`] returns the stage-2 output.
    pub fn forward(&self, f: &mut Forward, x: Var, stage: Stage) -> Result<Var> {
        let blocks: Vec<&ConvBlock> = match stage {
            Stage::First => self.stage1.iter().collect(),
            Stage::Second => self.stage2.iter().collect(),
            Stage::Both => self.stage1.iter().chain(&self.stage2).collect(),
        };
        let expected = match stage {
            Stage::First | Stage::Both => self.config.input_dim,
            Stage::Second => self.config.stage1_channels(),
        };
        let s = f.tape.shape(x);
        if s.len() != 3 || s[2] != expected {
            return Err(Error::shape(
                match self.config.modality {
                    Modality::Audio => "audio branch",
                    Modality::Vision => "vision branch",
                },
                s,
                &[expected],
            ));
        }
        let mut y = x;
        for b in blocks {
            y = b.forward(f, y)?;
        }
        Ok(y)
    }

    /// Stage-1 and stage-2 outputs in one pass.
    pub fn forward_stages(&self, f: &mut Forward, x: Var) -> Result<(Var, Var)> {
        let s1 = self.forward(f, x, Stage::First)?;
        let s2 = self.forward(f, s1, Stage::Second)?;
        Ok((s1, s2))
    }
}

/// Plain-loop oracle for [`Tape::conv1d`](crate::Tape::conv1d), used in tests.
#[doc(hidden)]
pub fn conv1d_direct(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, n, c_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let n_out = (n + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * n_out * c_out];
    for bi in 0..b {
        for t in 0..n_out {
            for o in 0..c_out {
                let mut acc = 0.0;
                for j in 0..k {
                    let pos = (t * stride + j) as isize - pad as isize;
                    if pos < 0 || pos as usize >= n {
                        continue;
                    }
                    for c in 0..c_in {
                        acc += w.data()[(o * c_in + c) * k + j] * x.data()[(bi * n + pos as usize) * c_in + c];
                    }
                }
                out[(bi * n_out + t) * c_out + o] = acc;
            }
        }
    }
    Tensor::new([b, n_out, c_out], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_inputs;
    use crate::tape::Tape;
    use crate::tensor::Fill;

    fn eval_forward<T>(store: &ParamStore, train: bool, f: impl FnOnce(&mut Forward) -> T) -> T {
        let mut tape = Tape::new();
        let mut fw = Forward::new(&mut tape, store, train, false);
        f(&mut fw)
    }

    #[test]
    fn conv_matches_direct_oracle() {
        for seed in 0..20u64 {
            let mut r = Rng::new(seed);
            let (b, n, ci, co, k) = (1 + r.below(3), 1 + r.below(8), 1 + r.below(4), 1 + r.below(4), 1 + r.below(3));
            let (s, p) = (1 + r.below(2), r.below(2));
            if n + 2 * p < k {
                continue;
            }
            let x = Tensor::make([b, n, ci], Fill::Gaussian, seed * 2);
            let w = Tensor::make([co, ci, k], Fill::Gaussian, seed * 2 + 1);
            let mut tape = Tape::new();
            let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
            let y = tape.conv1d(xv, wv, s, p).unwrap();
            assert!(tape.value(y).max_abs_diff(&conv1d_direct(&x, &w, s, p)) < 1e-12);
        }
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let mut store = ParamStore::new(1);
        let conv = Conv1d::new(&mut store, "c", 2, 3, 3, 1, 1, true).unwrap();
        store.set("c.bias", Tensor::vector(&[1.0, 2.0, 3.0])).unwrap();
        let out = eval_forward(&store, false, |f| {
            let x = f.tape.constant(Tensor::zeros([1, 4, 2]));
            let y = conv.forward(f, x).unwrap();
            f.tape.value(y).clone()
        });
        assert_eq!(out.data(), [1.0, 2.0, 3.0].repeat(4).as_slice());
    }

    #[test]
    fn conv_output_length_formula() {
        let mut store = ParamStore::new(1);
        let conv = Conv1d::new(&mut store, "c", 1, 1, 3, 2, 0, false).unwrap();
        assert_eq!(conv.output_len(7), Some(3));
        assert_eq!(conv.output_len(2), None);
        assert!(Conv1d::new(&mut store, "z", 1, 1, 0, 1, 0, false).is_err());
    }

    #[test]
    fn conv_channel_mismatch_is_an_error() {
        let mut store = ParamStore::new(1);
        let conv = Conv1d::new(&mut store, "c", 35, 64, 3, 1, 1, false).unwrap();
        eval_forward(&store, false, |f| {
            let x = f.tape.constant(Tensor::zeros([1, 15, 34]));
            assert!(conv.forward(f, x).is_err());
        });
    }

    #[test]
    fn batchnorm_constant_channel_and_shift() {
        let mut store = ParamStore::new(1);
        let bn = BatchNorm1d::new(&mut store, "bn", 1);
        let out = eval_forward(&store, true, |f| {
            let x = f.tape.constant(Tensor::full([1, 3, 1], 2.0));
            let y = bn.forward(f, x).unwrap();
            f.tape.value(y).clone()
        });
        assert!(out.data().iter().all(|v| v.abs() < 1e-12));

        store.set("bn.beta", Tensor::vector(&[5.0])).unwrap();
        let out = eval_forward(&store, true, |f| {
            let x = f.tape.constant(Tensor::new([1, 4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap());
            let y = bn.forward(f, x).unwrap();
            f.tape.value(y).clone()
        });
        assert!((out.sum() / 4.0 - 5.0).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_eval_identity_statistics_and_determinism() {
        let mut store = ParamStore::new(1);
        let bn = BatchNorm1d::new(&mut store, "bn", 2);
        store.set("bn.gamma", Tensor::vector(&[2.0, -1.0])).unwrap();
        store.set("bn.beta", Tensor::vector(&[0.5, 0.25])).unwrap();
        let x = Tensor::make([3, 4, 2], Fill::Gaussian, 9);
        let run = || {
            eval_forward(&store, false, |f| {
                let xv = f.tape.constant(x.clone());
                let y = bn.forward(f, xv).unwrap();
                f.tape.value(y).clone()
            })
        };
        let a = run();
        assert_eq!(a, run());
        let scale = 1.0 / libm::sqrt(1.0 + NORM_EPS);
        for (i, (&o, &xi)) in a.data().iter().zip(x.data()).enumerate() {
            let (g, b) = if i % 2 == 0 { (2.0, 0.5) } else { (-1.0, 0.25) };
            assert!((o - (g * xi * scale + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_updates_running_stats_in_train_mode() {
        let mut store = ParamStore::new(1);
        let bn = BatchNorm1d::new(&mut store, "bn", 1);
        let updates = {
            let mut tape = Tape::new();
            let mut f = Forward::new(&mut tape, &store, true, false);
            let x = f.tape.constant(Tensor::new([1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
            bn.forward(&mut f, x).unwrap();
            f.into_updates()
        };
        store.apply_updates(updates);
        let rm = store.get(bn.running_mean).data()[0];
        let rv = store.get(bn.running_var).data()[0];
        assert!((rm - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        assert!((rv - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        assert!(rv >= 0.0);
    }

    #[test]
    fn global_avg_pool_examples() {
        let store = ParamStore::new(0);
        eval_forward(&store, false, |f| {
            let x = f.tape.constant(Tensor::new([1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
            let y = global_avg_pool(f, x).unwrap();
            assert_eq!(f.tape.value(y).data(), &[3.0, 5.0]);
            let one = f.tape.constant(Tensor::new([1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
            let y = global_avg_pool(f, one).unwrap();
            assert_eq!(f.tape.value(y).data(), &[1.0, 2.0, 3.0]);
            let z = f.tape.constant(Tensor::zeros([2, 3, 4]));
            let y = global_avg_pool(f, z).unwrap();
            assert_eq!(f.tape.value(y), &Tensor::zeros([2, 4]));
        });
    }

    #[test]
    fn linear_examples() {
        let mut store = ParamStore::new(0);
        let lin = Linear::new(&mut store, "l", 2, 2, true);
        store.set("l.weight", Tensor::identity(2)).unwrap();
        eval_forward(&store, false, |f| {
            let x = f.tape.constant(Tensor::vector(&[3.0, -4.0]));
            let y = lin.forward(f, x).unwrap();
            assert_eq!(f.tape.value(y).data(), &[3.0, -4.0]);
            let bad = f.tape.constant(Tensor::vector(&[3.0]));
            assert!(lin.forward(f, bad).is_err());
        });
        store.set("l.weight", Tensor::zeros([2, 2])).unwrap();
        store.set("l.bias", Tensor::vector(&[1.0, 2.0])).unwrap();
        eval_forward(&store, false, |f| {
            let x = f.tape.constant(Tensor::vector(&[3.0, -4.0]));
            let y = lin.forward(f, x).unwrap();
            assert_eq!(f.tape.value(y).data(), &[1.0, 2.0]);
        });
    }

    #[test]
    fn linear_gradient_check() {
        let inputs = [
            Tensor::make([3, 4], Fill::Gaussian, 1),
            Tensor::make([4, 2], Fill::Gaussian, 2),
            Tensor::make([2], Fill::Gaussian, 3),
        ];
        let err = check_inputs(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                let y = t.add(y, v[2])?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn layernorm_examples() {
        let mut store = ParamStore::new(0);
        let ln = LayerNorm::new(&mut store, "ln", 4);
        let x = Tensor::make([3, 4], Fill::Gaussian, 4);
        eval_forward(&store, false, |f| {
            let xv = f.tape.constant(x.clone());
            let y = ln.forward(f, xv).unwrap();
            let yv = f.tape.value(y).clone();
            for row in yv.data().chunks(4) {
                assert!((row.iter().sum::<f64>() / 4.0).abs() < 1e-10);
            }
            let x2 = f.tape.constant(x.map(|v| 2.0 * v));
            let y2 = ln.forward(f, x2).unwrap();
            assert!(f.tape.value(y2).max_abs_diff(&yv) < 1e-10);
        });
        store.set("ln.beta", Tensor::vector(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        eval_forward(&store, false, |f| {
            let c = f.tape.constant(Tensor::full([2, 4], 3.0));
            let y = ln.forward(f, c).unwrap();
            assert_eq!(f.tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        });
    }

    #[test]
    fn he_init_statistics() {
        let t = he_init(&[100_000], 2, 5);
        let n = t.numel() as f64;
        let mean = t.sum() / n;
        let std = libm::sqrt(t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n);
        assert!((std - 1.0).abs() < 0.05, "{std}");
        assert_eq!(t, he_init(&[100_000], 2, 5));
        let big = he_init(&[1000], 1 << 40, 5);
        assert!(big.data().iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn branch_shapes_follow_the_channel_table() {
        let mut store = ParamStore::new(3);
        let vision = Branch::new(&mut store, "vision", BranchConfig::vision(35)).unwrap();
        let audio = Branch::new(&mut store, "audio", BranchConfig::audio(10)).unwrap();
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, false, false);
        let xv = f.tape.constant(Tensor::make([2, 15, 35], Fill::Gaussian, 1));
        let (v1, v2) = vision.forward_stages(&mut f, xv).unwrap();
        assert_eq!(f.tape.shape(v1), &[2, 15, 64]);
        assert_eq!(f.tape.shape(v2), &[2, 15, 128]);
        let xa = f.tape.constant(Tensor::make([2, 64, 10], Fill::Gaussian, 2));
        let (a1, a2) = audio.forward_stages(&mut f, xa).unwrap();
        assert_eq!(f.tape.shape(a1), &[2, 16, 128]);
        assert_eq!(f.tape.shape(a2), &[2, 4, 128]);
        assert_eq!(BranchConfig::audio(10).stage_lengths(64), Some((16, 4)));
        assert_eq!(BranchConfig::vision(35).stage_lengths(15), Some((15, 15)));
        assert_eq!(BranchConfig::audio(10).stage_lengths(8), None);
        let bad = f.tape.constant(Tensor::zeros([1, 15, 34]));
        assert!(vision.forward(&mut f, bad, Stage::First).is_err());
    }

    #[test]
    fn branch_zero_input_without_bn_shift_is_zero() {
        let mut store = ParamStore::new(3);
        let audio = Branch::new(&mut store, "audio", BranchConfig::audio(5)).unwrap();
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, false, false);
        let x = f.tape.constant(Tensor::zeros([1, 16, 5]));
        let y = audio.forward(&mut f, x, Stage::Both).unwrap();
        assert!(f.tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
