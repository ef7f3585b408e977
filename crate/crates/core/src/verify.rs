//! Finite-difference gradient suite over every layer, every fusion variant
//! and the training loss.
//!
//! Layers are checked on every coordinate. Full models are checked on a
//! seeded sample of coordinates from every parameter tensor and both inputs,
//! since a dense check would need two forward passes per weight.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::Label;
use crate::error::Result;
use crate::fusion::{
    attention_vector, intermediate_attention_fuse, AttentionProjections, CrossAttention, FusionKind, Model,
    ModelConfig, Task, TransformerBlock,
};
use crate::gradcheck::check_coords;
use crate::harness::task_loss;
use crate::layers::{global_avg_pool, maxpool1d, BatchNorm1d, Conv1d, LayerNorm, Linear};
use crate::params::{Forward, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Fill, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub coords: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    pub eps: f64,
    pub batch: usize,
    pub audio_len: usize,
    pub vision_len: usize,
    pub audio_dim: usize,
    pub vision_dim: usize,
    /// Sampled coordinates per parameter tensor in model checks.
    pub coords_per_tensor: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 0,
            eps: crate::gradcheck::DEFAULT_EPS,
            batch: 4,
            audio_len: 16,
            vision_len: 6,
            audio_dim: 4,
            vision_dim: 5,
            coords_per_tensor: 3,
        }
    }
}

/// Runs `body` with the store's trainable entries and `inputs` as
/// differentiable leaves, reducing its output against a fixed random
/// weighting so every output coordinate matters.
fn check_module<B>(
    name: &str,
    store: &ParamStore,
    inputs: Vec<Tensor>,
    train: bool,
    sample: Option<(usize, u64)>,
    eps: f64,
    body: B,
) -> Result<CheckResult>
where
    B: Fn(&mut Forward, &[Var]) -> Result<Var>,
{
    let n_in = inputs.len();
    let mut all = inputs;
    let trainable: Vec<usize> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id.index()).collect();
    all.extend(trainable.iter().map(|&i| store.iter().nth(i).expect("index").1.value.clone()));
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let mut k = 0;
        let bound: Vec<Var> = store
            .iter()
            .map(|(_, p)| {
                if p.trainable {
                    k += 1;
                    vars[n_in + k - 1]
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        let mut fw = Forward::with_vars(tape, store, bound, train);
        let y = body(&mut fw, &vars[..n_in])?;
        if fw.tape.value(y).numel() == 1 {
            return Ok(y);
        }
        let w = fw.tape.constant(Tensor::make(fw.tape.shape(y).to_vec(), Fill::Gaussian, 0xfeed));
        let p = fw.tape.mul(y, w)?;
        Ok(fw.tape.sum(p))
    };
    let coords: Vec<(usize, usize)> = match sample {
        None => all
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
            .collect(),
        Some((per, seed)) => {
            let mut rng = Rng::new(seed);
            let mut c = Vec::new();
            for (i, t) in all.iter().enumerate() {
                for _ in 0..per.min(t.numel()) {
                    c.push((i, rng.below(t.numel())));
                }
            }
            c
        }
    };
    let max_error = check_coords(f, &all, &coords, eps)?;
    Ok(CheckResult {
        name: String::from(name),
        max_error,
        coords: coords.len(),
    })
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::make(shape.to_vec(), Fill::Gaussian, seed)
}

/// Randomizes normalization parameters so the checks do not sit at the
/// identity initialization.
fn perturb_all(store: &mut ParamStore, seed: u64) {
    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
    for (i, name) in names.iter().enumerate() {
        let id = store.find(name).expect("name");
        let t = store.get(id);
        let noise = rand(t.shape(), seed + i as u64);
        let mut v = t.clone();
        let var_like = name.ends_with("running_var");
        for (x, n) in v.data_mut().iter_mut().zip(noise.data()) {
            *x = if var_like { 1.0 + 0.5 * n.abs() } else { *x + 0.3 * n };
        }
        *store.get_mut(id) = v;
    }
}

/// Every-coordinate checks for each building block.
pub fn layer_checks(cfg: &SuiteConfig) -> Result<Vec<CheckResult>> {
    let eps = cfg.eps;
    let s = cfg.seed;
    let mut out = Vec::new();

    let mut st = ParamStore::new(s);
    let conv = Conv1d::new(&mut st, "conv", 3, 4, 3, 2, 1, true)?;
    perturb_all(&mut st, s + 1);
    out.push(check_module("conv1d", &st, alloc::vec![rand(&[2, 7, 3], s)], true, None, eps, |f, x| {
        conv.forward(f, x[0])
    })?);

    let mut st = ParamStore::new(s);
    let bn = BatchNorm1d::new(&mut st, "bn", 3);
    perturb_all(&mut st, s + 2);
    out.push(check_module("batchnorm (train)", &st, alloc::vec![rand(&[2, 5, 3], s + 1)], true, None, eps, |f, x| {
        bn.forward(f, x[0])
    })?);
    out.push(check_module("batchnorm (eval)", &st, alloc::vec![rand(&[2, 5, 3], s + 1)], false, None, eps, |f, x| {
        bn.forward(f, x[0])
    })?);

    let mut st = ParamStore::new(s);
    let lin = Linear::new(&mut st, "lin", 4, 3, true);
    perturb_all(&mut st, s + 3);
    out.push(check_module("linear", &st, alloc::vec![rand(&[2, 3, 4], s + 2)], true, None, eps, |f, x| {
        lin.forward(f, x[0])
    })?);

    let mut st = ParamStore::new(s);
    let ln = LayerNorm::new(&mut st, "ln", 5);
    perturb_all(&mut st, s + 4);
    out.push(check_module("layernorm", &st, alloc::vec![rand(&[2, 3, 5], s + 3)], true, None, eps, |f, x| {
        ln.forward(f, x[0])
    })?);

    let st = ParamStore::new(s);
    out.push(check_module("maxpool1d", &st, alloc::vec![rand(&[2, 7, 3], s + 4)], true, None, eps, |f, x| {
        maxpool1d(f, x[0], 2)
    })?);
    out.push(check_module("relu", &st, alloc::vec![rand(&[3, 4], s + 5)], true, None, eps, |f, x| {
        Ok(f.tape.relu(x[0]))
    })?);
    out.push(check_module("global_avg_pool", &st, alloc::vec![rand(&[2, 5, 3], s + 6)], true, None, eps, |f, x| {
        global_avg_pool(f, x[0])
    })?);
    out.push(check_module("softmax", &st, alloc::vec![rand(&[3, 5], s + 7)], true, None, eps, |f, x| {
        f.tape.softmax(x[0], 1)
    })?);
    out.push(check_module("attention_vector", &st, alloc::vec![rand(&[2, 3, 4], s + 8)], true, None, eps, |f, x| {
        attention_vector(f.tape, x[0])
    })?);

    for heads in [1, 4] {
        let mut st = ParamStore::new(s + heads as u64);
        let ca = CrossAttention::new(&mut st, "ca", 3, 5, 8, heads, true)?;
        perturb_all(&mut st, s + 5);
        let ins = alloc::vec![rand(&[2, 3, 3], s + 9), rand(&[2, 4, 5], s + 10)];
        out.push(check_module(&format!("cross_attention h={heads}"), &st, ins, true, None, eps, |f, x| {
            ca.forward(f, x[0], x[1])
        })?);

        let mut st = ParamStore::new(s + heads as u64);
        let blk = TransformerBlock::new(&mut st, "blk", 3, 5, 8, heads, 6, false)?;
        perturb_all(&mut st, s + 6);
        let ins = alloc::vec![rand(&[2, 3, 3], s + 11), rand(&[2, 4, 5], s + 12)];
        out.push(check_module(&format!("transformer_block h={heads}"), &st, ins, true, None, eps, |f, x| {
            blk.forward(f, x[0], x[1])
        })?);

        let mut st = ParamStore::new(s + heads as u64);
        let av = AttentionProjections::new(&mut st, "av", 3, 5, 8, heads, false, false)?;
        let va = AttentionProjections::new(&mut st, "va", 5, 3, 8, heads, false, false)?;
        let ins = alloc::vec![rand(&[2, 6, 3], s + 13), rand(&[2, 4, 5], s + 14)];
        out.push(check_module(&format!("attention_fusion h={heads}"), &st, ins, true, None, eps, |f, x| {
            let fz = intermediate_attention_fuse(f, x[0], x[1], &av, &va)?;
            let a = f.tape.reshape(fz.audio, &[2, 18])?;
            let v = f.tape.reshape(fz.vision, &[2, 20])?;
            f.tape.concat(&[a, v], 1)
        })?);
    }

    let st = ParamStore::new(s);
    let labels = [Label::Class(0), Label::Class(2), Label::Class(1)];
    out.push(check_module("cross_entropy", &st, alloc::vec![rand(&[3, 3], s + 15)], true, None, eps, |f, x| {
        task_loss(f.tape, x[0], &labels, Task::Classification { classes: 3 })
    })?);
    let scores = [Label::Score(0.5), Label::Score(-1.0), Label::Score(2.0)];
    out.push(check_module("l1_loss", &st, alloc::vec![rand(&[3, 1], s + 16)], true, None, eps, |f, x| {
        task_loss(f.tape, x[0], &scores, Task::Regression)
    })?);
    Ok(out)
}

/// Training-loss check of a full model on a small batch.
pub fn model_check(kind: FusionKind, heads: usize, task: Task, cfg: &SuiteConfig) -> Result<CheckResult> {
    let mc = ModelConfig {
        audio_dim: cfg.audio_dim,
        vision_dim: cfg.vision_dim,
        fusion: kind,
        heads,
        task,
        ..ModelConfig::default()
    };
    let model = Model::new(mc, cfg.seed)?;
    let b = cfg.batch;
    let audio = rand(&[b, cfg.audio_len, cfg.audio_dim], cfg.seed + 100);
    let vision = rand(&[b, cfg.vision_len, cfg.vision_dim], cfg.seed + 101);
    let labels: Vec<Label> = match task {
        Task::Classification { classes } => (0..b).map(|i| Label::Class(i % classes)).collect(),
        Task::Regression => (0..b).map(|i| Label::Score(i as f64 - 1.3)).collect(),
    };
    let name = match task {
        Task::Classification { .. } => kind.label(heads),
        Task::Regression => format!("{} (regression)", kind.label(heads)),
    };
    check_module(
        &name,
        &model.params,
        alloc::vec![audio, vision],
        true,
        Some((cfg.coords_per_tensor, cfg.seed + 7)),
        cfg.eps,
        |f, x| {
            let out = model.forward(f, x[0], x[1])?;
            task_loss(f.tape, out.output, &labels, task)
        },
    )
}

/// The eight fusion variants checked by the suite.
pub const VARIANTS: [(FusionKind, usize); 8] = [
    (FusionKind::LateTransformer, 1),
    (FusionKind::LateTransformer, 4),
    (FusionKind::IntermediateTransformer, 1),
    (FusionKind::IntermediateTransformer, 4),
    (FusionKind::IntermediateAttention, 1),
    (FusionKind::IntermediateAttention, 4),
    (FusionKind::SingleDirectionAV, 1),
    (FusionKind::SingleDirectionVA, 1),
];

/// Layers, all fusion variants on the classification loss, and one
/// regression model.
pub fn gradient_suite(cfg: &SuiteConfig, mut progress: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for r in layer_checks(cfg)? {
        progress(&r);
        out.push(r);
    }
    for (kind, heads) in VARIANTS {
        let r = model_check(kind, heads, Task::Classification { classes: 3 }, cfg)?;
        progress(&r);
        out.push(r);
    }
    let r = model_check(FusionKind::IntermediateAttention, 1, Task::Regression, cfg)?;
    progress(&r);
    out.push(r);
    Ok(out)
}
