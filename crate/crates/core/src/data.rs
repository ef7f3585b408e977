//! Samples, datasets and the synthetic class-conditional generator.
//!
//! Each modality is driven by a low-dimensional latent per timestep:
//!
//! `h_m(t) = a_m·z_y + (1 − a_m)·(ε_m + g_m + ξ_m(t))`, with `a_m = s_m·ρ`,
//!
//! where `z_y` is the label's prototype, shared by both modalities, `ε_m` a
//! per-sample nuisance, `g_m` a per-group offset and `ξ_m(t)` per-step noise.
//! The latent is smoothed with a width-3 moving average, mapped to the
//! feature space by a fixed random projection and perturbed by gaussian
//! observation noise. `s_m` controls how informative a modality is and `ρ`
//! how much of that information is the shared class signal.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fusion::Task;
use crate::rng::{label, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    /// Sentiment-style score in `[-3, 3]`.
    Score(f64),
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Score(_) => None,
        }
    }

    pub fn score(self) -> Option<f64> {
        match self {
            Label::Score(s) => Some(s),
            Label::Class(_) => None,
        }
    }

    pub fn fits(self, task: Task) -> bool {
        match (self, task) {
            (Label::Class(c), Task::Classification { classes }) => c < classes,
            (Label::Score(s), Task::Regression) => (-3.0..=3.0).contains(&s),
            _ => false,
        }
    }
}

/// One audiovisual example: `audio` is `[N_a, d_a]`, `vision` is `[N_v, d_v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub audio: Tensor,
    pub vision: Tensor,
    pub label: Label,
    /// Speaker/actor identity; never shared between splits.
    pub group: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub audio_dim: usize,
    pub vision_dim: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn empty(task: Task, audio_dim: usize, vision_dim: usize) -> Self {
        Dataset {
            task,
            audio_dim,
            vision_dim,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        }
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Sample> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks feature widths, finiteness and label ranges of every sample.
    pub fn validate(&self) -> Result<()> {
        for split in Split::ALL {
            for s in self.split(split) {
                if s.audio.rank() != 2 || s.audio.shape()[1] != self.audio_dim {
                    return Err(Error::shape("dataset audio", s.audio.shape(), &[self.audio_dim]));
                }
                if s.vision.rank() != 2 || s.vision.shape()[1] != self.vision_dim {
                    return Err(Error::shape("dataset vision", s.vision.shape(), &[self.vision_dim]));
                }
                if !s.audio.is_finite() || !s.vision.is_finite() {
                    return Err(Error::invalid("dataset", "non-finite feature value"));
                }
                if !s.label.fits(self.task) {
                    return Err(Error::invalid("dataset", alloc::format!("label {:?} outside task range", s.label)));
                }
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic family.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub task: Task,
    pub audio_len: usize,
    pub vision_len: usize,
    pub audio_dim: usize,
    pub vision_dim: usize,
    /// How informative each modality is, in `[0, 1]`.
    pub audio_strength: f64,
    pub vision_strength: f64,
    /// Share of the class signal carried by the common latent, in `[0, 1]`.
    pub redundancy: f64,
    pub noise_std: f64,
    pub latent_dim: usize,
    pub group_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            task: Task::Classification { classes: 4 },
            audio_len: 64,
            vision_len: 15,
            audio_dim: 10,
            vision_dim: 35,
            audio_strength: 0.6,
            vision_strength: 0.6,
            redundancy: 0.7,
            noise_std: 0.5,
            latent_dim: 8,
            group_size: 20,
            train: 2000,
            val: 400,
            test: 400,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.audio_strength) || !unit(self.vision_strength) || !unit(self.redundancy) {
            return Err(Error::invalid("SynthSpec", "strengths and redundancy must lie in [0, 1]"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("SynthSpec", "noise_std must be finite and non-negative"));
        }
        if self.audio_len == 0 || self.vision_len == 0 || self.audio_dim == 0 || self.vision_dim == 0 {
            return Err(Error::invalid("SynthSpec", "sequence lengths and widths must be positive"));
        }
        if self.latent_dim == 0 || self.group_size == 0 {
            return Err(Error::invalid("SynthSpec", "latent_dim and group_size must be positive"));
        }
        if let Task::Classification { classes } = self.task {
            if classes < 2 {
                return Err(Error::invalid("SynthSpec", "need at least two classes"));
            }
        }
        Ok(())
    }
}

struct Modal {
    len: usize,
    projection: Vec<f64>, // [latent, dim]
    dim: usize,
    weight: f64,
}

fn gaussians(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gaussian()).collect()
}

/// Draws all three splits. Groups are consecutive blocks of `group_size`
/// samples and each split starts a fresh block, so splits never share one.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let l = spec.latent_dim;
    let mut proto_rng = Rng::derive(spec.seed, &[label::DATA, 0]);
    let prototypes: Vec<Vec<f64>> = match spec.task {
        Task::Classification { classes } => (0..classes).map(|_| gaussians(&mut proto_rng, l)).collect(),
        // regression: one direction, scaled by the score
        Task::Regression => vec![gaussians(&mut proto_rng, l)],
    };
    let modal = |idx: u64, len: usize, dim: usize, strength: f64| {
        let mut rng = Rng::derive(spec.seed, &[label::DATA, 1, idx]);
        let scale = 1.0 / libm::sqrt(l as f64);
        Modal {
            len,
            projection: (0..l * dim).map(|_| rng.gaussian() * scale).collect(),
            dim,
            weight: strength * spec.redundancy,
        }
    };
    let audio = modal(0, spec.audio_len, spec.audio_dim, spec.audio_strength);
    let vision = modal(1, spec.vision_len, spec.vision_dim, spec.vision_strength);

    let mut ds = Dataset::empty(spec.task, spec.audio_dim, spec.vision_dim);
    let mut group_base = 0;
    for (si, split) in Split::ALL.into_iter().enumerate() {
        let n = match split {
            Split::Train => spec.train,
            Split::Val => spec.val,
            Split::Test => spec.test,
        };
        let groups = n.div_ceil(spec.group_size);
        let offsets: Vec<[Vec<f64>; 2]> = (0..groups)
            .map(|g| {
                let mut rng = Rng::derive(spec.seed, &[label::DATA, 2, (group_base + g) as u64]);
                [gaussians(&mut rng, l), gaussians(&mut rng, l)]
            })
            .collect();
        let out = ds.split_mut(split);
        for i in 0..n {
            let mut rng = Rng::derive(spec.seed, &[label::DATA, 3, si as u64, i as u64]);
            let (lab, signal) = match spec.task {
                Task::Classification { classes } => {
                    let c = i % classes;
                    (Label::Class(c), prototypes[c].clone())
                }
                Task::Regression => {
                    let y = (rng.uniform() * 6.0 - 3.0).clamp(-3.0, 3.0);
                    (Label::Score(y), prototypes[0].iter().map(|p| p * y / 3.0).collect())
                }
            };
            let g = i / spec.group_size;
            let a = sequence(&mut rng, &audio, &signal, &offsets[g][0], spec.noise_std);
            let v = sequence(&mut rng, &vision, &signal, &offsets[g][1], spec.noise_std);
            out.push(Sample {
                audio: a,
                vision: v,
                label: lab,
                group: group_base + g,
            });
        }
        group_base += groups;
    }
    Ok(ds)
}

fn sequence(rng: &mut Rng, m: &Modal, signal: &[f64], offset: &[f64], noise_std: f64) -> Tensor {
    let l = signal.len();
    let nuisance = gaussians(rng, l);
    let steps = m.len + 2;
    let latent: Vec<f64> = (0..steps * l)
        .map(|i| {
            let k = i % l;
            let xi = rng.gaussian();
            m.weight * signal[k] + (1.0 - m.weight) * (nuisance[k] + offset[k] + xi)
        })
        .collect();
    let mut out = vec![0.0; m.len * m.dim];
    let mut smooth = vec![0.0; l];
    for t in 0..m.len {
        for k in 0..l {
            smooth[k] = (latent[t * l + k] + latent[(t + 1) * l + k] + latent[(t + 2) * l + k]) / 3.0;
        }
        let row = &mut out[t * m.dim..(t + 1) * m.dim];
        for (k, &h) in smooth.iter().enumerate() {
            for (o, p) in row.iter_mut().zip(&m.projection[k * m.dim..(k + 1) * m.dim]) {
                *o += h * p;
            }
        }
    }
    if noise_std > 0.0 {
        for o in &mut out {
            *o += noise_std * rng.gaussian();
        }
    }
    Tensor::new([m.len, m.dim], out).expect("sequence shape")
}

/// Per-feature z-scoring statistics, fit on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub audio_mean: Vec<f64>,
    pub audio_std: Vec<f64>,
    pub vision_mean: Vec<f64>,
    pub vision_std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

fn column_stats<'a>(rows: impl Iterator<Item = &'a Tensor>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    let mut count = 0.0;
    // Welford, one row at a time
    for t in rows {
        for row in t.data().chunks(dim) {
            count += 1.0;
            for j in 0..dim {
                let d = row[j] - mean[j];
                mean[j] += d / count;
                m2[j] += d * (row[j] - mean[j]);
            }
        }
    }
    let std = m2.iter().map(|v| libm::sqrt(v / count).max(STD_FLOOR)).collect();
    (mean, std)
}

impl Standardizer {
    pub fn fit(train: &[Sample]) -> Result<Self> {
        let first = train.first().ok_or(Error::Empty("standardize: training split"))?;
        let (ad, vd) = (first.audio.shape()[1], first.vision.shape()[1]);
        let (audio_mean, audio_std) = column_stats(train.iter().map(|s| &s.audio), ad);
        let (vision_mean, vision_std) = column_stats(train.iter().map(|s| &s.vision), vd);
        Ok(Standardizer {
            audio_mean,
            audio_std,
            vision_mean,
            vision_std,
        })
    }

    pub fn apply(&self, s: &mut Sample) {
        let norm = |t: &mut Tensor, mean: &[f64], std: &[f64]| {
            let d = mean.len();
            for row in t.data_mut().chunks_mut(d) {
                for j in 0..d {
                    row[j] = (row[j] - mean[j]) / std[j];
                }
            }
        };
        norm(&mut s.audio, &self.audio_mean, &self.audio_std);
        norm(&mut s.vision, &self.vision_mean, &self.vision_std);
    }

    pub fn apply_all(&self, ds: &mut Dataset) {
        for split in Split::ALL {
            for s in ds.split_mut(split) {
                self.apply(s);
            }
        }
    }
}

/// Fits statistics on the training split and applies them to every split.
pub fn standardize(ds: &mut Dataset) -> Result<Standardizer> {
    let st = Standardizer::fit(&ds.train)?;
    st.apply_all(ds);
    Ok(st)
}

/// Stacks samples into batch tensors `[B, N_a, d_a]` and `[B, N_v, d_v]`.
pub fn stack_batch(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let a: Vec<&Tensor> = samples.iter().map(|s| &s.audio).collect();
    let v: Vec<&Tensor> = samples.iter().map(|s| &s.vision).collect();
    Ok((Tensor::stack(&a)?, Tensor::stack(&v)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    fn tiny(seed: u64) -> SynthSpec {
        SynthSpec {
            train: 60,
            val: 20,
            test: 20,
            group_size: 7,
            audio_len: 16,
            vision_len: 6,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&tiny(3)).unwrap(), generate(&tiny(3)).unwrap());
        assert_ne!(generate(&tiny(3)).unwrap(), generate(&tiny(4)).unwrap());
    }

    #[test]
    fn shapes_labels_and_disjoint_groups() {
        let ds = generate(&tiny(1)).unwrap();
        ds.validate().unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (60, 20, 20));
        assert_eq!(ds.train[0].audio.shape(), &[16, 10]);
        assert_eq!(ds.train[0].vision.shape(), &[6, 35]);
        let groups: Vec<BTreeSet<usize>> =
            Split::ALL.iter().map(|&s| ds.split(s).iter().map(|x| x.group).collect()).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(groups[i].is_disjoint(&groups[j]));
            }
        }
    }

    #[test]
    fn full_redundancy_without_noise_is_a_function_of_the_label() {
        let spec = SynthSpec {
            audio_strength: 1.0,
            vision_strength: 1.0,
            redundancy: 1.0,
            noise_std: 0.0,
            ..tiny(2)
        };
        let ds = generate(&spec).unwrap();
        let (a, b) = (&ds.train[0], &ds.train[4]);
        assert_eq!(a.label, b.label);
        assert_eq!(a.audio, b.audio);
        assert_eq!(a.vision, b.vision);
        assert_ne!(ds.train[0].audio, ds.train[1].audio);
    }

    #[test]
    fn regression_scores_in_range() {
        let ds = generate(&SynthSpec {
            task: Task::Regression,
            ..tiny(5)
        })
        .unwrap();
        ds.validate().unwrap();
        assert!(ds.train.iter().all(|s| matches!(s.label, Label::Score(y) if (-3.0..=3.0).contains(&y))));
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(generate(&SynthSpec {
            redundancy: 1.5,
            ..tiny(0)
        })
        .is_err());
        assert!(generate(&SynthSpec {
            task: Task::Classification { classes: 1 },
            ..tiny(0)
        })
        .is_err());
    }

    #[test]
    fn standardization_uses_train_statistics() {
        let mut ds = generate(&tiny(6)).unwrap();
        let raw = ds.clone();
        let st = standardize(&mut ds).unwrap();
        let (mean, _) = column_stats(ds.train.iter().map(|s| &s.audio), 10);
        assert!(mean.iter().all(|m| m.abs() < 1e-10));
        // test split reuses the train statistics verbatim
        let mut t = raw.test[0].clone();
        st.apply(&mut t);
        assert_eq!(t, ds.test[0]);
        let refit = Standardizer::fit(&raw.train).unwrap();
        assert_eq!(refit, st);
    }

    #[test]
    fn constant_feature_standardizes_to_zero() {
        let mut ds = generate(&tiny(7)).unwrap();
        for s in &mut ds.train {
            for row in s.vision.data_mut().chunks_mut(35) {
                row[3] = 2.5;
            }
        }
        standardize(&mut ds).unwrap();
        for s in &ds.train {
            for row in s.vision.data().chunks(35) {
                assert_eq!(row[3], 0.0);
            }
        }
    }

    #[test]
    fn empty_train_split_cannot_be_standardized() {
        let mut ds = Dataset::empty(Task::Regression, 3, 4);
        assert!(standardize(&mut ds).is_err());
    }
}
