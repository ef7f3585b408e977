//! Training-time modality dropout and test-time masking/noise settings.

use alloc::vec::Vec;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::layers::Modality;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DropoutVariant {
    None,
    /// Zero out one modality; the soft category attenuates both.
    HardZero,
    /// Every non-full sample is attenuated with `α` / `1 − α`.
    Soft,
    /// Replace one modality with standard gaussian noise; the soft category
    /// attenuates both.
    Noise,
}

impl DropoutVariant {
    pub fn name(self) -> &'static str {
        match self {
            DropoutVariant::None => "none",
            DropoutVariant::HardZero => "hard",
            DropoutVariant::Soft => "soft",
            DropoutVariant::Noise => "noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::None, Self::HardZero, Self::Soft, Self::Noise]
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

/// Per-sample categorical distribution over {full, drop audio, drop vision,
/// soft}, interpreted by the variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutPolicy {
    pub variant: DropoutVariant,
    pub p_full: f64,
    pub p_drop_audio: f64,
    pub p_drop_vision: f64,
    pub p_soft: f64,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        DropoutPolicy::quarters(DropoutVariant::None)
    }
}

impl DropoutPolicy {
    pub fn new(variant: DropoutVariant, probs: [f64; 4]) -> Result<Self> {
        let p = DropoutPolicy {
            variant,
            p_full: probs[0],
            p_drop_audio: probs[1],
            p_drop_vision: probs[2],
            p_soft: probs[3],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn quarters(variant: DropoutVariant) -> Self {
        DropoutPolicy {
            variant,
            p_full: 0.25,
            p_drop_audio: 0.25,
            p_drop_vision: 0.25,
            p_soft: 0.25,
        }
    }

    pub fn probs(&self) -> [f64; 4] {
        [self.p_full, self.p_drop_audio, self.p_drop_vision, self.p_soft]
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.probs();
        if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::invalid("DropoutPolicy", "probabilities must lie in [0, 1]"));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("DropoutPolicy", alloc::format!("probabilities sum to {total}, not 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SampleMode {
    AV,
    AOnly,
    VOnly,
    /// Audio scaled by the factor, vision by one minus it.
    SoftScaled(f64),
    NoiseAudio,
    NoiseVision,
}

/// Draws one mode per sample. Deterministic in `seed`.
pub fn assign_modes(n: usize, policy: &DropoutPolicy, seed: u64) -> Result<Vec<SampleMode>> {
    policy.validate()?;
    let mut rng = Rng::new(seed);
    let p = policy.probs();
    let mut modes = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.uniform();
        let mut category = 3;
        let mut acc = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                category = i;
                break;
            }
        }
        // always drawn, so the stream does not depend on the category
        let alpha = rng.uniform();
        let audio_side = rng.coin();
        let soft = SampleMode::SoftScaled(if audio_side { alpha } else { 1.0 - alpha });
        let mode = match (policy.variant, category) {
            (DropoutVariant::None, _) | (_, 0) => SampleMode::AV,
            (DropoutVariant::Soft, _) | (_, 3) => soft,
            (DropoutVariant::HardZero, 1) => SampleMode::VOnly,
            (DropoutVariant::HardZero, _) => SampleMode::AOnly,
            (DropoutVariant::Noise, 1) => SampleMode::NoiseAudio,
            (DropoutVariant::Noise, _) => SampleMode::NoiseVision,
        };
        modes.push(mode);
    }
    Ok(modes)
}

fn modality_mut(s: &mut Sample, which: Modality) -> &mut Tensor {
    match which {
        Modality::Audio => &mut s.audio,
        Modality::Vision => &mut s.vision,
    }
}

/// Replaces one modality with zeros.
pub fn apply_hard_dropout(sample: &Sample, which: Modality) -> Sample {
    let mut s = sample.clone();
    let t = modality_mut(&mut s, which);
    *t = Tensor::zeros(t.shape().to_vec());
    s
}

/// Scales audio by `alpha` and vision by `1 − alpha`.
pub fn apply_soft_dropout(sample: &Sample, alpha: f64) -> Result<Sample> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("apply_soft_dropout", alloc::format!("alpha {alpha} outside [0, 1]")));
    }
    let mut s = sample.clone();
    s.audio = s.audio.map(|x| x * alpha);
    s.vision = s.vision.map(|x| x * (1.0 - alpha));
    Ok(s)
}

/// Replaces one modality with i.i.d. standard gaussian values.
pub fn apply_noise_dropout(sample: &Sample, which: Modality, seed: u64) -> Sample {
    let mut s = sample.clone();
    let t = modality_mut(&mut s, which);
    let mut rng = Rng::new(seed);
    for x in t.data_mut() {
        *x = rng.gaussian();
    }
    s
}

/// Applies a training mode; `seed` feeds the noise modes only.
pub fn apply_mode(sample: &Sample, mode: SampleMode, seed: u64) -> Result<Sample> {
    Ok(match mode {
        SampleMode::AV => sample.clone(),
        SampleMode::AOnly => apply_hard_dropout(sample, Modality::Vision),
        SampleMode::VOnly => apply_hard_dropout(sample, Modality::Audio),
        SampleMode::SoftScaled(alpha) => apply_soft_dropout(sample, alpha)?,
        SampleMode::NoiseAudio => apply_noise_dropout(sample, Modality::Audio, seed),
        SampleMode::NoiseVision => apply_noise_dropout(sample, Modality::Vision, seed),
    })
}

/// Evaluation settings: both modalities, one modality zeroed, or one
/// modality replaced with noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TestSetting {
    AV,
    /// Audio only: vision zeroed.
    A,
    /// Vision only: audio zeroed.
    V,
    NoiseA,
    NoiseV,
}

impl TestSetting {
    pub const ALL: [TestSetting; 5] = [
        TestSetting::AV,
        TestSetting::A,
        TestSetting::V,
        TestSetting::NoiseA,
        TestSetting::NoiseV,
    ];

    pub fn code(self) -> &'static str {
        match self {
            TestSetting::AV => "AV",
            TestSetting::A => "A",
            TestSetting::V => "V",
            TestSetting::NoiseA => "NA",
            TestSetting::NoiseV => "NV",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        match s.to_ascii_uppercase().as_str() {
            "NOISEA" => return Some(TestSetting::NoiseA),
            "NOISEV" => return Some(TestSetting::NoiseV),
            _ => {}
        }
        Self::ALL.into_iter().find(|t| t.code().eq_ignore_ascii_case(s))
    }
}

/// Applies an evaluation setting; `seed` feeds the noise settings only.
pub fn apply_test_setting(sample: &Sample, setting: TestSetting, seed: u64) -> Sample {
    match setting {
        TestSetting::AV => sample.clone(),
        TestSetting::A => apply_hard_dropout(sample, Modality::Vision),
        TestSetting::V => apply_hard_dropout(sample, Modality::Audio),
        TestSetting::NoiseA => apply_noise_dropout(sample, Modality::Audio, seed),
        TestSetting::NoiseV => apply_noise_dropout(sample, Modality::Vision, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;
    use crate::tensor::Fill;

    fn sample() -> Sample {
        Sample {
            audio: Tensor::make([8, 3], Fill::Gaussian, 1),
            vision: Tensor::make([5, 4], Fill::Gaussian, 2),
            label: Label::Class(1),
            group: 0,
        }
    }

    #[test]
    fn policy_validation() {
        assert!(DropoutPolicy::new(DropoutVariant::HardZero, [0.5, 0.5, 0.0, 0.0]).is_ok());
        assert!(DropoutPolicy::new(DropoutVariant::HardZero, [2.0, 0.0, 0.0, 0.0]).is_err());
        assert!(DropoutPolicy::new(DropoutVariant::HardZero, [0.3, 0.3, 0.3, 0.3]).is_err());
        assert!(DropoutPolicy::new(DropoutVariant::HardZero, [1.1, -0.1, 0.0, 0.0]).is_err());
        assert!(DropoutPolicy::quarters(DropoutVariant::Soft).validate().is_ok());
    }

    #[test]
    fn degenerate_and_disabled_policies_are_all_full() {
        let p = DropoutPolicy::new(DropoutVariant::HardZero, [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(assign_modes(500, &p, 3).unwrap().iter().all(|m| *m == SampleMode::AV));
        let p = DropoutPolicy::quarters(DropoutVariant::None);
        assert!(assign_modes(500, &p, 3).unwrap().iter().all(|m| *m == SampleMode::AV));
    }

    #[test]
    fn quarter_frequencies() {
        let p = DropoutPolicy::quarters(DropoutVariant::HardZero);
        let n = 100_000;
        let modes = assign_modes(n, &p, 42).unwrap();
        let mut counts = [0usize; 4];
        for m in &modes {
            counts[match m {
                SampleMode::AV => 0,
                SampleMode::VOnly => 1,
                SampleMode::AOnly => 2,
                SampleMode::SoftScaled(a) => {
                    assert!((0.0..=1.0).contains(a));
                    3
                }
                _ => unreachable!(),
            }] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01, "{counts:?}");
        }
        // chi-square, 3 degrees of freedom, 0.01 critical value 11.345
        let e = n as f64 / 4.0;
        let chi: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi < 11.345, "{chi}");
        assert_eq!(modes, assign_modes(n, &p, 42).unwrap());
    }

    #[test]
    fn variant_mode_mapping() {
        let p = DropoutPolicy::quarters(DropoutVariant::Noise);
        let modes = assign_modes(2000, &p, 1).unwrap();
        assert!(modes.contains(&SampleMode::NoiseAudio));
        assert!(modes.contains(&SampleMode::NoiseVision));
        assert!(!modes.iter().any(|m| matches!(m, SampleMode::AOnly | SampleMode::VOnly)));
        let p = DropoutPolicy::quarters(DropoutVariant::Soft);
        let modes = assign_modes(2000, &p, 1).unwrap();
        assert!(modes.iter().all(|m| matches!(m, SampleMode::AV | SampleMode::SoftScaled(_))));
    }

    #[test]
    fn hard_dropout() {
        let s = sample();
        let d = apply_hard_dropout(&s, Modality::Audio);
        assert!(d.audio.data().iter().all(|&x| x == 0.0));
        assert_eq!(d.vision, s.vision);
        assert_eq!(apply_hard_dropout(&d, Modality::Audio), d);
        let both = apply_hard_dropout(&apply_hard_dropout(&s, Modality::Vision), Modality::Audio);
        assert!(both.audio.data().iter().chain(both.vision.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn soft_dropout_endpoints_and_midpoint() {
        let s = sample();
        let zero = apply_soft_dropout(&s, 0.0).unwrap();
        let hard = apply_hard_dropout(&s, Modality::Audio);
        assert_eq!(zero.audio, hard.audio);
        assert_eq!(zero.vision, hard.vision);
        let one = apply_soft_dropout(&s, 1.0).unwrap();
        assert_eq!(one.audio, s.audio);
        assert!(one.vision.data().iter().all(|&x| x == 0.0));
        let half = apply_soft_dropout(&s, 0.5).unwrap();
        assert_eq!(half.audio, s.audio.map(|x| x / 2.0));
        assert_eq!(half.vision, s.vision.map(|x| x / 2.0));
        assert!(apply_soft_dropout(&s, 1.5).is_err());
        assert!(apply_soft_dropout(&s, -0.1).is_err());
        assert!(apply_soft_dropout(&s, f64::NAN).is_err());
    }

    #[test]
    fn noise_dropout_statistics() {
        let s = Sample {
            audio: Tensor::zeros([1000, 100]),
            vision: Tensor::ones([2, 2]),
            label: Label::Class(0),
            group: 0,
        };
        let d = apply_noise_dropout(&s, Modality::Audio, 9);
        assert_eq!(d.audio.shape(), s.audio.shape());
        assert_eq!(d.vision, s.vision);
        let n = d.audio.numel() as f64;
        let mean = d.audio.sum() / n;
        let var = d.audio.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() <= 0.05 && (0.9..=1.1).contains(&var), "{mean} {var}");
        assert_eq!(d, apply_noise_dropout(&s, Modality::Audio, 9));
    }

    #[test]
    fn test_settings() {
        let s = sample();
        assert_eq!(apply_test_setting(&s, TestSetting::AV, 0), s);
        let a = apply_test_setting(&s, TestSetting::A, 0);
        assert!(a.vision.data().iter().all(|&x| x == 0.0));
        assert_eq!(a.audio, s.audio);
        let v = apply_test_setting(&s, TestSetting::V, 0);
        assert!(v.audio.data().iter().all(|&x| x == 0.0));
        let nv = apply_test_setting(&s, TestSetting::NoiseV, 4);
        assert_eq!(nv.audio, s.audio);
        assert_ne!(nv.vision, s.vision);
        for t in TestSetting::ALL {
            assert_eq!(TestSetting::parse(t.code()), Some(t));
        }
        assert_eq!(TestSetting::parse("noisea"), Some(TestSetting::NoiseA));
        assert_eq!(TestSetting::parse("X"), None);
    }
}
