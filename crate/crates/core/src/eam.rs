//! Energy-adaptive mixup and its length-adaptive baseline.
//!
//! A random segment of the donor utterance `x_j` is rescaled so that its
//! mean power sits a drawn number of decibels below the base segment of
//! `x_i`, then added onto that base segment in place. The soft label
//! moves weight onto the donor's class in proportion to both the mixed
//! length fraction and the donor's share of the mixed-region energy.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{mean_power, Segment, SignalError, Waveform};

/// Energies at or below this are treated as silence.
pub const SILENCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MixError {
    #[error("no valid mix length: {0}")]
    SegmentTooShort(String),
    #[error("silent segment in {which} (energy {energy:e})")]
    SilentSegment { which: &'static str, energy: f64 },
    #[error("sample rates differ: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),
    #[error("class {class} outside 0..{n_classes}")]
    InvalidClass { class: usize, n_classes: usize },
    #[error("invalid mix configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MixupMode {
    #[default]
    Eam,
    Lam,
    None,
}

impl std::fmt::Display for MixupMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Eam => "eam",
            Self::Lam => "lam",
            Self::None => "none",
        })
    }
}

impl std::str::FromStr for MixupMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "eam" => Ok(Self::Eam),
            "lam" => Ok(Self::Lam),
            "none" => Ok(Self::None),
            other => Err(format!("unknown mixup mode '{other}' (eam|lam|none)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixConfig {
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    /// Bounds on `l_mix / l_i`.
    pub mix_frac_min: f64,
    pub mix_frac_max: f64,
    pub rng_seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            snr_db_min: 0.0,
            snr_db_max: 10.0,
            mix_frac_min: 0.1,
            mix_frac_max: 0.5,
            rng_seed: 0,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<(), MixError> {
        if !(self.snr_db_min.is_finite() && self.snr_db_max.is_finite()) || self.snr_db_min > self.snr_db_max {
            return Err(MixError::InvalidConfig(format!(
                "snr range [{}, {}]",
                self.snr_db_min, self.snr_db_max
            )));
        }
        if !(self.mix_frac_min > 0.0 && self.mix_frac_min <= self.mix_frac_max && self.mix_frac_max <= 1.0) {
            return Err(MixError::InvalidConfig(format!(
                "mix fraction range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.mix_frac_min, self.mix_frac_max
            )));
        }
        Ok(())
    }
}

/// Probability vector over emotion classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SoftLabel {
    probs: Vec<f64>,
}

impl SoftLabel {
    pub fn one_hot(class: usize, n_classes: usize) -> Result<Self, MixError> {
        check_class(class, n_classes)?;
        let mut probs = vec![0.0; n_classes];
        probs[class] = 1.0;
        Ok(Self { probs })
    }

    /// Accepts a vector whose entries lie in `[0, 1]` and sum to one
    /// within `1e-6` (looser than the mixup output so that labels read back
    /// from text survive).
    pub fn from_probs(probs: Vec<f64>) -> Result<Self, MixError> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(MixError::InvalidConfig(format!("not a probability vector: {probs:?}")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_classes(&self) -> usize {
        self.probs.len()
    }

    /// Dominant class; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Drawn mix geometry and target SNR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixParams {
    pub l_mix: usize,
    pub start_i: usize,
    pub start_j: usize,
    pub snr_db: f64,
}

/// Parameters as actually applied, including the donor gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppliedMix {
    pub l_mix: usize,
    pub start_i: usize,
    pub start_j: usize,
    pub snr_db: f64,
    pub scale: f64,
}

/// Output of the signal path before labelling.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSignal {
    pub mixed: Waveform,
    pub params: AppliedMix,
    /// `P'_i`, mean power of the base segment.
    pub energy_i: f64,
    /// `P''_j`, mean power of the scaled donor segment as emitted.
    pub energy_jj: f64,
    pub achieved_snr_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixResult {
    pub mixed: Waveform,
    pub label: SoftLabel,
    pub achieved_snr_db: f64,
    pub params: AppliedMix,
    /// Weight moved onto the donor class.
    pub weight: f64,
}

/// A waveform with its hard class.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub wave: &'a Waveform,
    pub class: usize,
}

fn check_class(class: usize, n_classes: usize) -> Result<(), MixError> {
    if class >= n_classes {
        return Err(MixError::InvalidClass { class, n_classes });
    }
    Ok(())
}

/// Draws `(l_mix, start_i, start_j, snr_db)`.
///
/// `l_mix` is uniform over `[⌊min·len_i⌋, ⌊max·len_i⌋]`, with both ends
/// clamped to `min(len_i, len_j)`. The draw order is fixed so the same
/// generator state always yields the same tuple.
pub fn sample_mix_params<R: Rng + ?Sized>(
    cfg: &MixConfig,
    len_i: usize,
    len_j: usize,
    rng: &mut R,
) -> Result<MixParams, MixError> {
    cfg.validate()?;
    let lo = (cfg.mix_frac_min * len_i as f64).floor() as usize;
    let hi = (cfg.mix_frac_max * len_i as f64).floor() as usize;
    if lo < 1 || len_j < 1 {
        return Err(MixError::SegmentTooShort(format!(
            "len_i = {len_i}, len_j = {len_j}, mix_frac_min = {}",
            cfg.mix_frac_min
        )));
    }
    let cap = len_i.min(len_j);
    let (lo, hi) = (lo.min(cap), hi.min(cap));
    let l_mix = rng.random_range(lo..=hi);
    let start_i = rng.random_range(0..=len_i - l_mix);
    let start_j = rng.random_range(0..=len_j - l_mix);
    let snr_db = if cfg.snr_db_min == cfg.snr_db_max {
        cfg.snr_db_min
    } else {
        rng.random_range(cfg.snr_db_min..=cfg.snr_db_max)
    };
    Ok(MixParams {
        l_mix,
        start_i,
        start_j,
        snr_db,
    })
}

/// Gain that puts the donor `snr_db` below the base in mean power:
/// `sqrt(P'_i / (10^(snr/10) · P'_j))`.
pub fn snr_scale(energy_i: f64, energy_j: f64, snr_db: f64) -> Result<f64, MixError> {
    if energy_i <= SILENCE_FLOOR {
        return Err(MixError::SilentSegment {
            which: "base segment",
            energy: energy_i,
        });
    }
    if energy_j <= SILENCE_FLOOR {
        return Err(MixError::SilentSegment {
            which: "donor segment",
            energy: energy_j,
        });
    }
    Ok((energy_i / (10f64.powf(snr_db / 10.0) * energy_j)).sqrt())
}

fn overwrite_mix(
    x_i: &Waveform,
    x_j: &Waveform,
    params: &MixParams,
    scale: Option<f64>,
) -> Result<MixedSignal, MixError> {
    if x_i.sample_rate() != x_j.sample_rate() {
        return Err(MixError::SampleRateMismatch(x_i.sample_rate(), x_j.sample_rate()));
    }
    let seg_i = Segment::new(params.start_i, params.l_mix);
    let seg_j = Segment::new(params.start_j, params.l_mix);
    let base = x_i.slice(seg_i)?;
    let donor = x_j.slice(seg_j)?;
    let energy_i = mean_power(base);
    let scale = match scale {
        Some(s) => s,
        None => snr_scale(energy_i, mean_power(donor), params.snr_db)?,
    };
    let scaled: Vec<f64> = donor.iter().map(|v| scale * v).collect();
    let energy_jj = mean_power(&scaled);
    let mut mixed = x_i.clone();
    for (out, (b, d)) in mixed.samples_mut()[seg_i.start..seg_i.end()]
        .iter_mut()
        .zip(base.iter().zip(&scaled))
    {
        *out = b + d;
    }
    Ok(MixedSignal {
        mixed,
        params: AppliedMix {
            l_mix: params.l_mix,
            start_i: params.start_i,
            start_j: params.start_j,
            snr_db: params.snr_db,
            scale,
        },
        energy_i,
        energy_jj,
        achieved_snr_db: 10.0 * (energy_i / energy_jj).log10(),
    })
}

/// Overwrites `x_i[start_i .. start_i + l_mix]` with `x'_i + scale·x'_j`.
pub fn mix_signals(x_i: &Waveform, x_j: &Waveform, params: &MixParams) -> Result<MixedSignal, MixError> {
    overwrite_mix(x_i, x_j, params, None)
}

/// Label weight `w = (l_mix/l_i) · P''_j / (P'_i + P''_j)` moved to
/// `class_j`; the rest stays on `class_i`. Equal classes give a one-hot.
#[allow(clippy::too_many_arguments)]
pub fn make_soft_label(
    class_i: usize,
    class_j: usize,
    l_mix: usize,
    l_i: usize,
    energy_i: f64,
    energy_jj: f64,
    n_classes: usize,
) -> Result<SoftLabel, MixError> {
    check_class(class_i, n_classes)?;
    check_class(class_j, n_classes)?;
    if l_i == 0 || l_mix > l_i {
        return Err(MixError::InvalidConfig(format!("l_mix {l_mix} exceeds l_i {l_i}")));
    }
    if !(energy_i >= 0.0 && energy_jj >= 0.0) || energy_i + energy_jj == 0.0 {
        return Err(MixError::InvalidConfig(format!(
            "energies ({energy_i}, {energy_jj}) must be nonnegative and not both zero"
        )));
    }
    let w = label_weight(l_mix, l_i, energy_i, energy_jj);
    Ok(two_class_label(class_i, class_j, w, n_classes))
}

/// `(l_mix/l_i) · P''_j / (P'_i + P''_j)`
pub fn label_weight(l_mix: usize, l_i: usize, energy_i: f64, energy_jj: f64) -> f64 {
    (l_mix as f64 / l_i as f64) * (energy_jj / (energy_i + energy_jj))
}

fn two_class_label(class_i: usize, class_j: usize, w: f64, n_classes: usize) -> SoftLabel {
    let mut probs = vec![0.0; n_classes];
    probs[class_j] += w;
    probs[class_i] += 1.0 - w;
    SoftLabel { probs }
}

/// Full energy-adaptive mixup of `base` with a segment of `donor`.
///
/// The label uses the analytic donor energy `P'_i / 10^(snr/10)`.
pub fn eam_augment<R: Rng + ?Sized>(
    base: Labeled<'_>,
    donor: Labeled<'_>,
    n_classes: usize,
    cfg: &MixConfig,
    rng: &mut R,
) -> Result<MixResult, MixError> {
    check_class(base.class, n_classes)?;
    check_class(donor.class, n_classes)?;
    let params = sample_mix_params(cfg, base.wave.len(), donor.wave.len(), rng)?;
    let mixed = mix_signals(base.wave, donor.wave, &params)?;
    let energy_jj = mixed.energy_i / 10f64.powf(params.snr_db / 10.0);
    let label = make_soft_label(
        base.class,
        donor.class,
        params.l_mix,
        base.wave.len(),
        mixed.energy_i,
        energy_jj,
        n_classes,
    )?;
    let weight = label_weight(params.l_mix, base.wave.len(), mixed.energy_i, energy_jj);
    Ok(MixResult {
        mixed: mixed.mixed,
        label,
        achieved_snr_db: mixed.achieved_snr_db,
        params: mixed.params,
        weight,
    })
}

/// Length-adaptive baseline: same mix geometry and random draws as
/// [`eam_augment`], but unit gain and label weight `l_mix / l_i`.
///
/// `achieved_snr_db` reports the natural SNR of the unscaled segments and
/// may be infinite when either one is silent.
pub fn lam_augment<R: Rng + ?Sized>(
    base: Labeled<'_>,
    donor: Labeled<'_>,
    n_classes: usize,
    cfg: &MixConfig,
    rng: &mut R,
) -> Result<MixResult, MixError> {
    check_class(base.class, n_classes)?;
    check_class(donor.class, n_classes)?;
    let params = sample_mix_params(cfg, base.wave.len(), donor.wave.len(), rng)?;
    let mixed = overwrite_mix(base.wave, donor.wave, &params, Some(1.0))?;
    let weight = params.l_mix as f64 / base.wave.len() as f64;
    Ok(MixResult {
        mixed: mixed.mixed,
        label: two_class_label(base.class, donor.class, weight, n_classes),
        achieved_snr_db: mixed.achieved_snr_db,
        params: mixed.params,
        weight,
    })
}

/// Dispatches on `mode`; `MixupMode::None` is rejected.
pub fn augment<R: Rng + ?Sized>(
    mode: MixupMode,
    base: Labeled<'_>,
    donor: Labeled<'_>,
    n_classes: usize,
    cfg: &MixConfig,
    rng: &mut R,
) -> Result<MixResult, MixError> {
    match mode {
        MixupMode::Eam => eam_augment(base, donor, n_classes, cfg, rng),
        MixupMode::Lam => lam_augment(base, donor, n_classes, cfg, rng),
        MixupMode::None => Err(MixError::InvalidConfig("mixup mode 'none' produces no mix".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, amp: f64, rng: &mut ChaCha8Rng) -> Waveform {
        Waveform::new((0..n).map(|_| rng.random_range(-amp..amp)).collect(), 16_000).unwrap()
    }

    fn fixed(frac: f64) -> MixConfig {
        MixConfig {
            mix_frac_min: frac,
            mix_frac_max: frac,
            ..MixConfig::default()
        }
    }

    #[test]
    fn degenerate_fraction_fixes_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let p = sample_mix_params(&fixed(0.5), 100, 100, &mut rng).unwrap();
            assert_eq!(p.l_mix, 50);
            assert!(p.start_i <= 50 && p.start_j <= 50);
            assert!((0.0..=10.0).contains(&p.snr_db));
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let cfg = MixConfig::default();
        let a = sample_mix_params(&cfg, 1000, 700, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = sample_mix_params(&cfg, 1000, 700, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_donor_clamps_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_mix_params(&fixed(0.5), 100, 10, &mut rng).unwrap();
        assert_eq!(p.l_mix, 10);
        assert_eq!(p.start_j, 0);
    }

    #[test]
    fn too_short_base_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_mix_params(&fixed(0.1), 5, 100, &mut rng),
            Err(MixError::SegmentTooShort(_))
        ));
        assert!(matches!(
            sample_mix_params(&fixed(0.5), 100, 0, &mut rng),
            Err(MixError::SegmentTooShort(_))
        ));
    }

    #[test]
    fn config_validation() {
        let bad = MixConfig { snr_db_min: 5.0, snr_db_max: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = MixConfig { mix_frac_min: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = MixConfig { mix_frac_max: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(MixConfig::default().validate().is_ok());
    }

    #[test]
    fn scale_examples() {
        assert_eq!(snr_scale(0.04, 0.04, 0.0).unwrap(), 1.0);
        assert_eq!(snr_scale(0.04, 0.01, 0.0).unwrap(), 2.0);
        assert!(matches!(snr_scale(0.0, 0.1, 0.0), Err(MixError::SilentSegment { .. })));
        assert!(matches!(snr_scale(0.1, 1e-13, 0.0), Err(MixError::SilentSegment { .. })));
    }

    #[test]
    fn scale_at_ten_db_measured_on_a_segment() {
        // Oracle: scale a synthetic segment and measure its power directly.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = noise(4000, 1.0, &mut rng);
        let p = mean_power(raw.samples());
        let norm: Vec<f64> = raw.samples().iter().map(|x| x * (0.04 / p).sqrt()).collect();
        assert!((mean_power(&norm) - 0.04).abs() < 1e-15);
        let s = snr_scale(0.04, 0.04, 10.0).unwrap();
        assert!((s - 0.316_227_766_016_837_94).abs() < 1e-15);
        let scaled: Vec<f64> = norm.iter().map(|x| s * x).collect();
        assert!((mean_power(&scaled) - 0.004).abs() < 1e-15);
    }

    #[test]
    fn silent_donor_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x_i = noise(100, 0.5, &mut rng);
        let x_j = Waveform::new(vec![0.0; 100], 16_000).unwrap();
        let p = MixParams { l_mix: 40, start_i: 10, start_j: 20, snr_db: 3.0 };
        assert!(matches!(mix_signals(&x_i, &x_j, &p), Err(MixError::SilentSegment { .. })));
    }

    #[test]
    fn sample_rate_mismatch_is_rejected() {
        let a = Waveform::new(vec![0.1; 10], 16_000).unwrap();
        let b = Waveform::new(vec![0.1; 10], 8_000).unwrap();
        let p = MixParams { l_mix: 5, start_i: 0, start_j: 0, snr_db: 0.0 };
        assert!(matches!(mix_signals(&a, &b, &p), Err(MixError::SampleRateMismatch(16_000, 8_000))));
    }

    #[test]
    fn self_mix_at_zero_db_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = noise(64, 0.5, &mut rng);
        let p = MixParams { l_mix: 64, start_i: 0, start_j: 0, snr_db: 0.0 };
        let out = mix_signals(&x, &x, &p).unwrap();
        assert_eq!(out.params.scale, 1.0);
        for (a, b) in out.mixed.samples().iter().zip(x.samples()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn measured_snr_matches_request() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x_i = noise(2000, 0.3, &mut rng);
        let x_j = noise(1500, 0.9, &mut rng);
        let p = MixParams { l_mix: 700, start_i: 300, start_j: 200, snr_db: 7.3 };
        let out = mix_signals(&x_i, &x_j, &p).unwrap();
        // Measure on the emitted samples: donor = mixed − base in the region.
        let seg = Segment::new(300, 700);
        let base = x_i.slice(seg).unwrap();
        let donor: Vec<f64> = out.mixed.slice(seg).unwrap().iter().zip(base).map(|(m, b)| m - b).collect();
        let snr = 10.0 * (mean_power(base) / mean_power(&donor)).log10();
        assert!((snr - 7.3).abs() < 1e-6, "{snr}");
        assert!((out.achieved_snr_db - 7.3).abs() < 1e-9);
        assert_eq!(&out.mixed.samples()[..300], &x_i.samples()[..300]);
        assert_eq!(&out.mixed.samples()[1000..], &x_i.samples()[1000..]);
    }

    #[test]
    fn label_examples() {
        let l = make_soft_label(0, 2, 50, 100, 0.02, 0.02, 4).unwrap();
        assert_eq!(l.probs(), &[0.75, 0.0, 0.25, 0.0]);
        let l = make_soft_label(1, 1, 50, 100, 0.02, 0.02, 4).unwrap();
        assert_eq!(l.probs(), &[0.0, 1.0, 0.0, 0.0]);
        let l = make_soft_label(0, 1, 40, 100, 0.03, 0.01, 2).unwrap();
        assert!((l.probs()[1] - 0.1).abs() < 1e-15);
        // Cross-check: 0.01 = 0.03 / 10^(snr/10) at snr = 10·log10(3).
        let snr = 10.0 * 3f64.log10();
        assert!((snr - 4.771).abs() < 1e-3);
        assert!((0.03 / 10f64.powf(snr / 10.0) - 0.01).abs() < 1e-15);
        assert!(matches!(
            make_soft_label(0, 4, 1, 2, 1.0, 1.0, 4),
            Err(MixError::InvalidClass { class: 4, .. })
        ));
        assert!(make_soft_label(0, 1, 3, 2, 1.0, 1.0, 4).is_err());
        assert!(make_soft_label(0, 1, 1, 2, 0.0, 0.0, 4).is_err());
    }

    #[test]
    fn degenerate_eam_doubles_with_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = noise(80, 0.5, &mut rng);
        let cfg = MixConfig { snr_db_min: 0.0, snr_db_max: 0.0, mix_frac_min: 1.0, mix_frac_max: 1.0, rng_seed: 0 };
        let r = eam_augment(Labeled { wave: &x, class: 2 }, Labeled { wave: &x, class: 2 }, 4, &cfg, &mut rng).unwrap();
        assert_eq!(r.label.probs(), &[0.0, 0.0, 1.0, 0.0]);
        for (a, b) in r.mixed.samples().iter().zip(x.samples()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn eam_is_bit_reproducible() {
        let mut g = ChaCha8Rng::seed_from_u64(8);
        let a = noise(3000, 0.4, &mut g);
        let b = noise(2500, 0.7, &mut g);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            eam_augment(Labeled { wave: &a, class: 0 }, Labeled { wave: &b, class: 3 }, 4, &MixConfig::default(), &mut rng).unwrap()
        };
        let (r1, r2) = (run(), run());
        assert_eq!(r1, r2);
        assert!(r1.mixed.samples().iter().zip(r2.mixed.samples()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn lam_uses_length_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = noise(100, 0.4, &mut rng);
        let b = Waveform::new(vec![0.0; 100], 16_000).unwrap();
        // Silent donor is fine for LAM.
        let r = lam_augment(Labeled { wave: &a, class: 0 }, Labeled { wave: &b, class: 1 }, 2, &fixed(0.5), &mut rng).unwrap();
        assert_eq!(r.weight, 0.5);
        assert_eq!(r.label.probs(), &[0.5, 0.5]);
        assert_eq!(r.params.scale, 1.0);
        assert_eq!(r.mixed, a);
        // Very short mix tends to a one-hot on the base class.
        let long = noise(100_000, 0.4, &mut rng);
        let tiny = MixConfig { mix_frac_min: 1e-5, mix_frac_max: 1e-5, ..Default::default() };
        let r = lam_augment(Labeled { wave: &long, class: 0 }, Labeled { wave: &long, class: 1 }, 2, &tiny, &mut rng).unwrap();
        assert_eq!(r.params.l_mix, 1);
        assert!(r.label.probs()[0] > 1.0 - 1e-4);
    }

    #[test]
    fn eam_and_lam_share_geometry_but_not_labels() {
        let mut g = ChaCha8Rng::seed_from_u64(10);
        let a = noise(4000, 0.2, &mut g);
        let b = noise(3000, 0.8, &mut g);
        let cfg = MixConfig::default();
        let e = eam_augment(Labeled { wave: &a, class: 0 }, Labeled { wave: &b, class: 1 }, 2, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let l = lam_augment(Labeled { wave: &a, class: 0 }, Labeled { wave: &b, class: 1 }, 2, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!((e.params.l_mix, e.params.start_i, e.params.start_j), (l.params.l_mix, l.params.start_i, l.params.start_j));
        let changed = |r: &MixResult| -> Vec<usize> {
            (0..a.len()).filter(|&n| r.mixed.samples()[n] != a.samples()[n]).collect()
        };
        let (ce, cl) = (changed(&e), changed(&l));
        assert!(ce.iter().all(|n| (e.params.start_i..e.params.start_i + e.params.l_mix).contains(n)));
        assert!(cl.iter().all(|n| (l.params.start_i..l.params.start_i + l.params.l_mix).contains(n)));
        assert_ne!(e.label, l.label);
        assert!(e.weight < l.weight);
    }

    #[test]
    fn weight_decreases_with_snr() {
        let mut last = f64::INFINITY;
        for snr in [-5.0, 0.0, 2.5, 5.0, 10.0, 20.0] {
            let ejj = 0.05 / 10f64.powf(snr / 10.0);
            let w = label_weight(300, 1000, 0.05, ejj);
            assert!(w < last && w > 0.0 && w <= 0.3);
            last = w;
        }
    }
}
