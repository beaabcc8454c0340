//! Synthetic cohorts with stage-graded class signal.
//!
//! Each subject has a latent sub-type from the configured priors. Two latent
//! axes drive the observations: the clinical phenotype (typical memory-led,
//! atypical posterior/frontal, or none) and in-vivo evidence of pathology
//! (present for every AD sub-type). Tabular fields mostly reflect the
//! phenotype and only faintly the evidence; MRI shows region-specific atrophy
//! per phenotype plus a weak evidence pattern; PET shows the evidence axis
//! strongly. Pre-clinical AD and normal controls therefore separate reliably
//! only once PET is acquired.
//!
//! A per-subject disease burden scales every class pattern; `coupling` sets
//! how much of that variation is shared across modalities rather than drawn
//! independently per modality.

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DementiaLevel, Gender, SubType, SubjectRecord, Tabular, Volume};
use crate::error::{Error, Result};

/// Class-signal multipliers per modality; 0 removes every label dependence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalStrengths {
    pub tabular: f64,
    pub mri: f64,
    pub pet: f64,
}

impl Default for SignalStrengths {
    fn default() -> Self {
        Self {
            tabular: 2.0,
            mri: 3.0,
            pet: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    /// Priors in sub-type code order; normalised internally.
    pub class_priors: [f64; 4],
    pub volume_shape: [usize; 3],
    pub signal: SignalStrengths,
    /// Independent probability that each tabular field is missing.
    pub missingness: f64,
    /// Fractions of subjects with tabular, MRI and PET data (nested).
    pub availability: [f64; 3],
    /// Standard deviation of voxel noise.
    pub voxel_noise: f64,
    /// Fraction of burden variance shared across modalities, in [0, 1].
    pub coupling: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 2000,
            class_priors: [0.25; 4],
            volume_shape: [8, 8, 8],
            signal: SignalStrengths::default(),
            missingness: 0.1,
            availability: [1.0, 4842.0 / 8280.0, 2336.0 / 8280.0],
            voxel_noise: 1.0,
            coupling: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_subjects == 0 {
            return bad("n_subjects must be positive".into());
        }
        if self.volume_shape.contains(&0) {
            return bad(format!("volume_shape must be positive, got {:?}", self.volume_shape));
        }
        if self.class_priors.iter().any(|p| !p.is_finite() || *p < 0.0) || self.class_priors.iter().sum::<f64>() <= 0.0
        {
            return bad(format!(
                "class_priors must be non-negative with a positive sum, got {:?}",
                self.class_priors
            ));
        }
        for (name, v) in [
            ("tabular", self.signal.tabular),
            ("mri", self.signal.mri),
            ("pet", self.signal.pet),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("signal.{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.missingness) {
            return bad(format!("missingness must lie in [0, 1], got {}", self.missingness));
        }
        if self.availability.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad(format!(
                "availability fractions must lie in [0, 1], got {:?}",
                self.availability
            ));
        }
        let [tab, mri, pet] = self.availability;
        if tab != 1.0 {
            return bad(format!(
                "every synthetic subject carries tabular data; availability[0] must be 1, got {tab}"
            ));
        }
        if pet > mri {
            return bad(format!("availability must be nested (pet {pet} > mri {mri})"));
        }
        if !self.voxel_noise.is_finite() || self.voxel_noise < 0.0 {
            return bad(format!(
                "voxel_noise must be finite and non-negative, got {}",
                self.voxel_noise
            ));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return bad(format!("coupling must lie in [0, 1], got {}", self.coupling));
        }
        Ok(())
    }

    /// Subject counts with MRI and with PET.
    pub fn tier_counts(&self) -> (usize, usize) {
        let n = self.n_subjects as f64;
        let mri = (n * self.availability[1]).round() as usize;
        let pet = ((n * self.availability[2]).round() as usize).min(mri);
        (mri, pet)
    }
}

/// Latent phenotype axis.
#[derive(Clone, Copy, PartialEq)]
enum Phenotype {
    Memory,
    NonMemory,
    None,
}

fn phenotype(label: SubType) -> Phenotype {
    match label {
        SubType::TypicalAd => Phenotype::Memory,
        SubType::AtypicalAd => Phenotype::NonMemory,
        SubType::PreclinicalAd | SubType::NormalControl => Phenotype::None,
    }
}

/// Fractional centres of the pattern regions, (z, y, x).
const MEMORY_REGION: [f64; 3] = [0.35, 0.7, 0.3];
const POSTERIOR_REGION: [f64; 3] = [0.6, 0.2, 0.75];
const EVIDENCE_REGION: [f64; 3] = [0.75, 0.55, 0.45];
const REGION_WIDTH: f64 = 0.2;

struct Blob {
    centre: [f64; 3],
    amplitude: f64,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Shared component of one subject's burden.
#[derive(Clone, Copy)]
struct Burden {
    shared: f64,
    coupling: f64,
}

impl Burden {
    /// Multiplier around 1 with standard deviation 0.25.
    fn draw(self, rng: &mut ChaCha8Rng) -> f64 {
        let own = gauss(rng);
        (1.0 + 0.25 * (self.coupling.sqrt() * self.shared + (1.0 - self.coupling).sqrt() * own)).max(0.0)
    }
}

fn render_volume(shape: [usize; 3], blobs: &[Blob], noise: f64, rng: &mut ChaCha8Rng) -> Volume {
    let [d, h, w] = shape;
    let mut data = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [
                    (z as f64 + 0.5) / d as f64,
                    (y as f64 + 0.5) / h as f64,
                    (x as f64 + 0.5) / w as f64,
                ];
                // Smooth anatomy: bright centre falling off towards the edge.
                let r2: f64 = p.iter().map(|c| (c - 0.5) * (c - 0.5)).sum();
                let mut v = 2.0 * (-r2 / 0.18).exp();
                for b in blobs {
                    let q2: f64 = p.iter().zip(b.centre).map(|(c, m)| (c - m) * (c - m)).sum();
                    v += b.amplitude * (-q2 / (2.0 * REGION_WIDTH * REGION_WIDTH)).exp();
                }
                v += noise * gauss(rng);
                data.push(v as f32);
            }
        }
    }
    Volume::new(shape, data).expect("shape matches generated data")
}

fn tabular(label: SubType, s: f64, missing: f64, burden: Burden, rng: &mut ChaCha8Rng) -> Tabular {
    let evidence = if label.has_in_vivo_evidence() { 1.0 } else { 0.0 };
    let (severity, age_shift, edu_shift) = match label {
        SubType::TypicalAd => (1.6, 3.0, 1.0),
        SubType::AtypicalAd => (1.3, -5.0, 1.0),
        SubType::PreclinicalAd => (0.25, 2.0, 0.0),
        SubType::NormalControl => (0.0, 0.0, 0.0),
    };

    let load = burden.draw(rng);
    let z = s * severity * load + 0.6 * gauss(rng);
    let level = match z {
        z if z < 0.4 => DementiaLevel::Cdr0,
        z if z < 0.9 => DementiaLevel::Cdr05,
        z if z < 1.5 => DementiaLevel::Cdr1,
        z if z < 2.1 => DementiaLevel::Cdr2,
        _ => DementiaLevel::Cdr3,
    };
    let age = (72.0 + s * age_shift + 6.0 * gauss(rng)).round().clamp(50.0, 95.0) as u32;
    let education = (14.0 - s * edu_shift + 3.0 * gauss(rng)).round().clamp(0.0, 25.0) as u32;
    let gender = if rng.random_bool(0.5) {
        Gender::Female
    } else {
        Gender::Male
    };
    let atypical = if label == SubType::AtypicalAd { 1.0 } else { 0.0 };
    let heart_attack = rng.random_bool(0.1);
    let hypertension = rng.random_bool((0.3 + 0.1 * s * evidence).clamp(0.0, 1.0));
    let stroke = rng.random_bool(0.05);
    let alcohol = rng.random_bool(0.08);
    let psychiatric = rng.random_bool((0.1 + 0.15 * s * atypical).clamp(0.0, 1.0));
    let blood = ((1.0 + 0.35 * s * evidence * load + 0.4 * gauss(rng)) * 10.0).round() / 10.0;

    // Missingness draws happen for every field so the stream stays aligned.
    let mut keep = [true; 10];
    for k in keep.iter_mut() {
        *k = !rng.random_bool(missing);
    }
    if keep.iter().all(|k| !k) {
        keep[0] = true;
    }
    let pick = |i: usize| keep[i];
    Tabular {
        age: pick(0).then_some(age),
        education: pick(1).then_some(education),
        gender: pick(2).then_some(gender),
        heart_attack: pick(3).then_some(heart_attack),
        hypertension: pick(4).then_some(hypertension),
        stroke: pick(5).then_some(stroke),
        alcohol_abuse: pick(6).then_some(alcohol),
        psychiatric_disorder: pick(7).then_some(psychiatric),
        blood_test: pick(8).then_some(blood),
        dementia_level: pick(9).then_some(level),
    }
}

fn mri(label: SubType, cfg: &SynthConfig, burden: Burden, rng: &mut ChaCha8Rng) -> Volume {
    let s = cfg.signal.mri;
    let mut blobs = Vec::new();
    match phenotype(label) {
        Phenotype::Memory => blobs.push(Blob {
            centre: MEMORY_REGION,
            amplitude: -1.5 * s * burden.draw(rng),
        }),
        Phenotype::NonMemory => blobs.push(Blob {
            centre: POSTERIOR_REGION,
            amplitude: -1.5 * s * burden.draw(rng),
        }),
        Phenotype::None => {}
    }
    if label.has_in_vivo_evidence() {
        blobs.push(Blob {
            centre: EVIDENCE_REGION,
            amplitude: -0.4 * s * burden.draw(rng),
        });
    }
    render_volume(cfg.volume_shape, &blobs, cfg.voxel_noise, rng)
}

fn pet(label: SubType, cfg: &SynthConfig, burden: Burden, rng: &mut ChaCha8Rng) -> Volume {
    let s = cfg.signal.pet;
    let mut blobs = Vec::new();
    if label.has_in_vivo_evidence() {
        blobs.push(Blob {
            centre: EVIDENCE_REGION,
            amplitude: 2.0 * s * burden.draw(rng),
        });
    }
    match phenotype(label) {
        Phenotype::Memory => blobs.push(Blob {
            centre: MEMORY_REGION,
            amplitude: 0.5 * s * burden.draw(rng),
        }),
        Phenotype::NonMemory => blobs.push(Blob {
            centre: POSTERIOR_REGION,
            amplitude: 0.5 * s * burden.draw(rng),
        }),
        Phenotype::None => {}
    }
    render_volume(cfg.volume_shape, &blobs, cfg.voxel_noise, rng)
}

/// Generates `cfg.n_subjects` records, deterministic in `(cfg, seed)`.
pub fn synthesize_cohort(cfg: &SynthConfig, seed: u64) -> Result<Vec<SubjectRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = WeightedIndex::new(cfg.class_priors).map_err(|e| Error::Config(format!("class_priors: {e}")))?;

    let n = cfg.n_subjects;
    let (n_mri, n_pet) = cfg.tier_counts();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut tier = vec![1usize; n];
    for (rank, &i) in order.iter().enumerate() {
        tier[i] = if rank < n_pet {
            3
        } else if rank < n_mri {
            2
        } else {
            1
        };
    }

    let width = n.to_string().len().max(4);
    let mut records = Vec::with_capacity(n);
    for (i, &t) in tier.iter().enumerate() {
        let label = SubType::ALL[classes.sample(&mut rng)];
        let burden = Burden {
            shared: gauss(&mut rng),
            coupling: cfg.coupling,
        };
        let tab = tabular(label, cfg.signal.tabular, cfg.missingness, burden, &mut rng);
        let mri = (t >= 2).then(|| mri(label, cfg, burden, &mut rng));
        let pet = (t >= 3).then(|| pet(label, cfg, burden, &mut rng));
        records.push(SubjectRecord {
            id: format!("syn{i:0width$}"),
            label,
            tabular: tab,
            mri,
            pet,
        });
    }
    Ok(records)
}
