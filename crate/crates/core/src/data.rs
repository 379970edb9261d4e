//! Procedural class-structured image datasets, base/new splits and shifted copies.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::vocab::CLASS_NAMES;
use crate::encoders::Image;
use crate::error::{Error, Result};
use crate::seeding::{self, role};

/// Number of cosine components per prototype.
pub const PROTOTYPE_WAVES: usize = 3;
/// Rejection draws per prototype when keeping classes apart.
const PROTOTYPE_TRIES: usize = 64;
/// Minimum RMS pixel distance between prototypes of one family.
const MIN_PROTOTYPE_RMS: f64 = 0.12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftKind {
    #[default]
    None,
    Brightness,
    Noise,
    Invert,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 4] = [
        ShiftKind::None,
        ShiftKind::Brightness,
        ShiftKind::Noise,
        ShiftKind::Invert,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShiftKind::None => "none",
            ShiftKind::Brightness => "brightness",
            ShiftKind::Noise => "noise",
            ShiftKind::Invert => "invert",
        }
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShiftKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown shift kind {s:?}")))
    }
}

/// A pixel transform and its strength. `invert` ignores the magnitude.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shift {
    pub kind: ShiftKind,
    #[serde(default)]
    pub magnitude: f64,
}

impl Shift {
    pub const NONE: Shift = Shift {
        kind: ShiftKind::None,
        magnitude: 0.0,
    };

    pub fn new(kind: ShiftKind, magnitude: f64) -> Self {
        Self { kind, magnitude }
    }

    /// `kind` or `kind:magnitude`, e.g. `noise:0.3`.
    pub fn parse(s: &str) -> Result<Self> {
        let (k, m) = match s.split_once(':') {
            Some((k, m)) => (
                k,
                m.parse::<f64>()
                    .map_err(|_| Error::input(format!("bad shift magnitude in {s:?}")))?,
            ),
            None => (s, 0.0),
        };
        let shift = Shift::new(k.parse()?, m);
        shift.validate()?;
        Ok(shift)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.magnitude.is_finite() {
            return Err(Error::input("shift magnitude must be finite"));
        }
        if self.kind == ShiftKind::Noise && self.magnitude < 0.0 {
            return Err(Error::input("noise shift magnitude must be non-negative"));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.kind {
            ShiftKind::None | ShiftKind::Invert => self.kind.to_string(),
            _ => format!("{}:{}", self.kind, self.magnitude),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub n_classes: usize,
    pub prototypes_seed: u64,
    /// Seeds the per-sample noise independently of the prototypes.
    pub sample_seed: u64,
    pub samples_per_class: usize,
    pub noise_std: f64,
    pub family_id: u64,
    pub image_side: usize,
    pub channels: usize,
    pub shift: Shift,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            prototypes_seed: 0,
            sample_seed: 0,
            samples_per_class: 64,
            noise_std: 0.35,
            family_id: 0,
            image_side: 16,
            channels: 1,
            shift: Shift::NONE,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 4 {
            return Err(Error::input(format!(
                "need at least 4 classes for a base/new split, got {}",
                self.n_classes
            )));
        }
        let last = (self.family_id as usize + 1)
            .checked_mul(self.n_classes)
            .unwrap_or(usize::MAX);
        if last > CLASS_NAMES.len() {
            return Err(Error::input(format!(
                "family {} with {} classes exceeds the {}-word class vocabulary",
                self.family_id,
                self.n_classes,
                CLASS_NAMES.len()
            )));
        }
        if self.samples_per_class == 0 || self.image_side == 0 || self.channels == 0 {
            return Err(Error::input(
                "samples_per_class, image_side and channels must be positive",
            ));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::input("noise_std must be finite and non-negative"));
        }
        self.shift.validate()
    }

    pub fn class_names(&self) -> Vec<String> {
        let start = self.family_id as usize * self.n_classes;
        CLASS_NAMES[start..start + self.n_classes]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

/// A family of datasets sharing shape and noise, differing in `family_id`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSpec {
    pub families: usize,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub noise_std: f64,
    pub prototypes_seed: u64,
    pub sample_seed: u64,
    pub image_side: usize,
    pub channels: usize,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        let d = SyntheticDatasetSpec::default();
        Self {
            families: 6,
            n_classes: d.n_classes,
            samples_per_class: d.samples_per_class,
            noise_std: d.noise_std,
            prototypes_seed: d.prototypes_seed,
            sample_seed: d.sample_seed,
            image_side: d.image_side,
            channels: d.channels,
        }
    }
}

impl SuiteSpec {
    pub fn family(&self, family_id: u64) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            n_classes: self.n_classes,
            prototypes_seed: self.prototypes_seed,
            sample_seed: self.sample_seed,
            samples_per_class: self.samples_per_class,
            noise_std: self.noise_std,
            family_id,
            image_side: self.image_side,
            channels: self.channels,
            shift: Shift::NONE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.families == 0 {
            return Err(Error::input("suite needs at least one family"));
        }
        self.family(self.families as u64 - 1).validate()
    }

    pub fn specs(&self) -> Vec<SyntheticDatasetSpec> {
        (0..self.families as u64).map(|f| self.family(f)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Unique within its dataset: `label * samples_per_class + index`.
    pub id: usize,
    pub image: Image,
    pub label: usize,
    pub class_name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticDatasetSpec,
    pub class_names: Vec<String>,
    pub prototypes: Vec<Image>,
    pub samples: Vec<Sample>,
}

/// One prototype: a sum of seeded 2-D cosines rescaled into `[0, 1]`.
fn draw_prototype<R: Rng + ?Sized>(side: usize, channels: usize, rng: &mut R) -> Vec<f64> {
    let mut pixels = vec![0.0; side * side * channels];
    for c in 0..channels {
        let mut waves = Vec::with_capacity(PROTOTYPE_WAVES);
        for _ in 0..PROTOTYPE_WAVES {
            let amp = rng.random_range(0.4..1.0);
            let fy = rng.random_range(-3.0..3.0);
            let fx = rng.random_range(-3.0..3.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            waves.push((amp, fy, fx, phase));
        }
        let total: f64 = waves.iter().map(|w| w.0).sum();
        for y in 0..side {
            for x in 0..side {
                let v: f64 = waves
                    .iter()
                    .map(|&(a, fy, fx, ph)| {
                        a * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) / side as f64
                            + ph)
                            .cos()
                    })
                    .sum();
                pixels[(y * side + x) * channels + c] = 0.5 + 0.5 * v / total;
            }
        }
    }
    pixels
}

fn rms_distance(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

pub fn generate_prototypes(spec: &SyntheticDatasetSpec) -> Result<Vec<Image>> {
    spec.validate()?;
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    for class in 0..spec.n_classes {
        let mut rng = seeding::rng(&[
            role::PROTOTYPE,
            spec.prototypes_seed,
            spec.family_id,
            class as u64,
        ]);
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..PROTOTYPE_TRIES {
            let cand = draw_prototype(spec.image_side, spec.channels, &mut rng);
            let nearest = protos
                .iter()
                .map(|p| rms_distance(p, &cand))
                .fold(f64::INFINITY, f64::min);
            if nearest >= MIN_PROTOTYPE_RMS {
                best = Some((nearest, cand));
                break;
            }
            if best.as_ref().is_none_or(|(d, _)| nearest > *d) {
                best = Some((nearest, cand));
            }
        }
        protos.push(best.map(|(_, p)| p).expect("at least one draw"));
    }
    protos
        .into_iter()
        .map(|p| Image::new(spec.image_side, spec.channels, p))
        .collect()
}

/// Builds every sample as prototype plus clamped Gaussian pixel noise, then
/// applies the spec's shift.
pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    let prototypes = generate_prototypes(spec)?;
    let class_names = spec.class_names();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::input(e.to_string()))?;
    let mut samples = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    for (label, proto) in prototypes.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            let id = label * spec.samples_per_class + i;
            let mut rng = seeding::rng(&[
                role::SAMPLE_NOISE,
                spec.sample_seed,
                spec.prototypes_seed,
                spec.family_id,
                id as u64,
            ]);
            let pixels = proto
                .pixels
                .iter()
                .map(|&p| {
                    if spec.noise_std == 0.0 {
                        p
                    } else {
                        (p + noise.sample(&mut rng)).clamp(0.0, 1.0)
                    }
                })
                .collect();
            samples.push(Sample {
                id,
                image: Image::new(spec.image_side, spec.channels, pixels)?,
                label,
                class_name: class_names[label].clone(),
            });
        }
    }
    let ds = Dataset {
        spec: SyntheticDatasetSpec {
            shift: Shift::NONE,
            ..spec.clone()
        },
        class_names,
        prototypes,
        samples,
    };
    apply_shift(&ds, spec.shift)
}

/// Applies a pixel transform to every sample, clamping into `[0, 1]`. Labels
/// and ids are unchanged. Shifts compose: the recorded shift is the last one.
pub fn apply_shift(ds: &Dataset, shift: Shift) -> Result<Dataset> {
    shift.validate()?;
    let mut out = ds.clone();
    out.spec.shift = shift;
    if shift.kind == ShiftKind::None {
        return Ok(out);
    }
    let normal = match shift.kind {
        ShiftKind::Noise if shift.magnitude > 0.0 => {
            Some(Normal::new(0.0, shift.magnitude).map_err(|e| Error::input(e.to_string()))?)
        }
        _ => None,
    };
    for s in &mut out.samples {
        let mut rng = seeding::rng(&[
            role::SHIFT,
            ds.spec.sample_seed,
            ds.spec.prototypes_seed,
            ds.spec.family_id,
            s.id as u64,
        ]);
        for p in &mut s.image.pixels {
            let v = match shift.kind {
                ShiftKind::None => *p,
                ShiftKind::Brightness => *p + shift.magnitude,
                ShiftKind::Noise => match &normal {
                    Some(n) => *p + n.sample(&mut rng),
                    None => *p,
                },
                ShiftKind::Invert => 1.0 - *p,
            };
            *p = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn sample(&self, id: usize) -> Result<&Sample> {
        self.samples
            .get(id)
            .filter(|s| s.id == id)
            .ok_or_else(|| Error::input(format!("no sample with id {id}")))
    }

    /// SHA-256 over labels and little-endian pixel bytes, in sample order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update((s.id as u64).to_le_bytes());
            h.update((s.label as u64).to_le_bytes());
            for p in &s.image.pixels {
                h.update(p.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            spec: self.spec.clone(),
            class_names: self.class_names.clone(),
            n_samples: self.samples.len(),
            samples_per_class: self.spec.samples_per_class,
            pixel_checksum: self.checksum(),
        }
    }

    /// Writes `pixels.bin` (little-endian f64, sample-major), `labels.bin`
    /// (little-endian u32) and `manifest.json` into `dir`.
    pub fn export_raw(&self, dir: &Path) -> Result<DatasetManifest> {
        std::fs::create_dir_all(dir)?;
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for s in &self.samples {
            for p in &s.image.pixels {
                pixels.extend_from_slice(&p.to_le_bytes());
            }
            labels.extend_from_slice(&(s.label as u32).to_le_bytes());
        }
        std::fs::write(dir.join("pixels.bin"), pixels)?;
        std::fs::write(dir.join("labels.bin"), labels)?;
        let m = self.manifest();
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SyntheticDatasetSpec,
    pub class_names: Vec<String>,
    pub n_samples: usize,
    pub samples_per_class: usize,
    pub pixel_checksum: String,
}

/// Which classes are seen in training and which samples go where.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub base_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
    pub k: usize,
    /// Sample ids, `k` per base class.
    pub train: Vec<usize>,
    /// Held-out samples of base classes.
    pub eval_base: Vec<usize>,
    /// All samples of new classes.
    pub eval_new: Vec<usize>,
    pub split_seed: u64,
}

fn split_classes(
    ds: &Dataset,
    base: Vec<usize>,
    new: Vec<usize>,
    k: usize,
    split_seed: u64,
) -> Result<SplitPlan> {
    let spc = ds.spec.samples_per_class;
    if k > spc {
        return Err(Error::input(format!(
            "K = {k} exceeds {spc} samples per class"
        )));
    }
    let mut train = Vec::with_capacity(base.len() * k);
    let mut eval_base = Vec::new();
    for &c in &base {
        let mut ids: Vec<usize> = (c * spc..(c + 1) * spc).collect();
        ids.shuffle(&mut seeding::rng(&[
            role::SPLIT,
            split_seed,
            ds.spec.family_id,
            c as u64,
        ]));
        train.extend_from_slice(&ids[..k]);
        eval_base.extend_from_slice(&ids[k..]);
    }
    let eval_new = new.iter().flat_map(|&c| c * spc..(c + 1) * spc).collect();
    Ok(SplitPlan {
        base_classes: base,
        new_classes: new,
        k,
        train,
        eval_base,
        eval_new,
        split_seed,
    })
}

/// Seeded class permutation: first half base, second half new.
pub fn make_split(ds: &Dataset, k: usize, split_seed: u64) -> Result<SplitPlan> {
    let n = ds.n_classes();
    if n < 4 {
        return Err(Error::input(format!("need at least 4 classes, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seeding::rng(&[
        role::SPLIT,
        split_seed,
        ds.spec.family_id,
    ]));
    let half = n / 2;
    let mut base = perm[..half].to_vec();
    let mut new = perm[half..].to_vec();
    base.sort_unstable();
    new.sort_unstable();
    split_classes(ds, base, new, k, split_seed)
}

/// Every class is a base class; used as the source of transfer experiments.
pub fn make_full_split(ds: &Dataset, k: usize, split_seed: u64) -> Result<SplitPlan> {
    split_classes(ds, (0..ds.n_classes()).collect(), Vec::new(), k, split_seed)
}

impl SplitPlan {
    /// Checks the partition and the base-only training guarantee.
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        let base: BTreeSet<_> = self.base_classes.iter().copied().collect();
        let new: BTreeSet<_> = self.new_classes.iter().copied().collect();
        if !base.is_disjoint(&new) {
            return Err(Error::input("base and new classes overlap"));
        }
        if base.len() + new.len() != ds.n_classes()
            || base.union(&new).any(|&c| c >= ds.n_classes())
        {
            return Err(Error::input(
                "base and new classes do not cover the dataset",
            ));
        }
        let train: BTreeSet<_> = self.train.iter().copied().collect();
        for &id in &self.train {
            let s = ds.sample(id)?;
            if !base.contains(&s.label) {
                return Err(Error::input(format!(
                    "training sample {id} is from a new class"
                )));
            }
        }
        if self
            .eval_base
            .iter()
            .chain(&self.eval_new)
            .any(|id| train.contains(id))
        {
            return Err(Error::input("evaluation set overlaps training samples"));
        }
        Ok(())
    }

    /// Class names of the base classes, in label order within the split.
    pub fn base_names(&self, ds: &Dataset) -> Vec<String> {
        self.base_classes
            .iter()
            .map(|&c| ds.class_names[c].clone())
            .collect()
    }

    pub fn new_names(&self, ds: &Dataset) -> Vec<String> {
        self.new_classes
            .iter()
            .map(|&c| ds.class_names[c].clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise: f64) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            samples_per_class: 20,
            noise_std: noise,
            ..Default::default()
        }
    }

    #[test]
    fn zero_noise_samples_equal_prototype() {
        let ds = generate_dataset(&small(0.0)).unwrap();
        for s in &ds.samples {
            assert_eq!(s.image, ds.prototypes[s.label]);
        }
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let a = generate_dataset(&small(0.2)).unwrap();
        let b = generate_dataset(&small(0.2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        assert!(a
            .samples
            .iter()
            .all(|s| s.image.pixels.iter().all(|p| (0.0..=1.0).contains(p))));
        let mut other = small(0.2);
        other.sample_seed = 1;
        let c = generate_dataset(&other).unwrap();
        assert_eq!(a.prototypes, c.prototypes);
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn spec_validation() {
        let mut s = small(0.1);
        s.n_classes = 3;
        assert!(generate_dataset(&s).is_err());
        s.n_classes = 8;
        s.family_id = 6;
        assert!(matches!(generate_dataset(&s), Err(Error::Input(_))));
        s.family_id = 5;
        assert!(generate_dataset(&s).is_ok());
    }

    #[test]
    fn split_halves_classes_and_respects_k() {
        let ds = generate_dataset(&small(0.1)).unwrap();
        let plan = make_split(&ds, 16, 3).unwrap();
        assert_eq!(plan.base_classes.len(), 4);
        assert_eq!(plan.new_classes.len(), 4);
        assert_eq!(plan.train.len(), 4 * 16);
        plan.validate(&ds).unwrap();
        for &c in &plan.base_classes {
            let n = plan
                .train
                .iter()
                .filter(|&&id| ds.samples[id].label == c)
                .count();
            assert_eq!(n, 16);
        }
        assert!(matches!(make_split(&ds, 21, 3), Err(Error::Input(_))));
        assert_eq!(make_split(&ds, 16, 3).unwrap(), plan);
    }

    #[test]
    fn shift_arithmetic() {
        let ds = generate_dataset(&small(0.1)).unwrap();
        assert_eq!(apply_shift(&ds, Shift::NONE).unwrap().samples, ds.samples);
        let mut one = ds.clone();
        one.samples.truncate(1);
        one.samples[0].image.pixels[0] = 0.9;
        let b = apply_shift(&one, Shift::new(ShiftKind::Brightness, 0.2)).unwrap();
        assert_eq!(b.samples[0].image.pixels[0], 1.0);
        let inv = apply_shift(
            &apply_shift(&ds, Shift::new(ShiftKind::Invert, 0.0)).unwrap(),
            Shift::new(ShiftKind::Invert, 0.0),
        )
        .unwrap();
        for (a, b) in ds.samples.iter().zip(&inv.samples) {
            assert_eq!(a.label, b.label);
            for (x, y) in a.image.pixels.iter().zip(&b.image.pixels) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let z = apply_shift(&ds, Shift::new(ShiftKind::Noise, 0.0)).unwrap();
        assert_eq!(z.samples, ds.samples);
        assert!("blur".parse::<ShiftKind>().is_err());
        assert_eq!(
            Shift::parse("noise:0.3").unwrap(),
            Shift::new(ShiftKind::Noise, 0.3)
        );
        assert!(Shift::parse("noise:-1").is_err());
    }
}
