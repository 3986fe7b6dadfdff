//! Seedable synthetic brain phantoms: a smooth ellipsoid "brain" with
//! Gaussian noise in both channels and, for lesioned classes, one ball
//! lesion placed fully inside a fixed territory region. DWI is raised and
//! ADC lowered inside the lesion so the classes are separable by design.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    ImageRecord, InfarctionType, RegistryEntry, SeverityClass, Sex, Split, StructuredFinding,
    TerritoryLabel,
};
use crate::error::{Error, Result};
use crate::seeding::stream_rng;
use crate::volume::Volume;

/// Multiplier applied to both lesion gains for "strong" severity.
pub const STRONG_GAIN_FACTOR: f64 = 1.5;

/// Brain ellipsoid semi-axes as a fraction of the grid extents. Shared by
/// `territory_mask` and the generator so masks always sit inside the brain.
pub const BRAIN_AXIS_FRACTION: f64 = 0.475;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    /// Grid extents (x, y, z).
    pub dims: [usize; 3],
    /// Voxel spacing in mm along (x, y, z).
    pub spacing: [f64; 3],
    /// Brain ellipsoid semi-axes in voxels; must cover the territory
    /// geometry, i.e. be at least `BRAIN_AXIS_FRACTION * dims`.
    pub brain_semi_axes: [f64; 3],
    /// Standard deviation of the additive Gaussian noise inside the brain.
    pub noise_sigma: f64,
    /// Lesion radius range in voxels; small infarction types draw from the
    /// lower half, large territorial types from the upper half.
    pub lesion_radius_range: (f64, f64),
    /// DWI intensity added inside the lesion for "mild" severity (> 0).
    pub dwi_lesion_gain: f64,
    /// ADC intensity added inside the lesion for "mild" severity (< 0).
    pub adc_lesion_gain: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let dims = [32, 32, 16];
        PhantomConfig {
            dims,
            spacing: [2.0, 2.0, 4.0],
            brain_semi_axes: default_semi_axes(dims),
            noise_sigma: 0.012,
            lesion_radius_range: (2.5, 4.0),
            dwi_lesion_gain: 1.5,
            adc_lesion_gain: -0.75,
            seed: 0,
        }
    }
}

pub fn default_semi_axes(dims: [usize; 3]) -> [f64; 3] {
    [
        BRAIN_AXIS_FRACTION * dims[0] as f64,
        BRAIN_AXIS_FRACTION * dims[1] as f64,
        BRAIN_AXIS_FRACTION * dims[2] as f64,
    ]
}

impl PhantomConfig {
    /// Checks signs, ranges and that the largest lesion fits strictly inside
    /// every territory mask.
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|d| *d < 8) {
            return Err(Error::Config(format!(
                "phantom dims {:?} too small, need at least 8 per axis",
                self.dims
            )));
        }
        if self.dwi_lesion_gain <= 0.0 {
            return Err(Error::Config("dwi_lesion_gain must be > 0".into()));
        }
        if self.adc_lesion_gain >= 0.0 {
            return Err(Error::Config("adc_lesion_gain must be < 0".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        let (lo, hi) = self.lesion_radius_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!(
                "lesion_radius_range ({lo}, {hi}) must satisfy 0 < lo <= hi"
            )));
        }
        let min_axes = default_semi_axes(self.dims);
        for a in 0..3 {
            if self.brain_semi_axes[a] + 1e-9 < min_axes[a] {
                return Err(Error::Config(format!(
                    "brain_semi_axes[{a}] = {} smaller than the territory geometry requires ({})",
                    self.brain_semi_axes[a], min_axes[a]
                )));
            }
        }
        for label in TerritoryLabel::LESIONED {
            let mask = territory_mask(label, self.dims)?;
            if eroded_centers(&mask, hi).is_empty() {
                return Err(Error::Config(format!(
                    "lesion radius {hi} does not fit inside the {label} territory at dims {:?}",
                    self.dims
                )));
            }
        }
        Ok(())
    }
}

/// Boolean mask (shape `[z, y, x]`) of voxels inside the brain ellipsoid
/// centered on the grid with `BRAIN_AXIS_FRACTION` semi-axes.
pub fn brain_mask(dims: [usize; 3]) -> Array3<bool> {
    let semi = default_semi_axes(dims);
    let center = [
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    ];
    let mut mask = Array3::from_elem((dims[2], dims[1], dims[0]), false);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let dx = (x as f64 - center[0]) / semi[0];
                let dy = (y as f64 - center[1]) / semi[1];
                let dz = (z as f64 - center[2]) / semi[2];
                mask[[z, y, x]] = dx * dx + dy * dy + dz * dz <= 1.0;
            }
        }
    }
    mask
}

/// Fixed, pairwise-disjoint territory regions inside the brain ellipsoid:
/// deep gray is a central box around the grid centroid, anterior the front
/// third (high y) outside that box, posterior the union of the back third
/// (low y) and the inferior quarter (low z) outside both.
pub fn territory_mask(label: TerritoryLabel, dims: [usize; 3]) -> Result<Array3<bool>> {
    if label == TerritoryLabel::Normal {
        return Err(Error::NormalHasNoMask);
    }
    let brain = brain_mask(dims);
    let [nx, ny, nz] = dims;
    let front_y = ny - ny / 3;
    let back_y = ny / 3;
    let low_z = nz / 4;
    let centroid = [nx / 2, ny / 2, nz / 2];
    let half = [nx / 6, ny / 6, nz / 4];

    let in_box = |x: usize, y: usize, z: usize| {
        x.abs_diff(centroid[0]) <= half[0]
            && y.abs_diff(centroid[1]) <= half[1]
            && z.abs_diff(centroid[2]) <= half[2]
    };

    let mut mask = Array3::from_elem((nz, ny, nx), false);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !brain[[z, y, x]] {
                    continue;
                }
                let boxed = in_box(x, y, z);
                let front = y >= front_y;
                let member = match label {
                    TerritoryLabel::DeepGray => boxed,
                    TerritoryLabel::Anterior => front && !boxed,
                    TerritoryLabel::Posterior => (y < back_y || z < low_z) && !boxed && !front,
                    TerritoryLabel::Normal => unreachable!(),
                };
                mask[[z, y, x]] = member;
            }
        }
    }
    Ok(mask)
}

/// Integer offsets of the voxel ball of radius `r`.
fn ball_offsets(r: f64) -> Vec<[i64; 3]> {
    let ri = r.floor() as i64;
    let r2 = r * r;
    let mut offs = Vec::new();
    for dz in -ri..=ri {
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if (dx * dx + dy * dy + dz * dz) as f64 <= r2 {
                    offs.push([dx, dy, dz]);
                }
            }
        }
    }
    offs
}

/// Mask voxels whose whole radius-`r` ball stays inside the mask, in a
/// deterministic (z, y, x ascending) order. Coordinates are (x, y, z).
pub fn eroded_centers(mask: &Array3<bool>, r: f64) -> Vec<[usize; 3]> {
    let (nz, ny, nx) = mask.dim();
    let offs = ball_offsets(r);
    let mut centers = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask[[z, y, x]] {
                    continue;
                }
                let fits = offs.iter().all(|o| {
                    let (px, py, pz) = (x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]);
                    px >= 0
                        && py >= 0
                        && pz >= 0
                        && px < nx as i64
                        && py < ny as i64
                        && pz < nz as i64
                        && mask[[pz as usize, py as usize, px as usize]]
                });
                if fits {
                    centers.push([x, y, z]);
                }
            }
        }
    }
    centers
}

/// One generated phantom: volume plus sampled registry fields.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub volume: Volume,
    pub registry: RegistryEntry,
}

/// The brain-plus-noise volume a phantom starts from, before any lesion.
/// Exposed so tests can diff a generated phantom against its lesion-free
/// counterpart.
pub fn generate_base(cfg: &PhantomConfig) -> Volume {
    let mut rng = stream_rng(cfg.seed, "phantom", 0);
    base_volume(cfg, &mut rng)
}

fn base_volume(cfg: &PhantomConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Volume {
    let [nx, ny, nz] = cfg.dims;
    let brain = brain_mask(cfg.dims);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let mut v = Volume::zeros(2, cfg.dims, cfg.spacing);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if brain[[z, y, x]] {
                    let dwi = 1.0 + noise.sample(rng);
                    let adc = 1.0 + noise.sample(rng);
                    v.set(0, x, y, z, dwi as f32);
                    v.set(1, x, y, z, adc as f32);
                }
            }
        }
    }
    v
}

/// Generates one phantom for the given label/finding pair. Deterministic in
/// `cfg.seed`: the same inputs always produce bit-identical output.
pub fn generate_phantom(
    label: TerritoryLabel,
    finding: &StructuredFinding,
    cfg: &PhantomConfig,
) -> Result<PhantomSample> {
    if finding.label() != label {
        return Err(Error::InvalidRecord {
            id: String::new(),
            reason: format!("finding territory {} disagrees with label {label}", finding.label()),
        });
    }
    let mut rng = stream_rng(cfg.seed, "phantom", 0);
    let mut volume = base_volume(cfg, &mut rng);

    if let StructuredFinding::Infarct {
        severity,
        infarction_type,
        ..
    } = finding
    {
        let (lo, hi) = cfg.lesion_radius_range;
        let mid = (lo + hi) / 2.0;
        let radius = if infarction_type.is_large() {
            rng.random_range(mid..=hi)
        } else {
            rng.random_range(lo..mid)
        };
        let mask = territory_mask(label, cfg.dims)?;
        let centers = eroded_centers(&mask, radius);
        debug_assert!(!centers.is_empty(), "config validation guarantees fit");
        let center = centers[rng.random_range(0..centers.len())];
        let factor = match severity {
            SeverityClass::Strong => STRONG_GAIN_FACTOR,
            SeverityClass::Mild => 1.0,
        };
        let dwi_gain = (factor * cfg.dwi_lesion_gain) as f32;
        let adc_gain = (factor * cfg.adc_lesion_gain) as f32;
        for off in ball_offsets(radius) {
            let x = (center[0] as i64 + off[0]) as usize;
            let y = (center[1] as i64 + off[1]) as usize;
            let z = (center[2] as i64 + off[2]) as usize;
            volume.set(0, x, y, z, volume.get(0, x, y, z) + dwi_gain);
            volume.set(1, x, y, z, volume.get(1, x, y, z) + adc_gain);
        }
    }

    let registry = sample_registry(&mut rng);
    Ok(PhantomSample { volume, registry })
}

const PRESENTATIONS: [&str; 6] = [
    "Altered Mentality",
    "Right side weakness",
    "Left side weakness",
    "Dysarthria",
    "Facial palsy",
    "Dizziness",
];

const PMH_TOKENS: [(&str, f64); 5] = [
    ("HTN", 0.5),
    ("DM", 0.3),
    ("Afib", 0.25),
    ("Dyslipidemia", 0.3),
    ("CKD", 0.1),
];

fn sample_registry(rng: &mut rand_chacha::ChaCha8Rng) -> RegistryEntry {
    let age = rng.random_range(18..=95);
    let sex = if rng.random_bool(0.5) { Sex::Male } else { Sex::Female };
    let presentation = PRESENTATIONS[rng.random_range(0..PRESENTATIONS.len())].to_string();
    let nihss = if rng.random_bool(0.85) {
        Some(rng.random_range(0..=420) as f64 / 10.0)
    } else {
        None
    };
    let mut pmh = Vec::new();
    for (token, p) in PMH_TOKENS {
        if rng.random_bool(p) {
            pmh.push(token.to_string());
        }
    }
    RegistryEntry {
        age,
        sex,
        presentation,
        nihss,
        past_medical_history: pmh,
    }
}

/// Per-class record counts for one split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub anterior: usize,
    pub deep_gray: usize,
    pub posterior: usize,
    pub normal: usize,
}

impl ClassCounts {
    pub fn uniform(n: usize) -> ClassCounts {
        ClassCounts {
            anterior: n,
            deep_gray: n,
            posterior: n,
            normal: n,
        }
    }

    pub fn get(&self, label: TerritoryLabel) -> usize {
        match label {
            TerritoryLabel::Anterior => self.anterior,
            TerritoryLabel::DeepGray => self.deep_gray,
            TerritoryLabel::Posterior => self.posterior,
            TerritoryLabel::Normal => self.normal,
        }
    }

    pub fn total(&self) -> usize {
        self.anterior + self.deep_gray + self.posterior + self.normal
    }
}

fn sample_finding(label: TerritoryLabel, seed: u64, tag: &str, idx: u64) -> StructuredFinding {
    match label.territory() {
        None => StructuredFinding::Normal,
        Some(territory) => {
            let mut rng = stream_rng(seed, tag, idx);
            let severity = SeverityClass::ALL[rng.random_range(0..SeverityClass::ALL.len())];
            let infarction_type =
                InfarctionType::ALL[rng.random_range(0..InfarctionType::ALL.len())];
            StructuredFinding::Infarct {
                severity,
                infarction_type,
                territory,
            }
        }
    }
}

fn make_record(
    split: Split,
    id_prefix: &str,
    label: TerritoryLabel,
    idx: usize,
    cfg: &PhantomConfig,
) -> Result<(ImageRecord, Volume)> {
    let tag = format!("{id_prefix}/{label}");
    let finding = sample_finding(label, cfg.seed, &format!("finding/{tag}"), idx as u64);
    let record_cfg = PhantomConfig {
        seed: crate::seeding::derive_seed(cfg.seed, &format!("record/{tag}"), idx as u64),
        ..cfg.clone()
    };
    let sample = generate_phantom(label, &finding, &record_cfg)?;
    let id = format!("{id_prefix}-{label}-{idx:04}");
    let record = ImageRecord {
        id: id.clone(),
        volume_path: format!("volumes/{id}.raw"),
        label,
        finding,
        registry: sample.registry,
        split,
    };
    record.validate()?;
    Ok((record, sample.volume))
}

/// Generates the train/test dataset with exact per-class counts. Records are
/// deterministic per seed; train and test draw from disjoint seed streams.
pub fn generate_dataset(
    train: &ClassCounts,
    test: &ClassCounts,
    cfg: &PhantomConfig,
) -> Result<Vec<(ImageRecord, Volume)>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(train.total() + test.total());
    for (split, counts) in [(Split::Train, train), (Split::Test, test)] {
        for label in TerritoryLabel::ALL {
            for idx in 0..counts.get(label) {
                out.push(make_record(split, split.as_str(), label, idx, cfg)?);
            }
        }
    }
    Ok(out)
}

/// Generates `n` additional phantoms (labels cycling through all classes)
/// intended for label-free pretraining. Ids and seed streams are disjoint
/// from the train/test dataset.
pub fn generate_extra_pool(n: usize, cfg: &PhantomConfig) -> Result<Vec<(ImageRecord, Volume)>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(n);
    let mut per_label_idx = [0usize; 4];
    for i in 0..n {
        let label = TerritoryLabel::ALL[i % 4];
        let idx = per_label_idx[label.index()];
        per_label_idx[label.index()] += 1;
        out.push(make_record(Split::Train, "extra", label, idx, cfg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PhantomConfig {
        PhantomConfig {
            seed: 11,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        cfg().validate().unwrap();
    }

    #[test]
    fn territory_masks_are_pairwise_disjoint_and_inside_brain() {
        let dims = cfg().dims;
        let brain = brain_mask(dims);
        let masks: Vec<_> = TerritoryLabel::LESIONED
            .iter()
            .map(|l| territory_mask(*l, dims).unwrap())
            .collect();
        for (i, a) in masks.iter().enumerate() {
            assert!(a.iter().any(|&m| m), "mask {i} empty");
            for (j, b) in masks.iter().enumerate().skip(i + 1) {
                let overlap = a
                    .iter()
                    .zip(b.iter())
                    .filter(|(x, y)| **x && **y)
                    .count();
                assert_eq!(overlap, 0, "masks {i} and {j} overlap");
            }
        }
        // Exhaustive scan: union of the three masks stays inside the brain.
        let (nz, ny, nx) = brain.dim();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let in_union = masks.iter().any(|m| m[[z, y, x]]);
                    if in_union {
                        assert!(brain[[z, y, x]], "({x},{y},{z}) outside brain");
                    }
                }
            }
        }
    }

    #[test]
    fn deep_gray_contains_grid_centroid() {
        let dims = cfg().dims;
        let mask = territory_mask(TerritoryLabel::DeepGray, dims).unwrap();
        assert!(mask[[dims[2] / 2, dims[1] / 2, dims[0] / 2]]);
    }

    #[test]
    fn normal_label_has_no_mask() {
        assert!(matches!(
            territory_mask(TerritoryLabel::Normal, cfg().dims),
            Err(Error::NormalHasNoMask)
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let finding = StructuredFinding::Infarct {
            severity: SeverityClass::Strong,
            infarction_type: InfarctionType::SmallLacune,
            territory: crate::data::IschemicTerritory::AnteriorCirculation,
        };
        let a = generate_phantom(TerritoryLabel::Anterior, &finding, &cfg()).unwrap();
        let b = generate_phantom(TerritoryLabel::Anterior, &finding, &cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn normal_phantom_equals_lesion_free_base() {
        let sample = generate_phantom(TerritoryLabel::Normal, &StructuredFinding::Normal, &cfg())
            .unwrap();
        let base = generate_base(&cfg());
        assert_eq!(sample.volume, base);
    }

    #[test]
    fn lesion_peak_lies_inside_its_territory_mask() {
        for (label, territory) in [
            (TerritoryLabel::Anterior, crate::data::IschemicTerritory::AnteriorCirculation),
            (TerritoryLabel::DeepGray, crate::data::IschemicTerritory::DeepGrayMatter),
            (TerritoryLabel::Posterior, crate::data::IschemicTerritory::PosteriorCirculation),
        ] {
            for seed in 0..5u64 {
                let c = PhantomConfig { seed, ..cfg() };
                let finding = StructuredFinding::Infarct {
                    severity: SeverityClass::Mild,
                    infarction_type: InfarctionType::LargeVascularTerritorial,
                    territory,
                };
                let sample = generate_phantom(label, &finding, &c).unwrap();
                let base = generate_base(&c);
                // Exhaustive argmax scan over DWI - base.
                let dims = c.dims;
                let mut best = (0usize, 0usize, 0usize);
                let mut best_val = f32::NEG_INFINITY;
                for z in 0..dims[2] {
                    for y in 0..dims[1] {
                        for x in 0..dims[0] {
                            let d = sample.volume.get(0, x, y, z) - base.get(0, x, y, z);
                            if d > best_val {
                                best_val = d;
                                best = (x, y, z);
                            }
                        }
                    }
                }
                let mask = territory_mask(label, dims).unwrap();
                assert!(
                    mask[[best.2, best.1, best.0]],
                    "{label} seed {seed}: argmax {best:?} outside mask"
                );
            }
        }
    }

    #[test]
    fn dataset_counts_ids_and_determinism() {
        let c = cfg();
        let train = ClassCounts::uniform(2);
        let test = ClassCounts::uniform(2);
        let records = generate_dataset(&train, &test, &c).unwrap();
        assert_eq!(records.len(), 16);
        for label in TerritoryLabel::ALL {
            let n = records
                .iter()
                .filter(|(r, _)| r.label == label && r.split == Split::Train)
                .count();
            assert_eq!(n, 2);
        }
        let mut ids: Vec<_> = records.iter().map(|(r, _)| r.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 16);

        let again = generate_dataset(&train, &test, &c).unwrap();
        assert_eq!(records, again);
    }

    #[test]
    fn empty_counts_give_empty_manifest() {
        let zero = ClassCounts::uniform(0);
        let records = generate_dataset(&zero, &zero, &cfg()).unwrap();
        assert!(records.is_empty());
    }

    #[test]
    fn separability_margin_holds_for_every_lesioned_phantom() {
        // Mean DWI inside the true territory exceeds the mean inside each
        // other territory by at least 3 sigma.
        let c = cfg();
        let train = ClassCounts {
            anterior: 3,
            deep_gray: 3,
            posterior: 3,
            normal: 0,
        };
        let records = generate_dataset(&train, &ClassCounts::uniform(0), &c).unwrap();
        let masks: Vec<_> = TerritoryLabel::LESIONED
            .iter()
            .map(|l| (*l, territory_mask(*l, c.dims).unwrap()))
            .collect();
        for (rec, vol) in &records {
            let mean_in = |mask: &Array3<bool>| {
                let mut sum = 0.0f64;
                let mut n = 0usize;
                for z in 0..c.dims[2] {
                    for y in 0..c.dims[1] {
                        for x in 0..c.dims[0] {
                            if mask[[z, y, x]] {
                                sum += vol.get(0, x, y, z) as f64;
                                n += 1;
                            }
                        }
                    }
                }
                sum / n as f64
            };
            let true_mean = masks
                .iter()
                .find(|(l, _)| *l == rec.label)
                .map(|(_, m)| mean_in(m))
                .unwrap();
            for (other, mask) in &masks {
                if *other == rec.label {
                    continue;
                }
                let other_mean = mean_in(mask);
                assert!(
                    true_mean - other_mean >= 3.0 * c.noise_sigma,
                    "{}: {true_mean} vs {other} {other_mean}",
                    rec.id
                );
            }
        }
    }

    #[test]
    fn extra_pool_ids_disjoint_from_dataset() {
        let c = cfg();
        let records = generate_dataset(&ClassCounts::uniform(1), &ClassCounts::uniform(1), &c).unwrap();
        let extra = generate_extra_pool(8, &c).unwrap();
        assert_eq!(extra.len(), 8);
        for (e, _) in &extra {
            assert!(records.iter().all(|(r, _)| r.id != e.id));
        }
    }
}
