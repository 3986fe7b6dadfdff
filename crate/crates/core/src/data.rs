//! Canonical data model: territory labels, structured findings, registry
//! entries and the dataset manifest shared by every pipeline stage.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four classification targets: three vascular territories plus normal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerritoryLabel {
    Anterior,
    DeepGray,
    Posterior,
    Normal,
}

impl TerritoryLabel {
    pub const ALL: [TerritoryLabel; 4] = [
        TerritoryLabel::Anterior,
        TerritoryLabel::DeepGray,
        TerritoryLabel::Posterior,
        TerritoryLabel::Normal,
    ];

    /// The three lesion-bearing labels, in the fixed tie-break order.
    pub const LESIONED: [TerritoryLabel; 3] = [
        TerritoryLabel::Anterior,
        TerritoryLabel::DeepGray,
        TerritoryLabel::Posterior,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TerritoryLabel::Anterior => "anterior",
            TerritoryLabel::DeepGray => "deep_gray",
            TerritoryLabel::Posterior => "posterior",
            TerritoryLabel::Normal => "normal",
        }
    }

    /// Class index used for logits and confusion counting.
    pub fn index(&self) -> usize {
        match self {
            TerritoryLabel::Anterior => 0,
            TerritoryLabel::DeepGray => 1,
            TerritoryLabel::Posterior => 2,
            TerritoryLabel::Normal => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<TerritoryLabel> {
        TerritoryLabel::ALL.get(i).copied()
    }

    /// The paired ischemic-territory value, `None` for normal.
    pub fn territory(&self) -> Option<IschemicTerritory> {
        match self {
            TerritoryLabel::Anterior => Some(IschemicTerritory::AnteriorCirculation),
            TerritoryLabel::DeepGray => Some(IschemicTerritory::DeepGrayMatter),
            TerritoryLabel::Posterior => Some(IschemicTerritory::PosteriorCirculation),
            TerritoryLabel::Normal => None,
        }
    }
}

impl fmt::Display for TerritoryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TerritoryLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anterior" => Ok(TerritoryLabel::Anterior),
            "deep_gray" => Ok(TerritoryLabel::DeepGray),
            "posterior" => Ok(TerritoryLabel::Posterior),
            "normal" => Ok(TerritoryLabel::Normal),
            other => Err(Error::Config(format!("unknown territory label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeverityClass {
    Strong,
    Mild,
}

impl SeverityClass {
    pub const ALL: [SeverityClass; 2] = [SeverityClass::Strong, SeverityClass::Mild];

    /// Surface form used in rendered findings.
    pub fn surface(&self) -> &'static str {
        match self {
            SeverityClass::Strong => "strong",
            SeverityClass::Mild => "mild",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfarctionType {
    LargeVascularTerritorial,
    WedgeShapedVascularTerritorial,
    SmallLacune,
    SmallStriatoCapsular,
    SmallDiffusionRestriction,
}

impl InfarctionType {
    pub const ALL: [InfarctionType; 5] = [
        InfarctionType::LargeVascularTerritorial,
        InfarctionType::WedgeShapedVascularTerritorial,
        InfarctionType::SmallLacune,
        InfarctionType::SmallStriatoCapsular,
        InfarctionType::SmallDiffusionRestriction,
    ];

    /// Surface form used in rendered findings. `SmallDiffusionRestriction`
    /// renders as plain "small" because the template sentence already ends
    /// with "diffusion restriction".
    pub fn surface(&self) -> &'static str {
        match self {
            InfarctionType::LargeVascularTerritorial => "large vascular territorial",
            InfarctionType::WedgeShapedVascularTerritorial => "wedge-shaped vascular territorial",
            InfarctionType::SmallLacune => "small lacune",
            InfarctionType::SmallStriatoCapsular => "small striatocapsular",
            InfarctionType::SmallDiffusionRestriction => "small",
        }
    }

    /// Lesion-size bucket used by the phantom generator: large territorial
    /// patterns get radii from the upper half of the configured range,
    /// everything else from the lower half.
    pub fn is_large(&self) -> bool {
        matches!(
            self,
            InfarctionType::LargeVascularTerritorial
                | InfarctionType::WedgeShapedVascularTerritorial
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IschemicTerritory {
    AnteriorCirculation,
    PosteriorCirculation,
    DeepGrayMatter,
}

impl IschemicTerritory {
    pub const ALL: [IschemicTerritory; 3] = [
        IschemicTerritory::AnteriorCirculation,
        IschemicTerritory::PosteriorCirculation,
        IschemicTerritory::DeepGrayMatter,
    ];

    pub fn surface(&self) -> &'static str {
        match self {
            IschemicTerritory::AnteriorCirculation => "anterior circulation",
            IschemicTerritory::PosteriorCirculation => "posterior circulation",
            IschemicTerritory::DeepGrayMatter => "deep gray matter",
        }
    }

    /// Inverse of [`TerritoryLabel::territory`].
    pub fn label(&self) -> TerritoryLabel {
        match self {
            IschemicTerritory::AnteriorCirculation => TerritoryLabel::Anterior,
            IschemicTerritory::PosteriorCirculation => TerritoryLabel::Posterior,
            IschemicTerritory::DeepGrayMatter => TerritoryLabel::DeepGray,
        }
    }
}

/// Structured radiological finding. The normal case carries no attributes,
/// which makes the "is_normal implies all other fields absent" invariant
/// hold by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "FindingRepr", into = "FindingRepr")]
pub enum StructuredFinding {
    Normal,
    Infarct {
        severity: SeverityClass,
        infarction_type: InfarctionType,
        territory: IschemicTerritory,
    },
}

impl StructuredFinding {
    pub fn is_normal(&self) -> bool {
        matches!(self, StructuredFinding::Normal)
    }

    /// The territory label this finding pairs with.
    pub fn label(&self) -> TerritoryLabel {
        match self {
            StructuredFinding::Normal => TerritoryLabel::Normal,
            StructuredFinding::Infarct { territory, .. } => territory.label(),
        }
    }

    /// Every representable finding: 2 severities x 5 types x 3 territories
    /// plus the normal case (31 total).
    pub fn enumerate_all() -> Vec<StructuredFinding> {
        let mut all = vec![StructuredFinding::Normal];
        for severity in SeverityClass::ALL {
            for infarction_type in InfarctionType::ALL {
                for territory in IschemicTerritory::ALL {
                    all.push(StructuredFinding::Infarct {
                        severity,
                        infarction_type,
                        territory,
                    });
                }
            }
        }
        all
    }
}

/// Wire representation with explicit optional fields; validated on decode.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct FindingRepr {
    is_normal: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    severity_class: Option<SeverityClass>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    infarction_type: Option<InfarctionType>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    territory: Option<IschemicTerritory>,
}

impl TryFrom<FindingRepr> for StructuredFinding {
    type Error = String;

    fn try_from(r: FindingRepr) -> std::result::Result<Self, String> {
        match (r.is_normal, r.severity_class, r.infarction_type, r.territory) {
            (true, None, None, None) => Ok(StructuredFinding::Normal),
            (false, Some(severity), Some(infarction_type), Some(territory)) => {
                Ok(StructuredFinding::Infarct {
                    severity,
                    infarction_type,
                    territory,
                })
            }
            _ => Err("finding must be either normal with no attributes or an infarct with severity, type and territory".into()),
        }
    }
}

impl From<StructuredFinding> for FindingRepr {
    fn from(f: StructuredFinding) -> FindingRepr {
        match f {
            StructuredFinding::Normal => FindingRepr {
                is_normal: true,
                severity_class: None,
                infarction_type: None,
                territory: None,
            },
            StructuredFinding::Infarct {
                severity,
                infarction_type,
                territory,
            } => FindingRepr {
                is_normal: false,
                severity_class: Some(severity),
                infarction_type: Some(infarction_type),
                territory: Some(territory),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn as_str(&self) -> &'static str {
        match self {
            Sex::Male => "Male",
            Sex::Female => "Female",
        }
    }
}

/// Clinical registry fields attached to every scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub age: u32,
    pub sex: Sex,
    /// Presenting complaint, free text; may be empty.
    pub presentation: String,
    /// NIH Stroke Scale score, 0..=42 when present.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nihss: Option<f64>,
    pub past_medical_history: Vec<String>,
}

impl RegistryEntry {
    pub fn validate(&self) -> Result<()> {
        if self.age < 18 {
            return Err(Error::InvalidRecord {
                id: String::new(),
                reason: format!("age {} below the adult cohort minimum of 18", self.age),
            });
        }
        if let Some(n) = self.nihss {
            if !(0.0..=42.0).contains(&n) || !n.is_finite() {
                return Err(Error::InvalidRecord {
                    id: String::new(),
                    reason: format!("NIHSS {n} outside [0, 42]"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One row of the paired database: a volume reference plus its ground-truth
/// label, structured finding and registry entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Volume raw-file path, relative to the manifest's directory.
    pub volume_path: String,
    pub label: TerritoryLabel,
    pub finding: StructuredFinding,
    pub registry: RegistryEntry,
    pub split: Split,
}

impl ImageRecord {
    /// Checks the label/finding bijection and the registry bounds.
    pub fn validate(&self) -> Result<()> {
        if self.finding.label() != self.label {
            return Err(Error::InvalidRecord {
                id: self.id.clone(),
                reason: format!(
                    "label `{}` disagrees with finding territory `{}`",
                    self.label,
                    self.finding.label()
                ),
            });
        }
        self.registry.validate().map_err(|e| match e {
            Error::InvalidRecord { reason, .. } => Error::InvalidRecord {
                id: self.id.clone(),
                reason,
            },
            other => other,
        })
    }
}

/// Writes a JSON-lines manifest, one record per line.
pub fn write_manifest(path: &Path, records: &[ImageRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = fs::File::create(path)?;
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a JSON-lines manifest, validating every record and id uniqueness.
pub fn read_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let file = fs::File::open(path).map_err(|_| Error::MissingArtifact {
        path: path.to_path_buf(),
        producer: "gen-data".into(),
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord = serde_json::from_str(&line)?;
        rec.validate()?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_string_round_trip_is_lossless() {
        for label in TerritoryLabel::ALL {
            assert_eq!(label.as_str().parse::<TerritoryLabel>().unwrap(), label);
        }
        assert_eq!(TerritoryLabel::ALL.len(), 4);
    }

    #[test]
    fn territory_bijection_covers_non_normal_labels() {
        for label in TerritoryLabel::LESIONED {
            assert_eq!(label.territory().unwrap().label(), label);
        }
        assert!(TerritoryLabel::Normal.territory().is_none());
        for territory in IschemicTerritory::ALL {
            assert_eq!(territory.label().territory(), Some(territory));
        }
    }

    #[test]
    fn finding_space_has_31_members() {
        let all = StructuredFinding::enumerate_all();
        assert_eq!(all.len(), 31);
        assert_eq!(all.iter().filter(|f| f.is_normal()).count(), 1);
    }

    #[test]
    fn finding_serde_rejects_inconsistent_repr() {
        let bad = r#"{"is_normal":true,"severity_class":"mild","infarction_type":"small_lacune","territory":"anterior_circulation"}"#;
        assert!(serde_json::from_str::<StructuredFinding>(bad).is_err());
        let bad2 = r#"{"is_normal":false}"#;
        assert!(serde_json::from_str::<StructuredFinding>(bad2).is_err());

        let ok = r#"{"is_normal":true}"#;
        assert_eq!(
            serde_json::from_str::<StructuredFinding>(ok).unwrap(),
            StructuredFinding::Normal
        );
    }

    #[test]
    fn finding_serde_round_trip() {
        for f in StructuredFinding::enumerate_all() {
            let s = serde_json::to_string(&f).unwrap();
            let back: StructuredFinding = serde_json::from_str(&s).unwrap();
            assert_eq!(back, f);
        }
    }

    #[test]
    fn registry_bounds() {
        let mut r = RegistryEntry {
            age: 75,
            sex: Sex::Female,
            presentation: "Altered Mentality".into(),
            nihss: Some(32.0),
            past_medical_history: vec!["HTN".into(), "Afib".into()],
        };
        assert!(r.validate().is_ok());
        r.age = 17;
        assert!(r.validate().is_err());
        r.age = 18;
        r.nihss = Some(43.0);
        assert!(r.validate().is_err());
        r.nihss = None;
        assert!(r.validate().is_ok());
    }

    #[test]
    fn record_validation_enforces_label_finding_agreement() {
        let registry = RegistryEntry {
            age: 60,
            sex: Sex::Male,
            presentation: String::new(),
            nihss: None,
            past_medical_history: vec![],
        };
        let mut rec = ImageRecord {
            id: "t-0".into(),
            volume_path: "volumes/t-0.raw".into(),
            label: TerritoryLabel::Anterior,
            finding: StructuredFinding::Infarct {
                severity: SeverityClass::Mild,
                infarction_type: InfarctionType::SmallLacune,
                territory: IschemicTerritory::AnteriorCirculation,
            },
            registry,
            split: Split::Train,
        };
        assert!(rec.validate().is_ok());
        rec.label = TerritoryLabel::Posterior;
        assert!(rec.validate().is_err());
        rec.label = TerritoryLabel::Normal;
        assert!(rec.validate().is_err());
        rec.finding = StructuredFinding::Normal;
        assert!(rec.validate().is_ok());
    }

    #[test]
    fn manifest_round_trip_and_duplicate_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let registry = RegistryEntry {
            age: 60,
            sex: Sex::Male,
            presentation: "Dysarthria".into(),
            nihss: Some(4.0),
            past_medical_history: vec!["HTN".into()],
        };
        let rec = ImageRecord {
            id: "train-normal-0000".into(),
            volume_path: "volumes/train-normal-0000.raw".into(),
            label: TerritoryLabel::Normal,
            finding: StructuredFinding::Normal,
            registry,
            split: Split::Train,
        };
        write_manifest(&path, &[rec.clone()]).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, vec![rec.clone()]);

        write_manifest(&path, &[rec.clone(), rec]).unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::DuplicateId(_))));
    }
}
