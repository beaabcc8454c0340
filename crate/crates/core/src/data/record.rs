use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::SubType;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
        }
    }
}

/// Clinical dementia rating, serialised as its numeric value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum DementiaLevel {
    Cdr0,
    Cdr05,
    Cdr1,
    Cdr2,
    Cdr3,
}

impl DementiaLevel {
    pub const ALL: [DementiaLevel; 5] = [
        DementiaLevel::Cdr0,
        DementiaLevel::Cdr05,
        DementiaLevel::Cdr1,
        DementiaLevel::Cdr2,
        DementiaLevel::Cdr3,
    ];

    pub fn value(self) -> f64 {
        match self {
            DementiaLevel::Cdr0 => 0.0,
            DementiaLevel::Cdr05 => 0.5,
            DementiaLevel::Cdr1 => 1.0,
            DementiaLevel::Cdr2 => 2.0,
            DementiaLevel::Cdr3 => 3.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DementiaLevel::Cdr0 => "CDR 0",
            DementiaLevel::Cdr05 => "CDR 0.5",
            DementiaLevel::Cdr1 => "CDR 1",
            DementiaLevel::Cdr2 => "CDR 2",
            DementiaLevel::Cdr3 => "CDR 3",
        }
    }
}

impl TryFrom<f64> for DementiaLevel {
    type Error = String;

    fn try_from(v: f64) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|l| l.value() == v)
            .ok_or_else(|| format!("dementia_level must be one of 0, 0.5, 1, 2, 3 (got {v})"))
    }
}

impl From<DementiaLevel> for f64 {
    fn from(l: DementiaLevel) -> f64 {
        l.value()
    }
}

/// Tabular fields of one subject; `None` marks a missing value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tabular {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub education: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heart_attack: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypertension: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stroke: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alcohol_abuse: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psychiatric_disorder: Option<bool>,
    /// A single plasma biomarker reading.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blood_test: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dementia_level: Option<DementiaLevel>,
}

impl Tabular {
    pub fn has_personal(&self) -> bool {
        self.age.is_some() || self.education.is_some() || self.gender.is_some()
    }

    pub fn has_health(&self) -> bool {
        self.heart_attack.is_some()
            || self.hypertension.is_some()
            || self.stroke.is_some()
            || self.alcohol_abuse.is_some()
            || self.psychiatric_disorder.is_some()
            || self.blood_test.is_some()
    }

    pub fn has_dementia(&self) -> bool {
        self.dementia_level.is_some()
    }

    pub fn is_empty(&self) -> bool {
        !(self.has_personal() || self.has_health() || self.has_dementia())
    }
}

/// A dense 3D volume stored in (z, y, x) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected || expected == 0 {
            return Err(Error::shape(
                "volume data",
                format!("{expected} voxels for {shape:?}"),
                data.len(),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        let [_, h, w] = self.shape;
        self.data[(z * h + y) * w + x]
    }

    /// Nested `[z][y][x]` form used by inline JSON volumes.
    pub fn to_nested(&self) -> Vec<Vec<Vec<f32>>> {
        let [d, h, w] = self.shape;
        (0..d)
            .map(|z| {
                (0..h)
                    .map(|y| self.data[(z * h + y) * w..(z * h + y + 1) * w].to_vec())
                    .collect()
            })
            .collect()
    }

    pub fn from_nested(nested: &[Vec<Vec<f32>>]) -> Result<Self> {
        let d = nested.len();
        let h = nested.first().map_or(0, Vec::len);
        let w = nested.first().and_then(|p| p.first()).map_or(0, Vec::len);
        let mut data = Vec::with_capacity(d * h * w);
        for plane in nested {
            if plane.len() != h {
                return Err(Error::shape("inline volume plane", h, plane.len()));
            }
            for row in plane {
                if row.len() != w {
                    return Err(Error::shape("inline volume row", w, row.len()));
                }
                data.extend_from_slice(row);
            }
        }
        Self::new([d, h, w], data)
    }
}

/// One subject: tabular fields, optional imaging, and the sub-type label.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub label: SubType,
    pub tabular: Tabular,
    pub mri: Option<Volume>,
    pub pet: Option<Volume>,
}

impl SubjectRecord {
    /// Number of stages whose modalities this subject has (1, 2 or 3).
    pub fn stages_available(&self) -> usize {
        match (&self.mri, &self.pet) {
            (Some(_), Some(_)) => 3,
            (Some(_), None) => 2,
            _ => 1,
        }
    }

    pub fn has_all_modalities(&self) -> bool {
        !self.tabular.is_empty() && self.mri.is_some() && self.pet.is_some()
    }

    /// Checks the nested-availability and volume-shape invariants.
    pub fn validate(&self, volume_shape: Option<[usize; 3]>) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("subject id must be non-empty".into()));
        }
        if self.pet.is_some() && self.mri.is_none() {
            return Err(Error::Validation(format!(
                "subject {}: PET present without MRI",
                self.id
            )));
        }
        if self.tabular.is_empty() {
            return Err(Error::Validation(format!(
                "subject {}: no tabular field present",
                self.id
            )));
        }
        if let Some(b) = self.tabular.blood_test {
            if !b.is_finite() {
                return Err(Error::Validation(format!("subject {}: non-finite blood_test", self.id)));
            }
        }
        for (name, vol) in [("mri", &self.mri), ("pet", &self.pet)] {
            if let Some(v) = vol {
                if let Some(shape) = volume_shape {
                    if v.shape() != shape {
                        return Err(Error::Validation(format!(
                            "subject {}: {name} shape {:?} differs from cohort shape {:?}",
                            self.id,
                            v.shape(),
                            shape
                        )));
                    }
                }
                if v.data().iter().any(|x| !x.is_finite()) {
                    return Err(Error::Validation(format!(
                        "subject {}: non-finite {name} voxel",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Validates every record, id uniqueness, and a shared volume shape.
/// Returns the common volume shape if any subject has imaging.
pub fn validate_cohort(records: &[SubjectRecord]) -> Result<Option<[usize; 3]>> {
    let shape = records
        .iter()
        .find_map(|r| r.mri.as_ref().or(r.pet.as_ref()).map(Volume::shape));
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Validation(format!("duplicate subject id {}", r.id)));
        }
        r.validate(shape)?;
    }
    Ok(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str) -> SubjectRecord {
        SubjectRecord {
            id: id.into(),
            label: SubType::NormalControl,
            tabular: Tabular {
                age: Some(70),
                ..Tabular::default()
            },
            mri: None,
            pet: None,
        }
    }

    #[test]
    fn pet_without_mri_is_rejected() {
        let mut r = record("a");
        r.pet = Some(Volume::new([2, 2, 2], vec![0.0; 8]).unwrap());
        assert!(matches!(r.validate(None), Err(Error::Validation(_))));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let err = validate_cohort(&[record("a"), record("a")]).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn mismatched_volume_shapes_are_rejected() {
        let mut a = record("a");
        a.mri = Some(Volume::new([2, 2, 2], vec![0.0; 8]).unwrap());
        let mut b = record("b");
        b.mri = Some(Volume::new([1, 2, 4], vec![0.0; 8]).unwrap());
        assert!(validate_cohort(&[a, b]).is_err());
    }

    #[test]
    fn empty_tabular_is_rejected() {
        let mut r = record("a");
        r.tabular = Tabular::default();
        assert!(r.validate(None).is_err());
    }

    #[test]
    fn nested_volume_round_trip() {
        let v = Volume::new([2, 1, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        assert_eq!(Volume::from_nested(&v.to_nested()).unwrap(), v);
        assert_eq!(v.at(1, 0, 2), 5.0);
    }

    #[test]
    fn dementia_level_serde() {
        let t: Tabular = serde_json::from_str(r#"{"dementia_level": 0.5}"#).unwrap();
        assert_eq!(t.dementia_level, Some(DementiaLevel::Cdr05));
        assert!(serde_json::from_str::<Tabular>(r#"{"dementia_level": 0.7}"#).is_err());
        assert!(serde_json::from_str::<Tabular>(r#"{"shoe_size": 9}"#).is_err());
    }
}
