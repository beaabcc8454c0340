use std::fmt;

use serde::{Deserialize, Serialize};

/// The four diagnostic sub-types, with stable integer codes 0..3.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubType {
    TypicalAd = 0,
    AtypicalAd = 1,
    PreclinicalAd = 2,
    NormalControl = 3,
}

impl SubType {
    pub const COUNT: usize = 4;
    pub const ALL: [SubType; 4] = [
        SubType::TypicalAd,
        SubType::AtypicalAd,
        SubType::PreclinicalAd,
        SubType::NormalControl,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    /// Whether the sub-type carries in-vivo evidence of AD pathology.
    pub fn has_in_vivo_evidence(self) -> bool {
        !matches!(self, SubType::NormalControl)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SubType::TypicalAd => "typical_ad",
            SubType::AtypicalAd => "atypical_ad",
            SubType::PreclinicalAd => "preclinical_ad",
            SubType::NormalControl => "normal_control",
        }
    }
}

impl fmt::Display for SubType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A sub-type criterion from the clinical guideline.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineCriterion {
    pub subtype: SubType,
    pub text: String,
}

const CRITERIA: [(SubType, &str); 4] = [
    (
        SubType::TypicalAd,
        "Significant episodic memory impairment and In-vivo evidence of Alzheimer's disease",
    ),
    (
        SubType::AtypicalAd,
        "Posterior or logopenic or frontal of Alzheimer's disease and In-vivo evidence of Alzheimer's disease",
    ),
    (
        SubType::PreclinicalAd,
        "Absence of specific clinical phenotype and In-vivo evidence of Alzheimer's disease",
    ),
    (
        SubType::NormalControl,
        "Absence of specific clinical phenotype and No evidence of Alzheimer's disease",
    ),
];

/// The four criterion texts, ordered by sub-type code.
pub fn guideline_corpus() -> Vec<GuidelineCriterion> {
    CRITERIA
        .iter()
        .map(|&(subtype, text)| GuidelineCriterion {
            subtype,
            text: text.to_owned(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_has_one_criterion_per_subtype() {
        let corpus = guideline_corpus();
        assert_eq!(corpus.len(), 4);
        for (i, c) in corpus.iter().enumerate() {
            assert_eq!(c.subtype.code(), i);
        }
        assert!(corpus[0].text.contains("Significant episodic memory impairment"));
        assert!(corpus[3].text.contains("No evidence of Alzheimer's disease"));
        assert!(corpus[1].text.contains("Posterior or logopenic or frontal"));
    }

    #[test]
    fn codes_round_trip() {
        for s in SubType::ALL {
            assert_eq!(SubType::from_code(s.code()), Some(s));
        }
        assert_eq!(SubType::from_code(4), None);
        let json = serde_json::to_string(&SubType::PreclinicalAd).unwrap();
        assert_eq!(json, "\"preclinical_ad\"");
    }
}
