//! Rendering tabular fields into the three text components.
//!
//! Every present field becomes one clause `"<value> <field phrase><suffix>"`,
//! where the suffix is selected by the template. Clauses of a group are joined
//! with `"; "`.

use serde::{Deserialize, Serialize};

use crate::data::{SubjectRecord, Tabular};
use crate::error::{Error, Result};

/// One of the three textualization templates, from terse to most detailed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct TemplateId(u8);

impl TemplateId {
    pub fn new(id: u8) -> Result<Self> {
        if (1..=3).contains(&id) {
            Ok(Self(id))
        } else {
            Err(Error::Config(format!("unknown template id {id} (expected 1, 2 or 3)")))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn suffix(self) -> &'static str {
        match self.0 {
            1 => "",
            2 => " subject",
            _ => " subject for Alzheimer's Disease diagnosis",
        }
    }
}

impl Default for TemplateId {
    fn default() -> Self {
        Self(3)
    }
}

impl TryFrom<u8> for TemplateId {
    type Error = Error;

    fn try_from(id: u8) -> Result<Self> {
        Self::new(id)
    }
}

impl From<TemplateId> for u8 {
    fn from(t: TemplateId) -> u8 {
        t.0
    }
}

/// Which textualized group a feature came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextComponent {
    Personal,
    Health,
    Dementia,
}

impl TextComponent {
    pub const ALL: [TextComponent; 3] = [TextComponent::Personal, TextComponent::Health, TextComponent::Dementia];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// The textualized personal, health and dementia strings of one subject.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextBundle {
    pub personal: Option<String>,
    pub health: Option<String>,
    pub dementia: Option<String>,
    pub template_id: TemplateId,
}

impl TextBundle {
    /// Components in (personal, health, dementia) order.
    pub fn components(&self) -> [Option<&str>; 3] {
        [
            self.personal.as_deref(),
            self.health.as_deref(),
            self.dementia.as_deref(),
        ]
    }

    pub fn get(&self, c: TextComponent) -> Option<&str> {
        self.components()[c.index()]
    }
}

fn flag(v: bool) -> &'static str {
    if v {
        "with"
    } else {
        "without"
    }
}

fn number(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_owned()
    } else {
        s.to_owned()
    }
}

/// Un-suffixed clauses per group, in field order.
pub(crate) fn clauses(t: &Tabular) -> [Vec<String>; 3] {
    let mut personal = Vec::new();
    if let Some(age) = t.age {
        personal.push(format!("{age} years old"));
    }
    if let Some(edu) = t.education {
        personal.push(format!("{edu} years of education"));
    }
    if let Some(g) = t.gender {
        personal.push(format!("{} gender", g.as_str()));
    }

    let mut health = Vec::new();
    for (value, phrase) in [
        (t.heart_attack, "heart attack"),
        (t.hypertension, "hypertension"),
        (t.stroke, "stroke"),
        (t.alcohol_abuse, "alcohol abuse"),
        (t.psychiatric_disorder, "psychiatric disorder"),
    ] {
        if let Some(v) = value {
            health.push(format!("{} {phrase}", flag(v)));
        }
    }
    if let Some(b) = t.blood_test {
        health.push(format!("{} blood test", number(b)));
    }

    let mut dementia = Vec::new();
    if let Some(level) = t.dementia_level {
        dementia.push(format!("{} dementia level", level.label()));
    }
    [personal, health, dementia]
}

fn render(group: &[String], template: TemplateId) -> Option<String> {
    if group.is_empty() {
        return None;
    }
    let suffix = template.suffix();
    Some(
        group
            .iter()
            .map(|c| format!("{c}{suffix}"))
            .collect::<Vec<_>>()
            .join("; "),
    )
}

/// Renders a record's tabular fields with template `template_id` (1, 2 or 3).
pub fn textualize(record: &SubjectRecord, template_id: u8) -> Result<TextBundle> {
    let template = TemplateId::new(template_id)?;
    Ok(textualize_tabular(&record.tabular, template))
}

pub fn textualize_tabular(tabular: &Tabular, template: TemplateId) -> TextBundle {
    let [p, h, d] = clauses(tabular);
    TextBundle {
        personal: render(&p, template),
        health: render(&h, template),
        dementia: render(&d, template),
        template_id: template,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DementiaLevel, Gender, SubType};

    fn with_age(age: u32) -> SubjectRecord {
        SubjectRecord {
            id: "s".into(),
            label: SubType::TypicalAd,
            tabular: Tabular {
                age: Some(age),
                ..Tabular::default()
            },
            mri: None,
            pet: None,
        }
    }

    #[test]
    fn age_clause_per_template() {
        let r = with_age(75);
        assert_eq!(textualize(&r, 1).unwrap().personal.unwrap(), "75 years old");
        assert_eq!(textualize(&r, 2).unwrap().personal.unwrap(), "75 years old subject");
        assert!(textualize(&r, 3)
            .unwrap()
            .personal
            .unwrap()
            .contains("75 years old subject for Alzheimer's Disease diagnosis"));
    }

    #[test]
    fn missing_groups_are_absent() {
        let b = textualize(&with_age(75), 3).unwrap();
        assert!(b.health.is_none());
        assert!(b.dementia.is_none());
    }

    #[test]
    fn unknown_template_is_a_config_error() {
        assert!(matches!(textualize(&with_age(75), 0), Err(Error::Config(_))));
        assert!(matches!(textualize(&with_age(75), 4), Err(Error::Config(_))));
    }

    #[test]
    fn groups_join_clauses() {
        let mut r = with_age(80);
        r.tabular.gender = Some(Gender::Female);
        r.tabular.hypertension = Some(true);
        r.tabular.stroke = Some(false);
        r.tabular.blood_test = Some(1.25);
        r.tabular.dementia_level = Some(DementiaLevel::Cdr05);
        let b = textualize(&r, 1).unwrap();
        assert_eq!(b.personal.as_deref(), Some("80 years old; female gender"));
        assert_eq!(
            b.health.as_deref(),
            Some("with hypertension; without stroke; 1.25 blood test")
        );
        assert_eq!(b.dementia.as_deref(), Some("CDR 0.5 dementia level"));
    }

    #[test]
    fn numbers_render_compactly() {
        assert_eq!(number(1.0), "1");
        assert_eq!(number(1.20), "1.2");
        assert_eq!(number(-0.001), "0");
    }
}
