//! Subjects, sub-types, guideline criteria, textualization, cohort I/O,
//! fold splitting and the synthetic cohort generator.

mod io;
mod record;
mod split;
mod subtype;
mod synth;
mod textualize;

pub use io::{cohort_file, load_cohort, read_volume, write_cohort, write_volume, VolumeHeader, COHORT_FILE};
pub use record::{validate_cohort, DementiaLevel, Gender, SubjectRecord, Tabular, Volume};
pub use split::{split_folds, DatasetSplit, Role, NUM_FOLDS};
pub use subtype::{guideline_corpus, GuidelineCriterion, SubType};
pub use synth::{synthesize_cohort, SignalStrengths, SynthConfig};
pub use textualize::{textualize, textualize_tabular, TemplateId, TextBundle, TextComponent};
