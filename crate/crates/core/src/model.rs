//! The assembled staged model and its batched forward pass.

use std::path::PathBuf;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::data::{guideline_corpus, textualize_tabular, SubType, SubjectRecord, TemplateId, TextComponent};
use crate::disentangle::{Disentangler, Stage1Projection};
use crate::encoders::{load_external_embeddings, Adapter, TextEncoder, VolumeEncoder, VolumeEncoderConfig};
use crate::error::{Error, Result};
use crate::fusion_align::{
    check_temperature, criteria_text_matrix, scores_node, ConcatFusion, CriteriaProjection, Fusion,
};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_text: usize,
    /// Hidden widths of the adapter; with the input and output layers this
    /// gives `adapter_hidden.len() + 1` affine layers.
    pub adapter_hidden: Vec<usize>,
    pub d_adapter: usize,
    /// One adapter for all three texts, or one per text.
    pub shared_adapter: bool,
    pub d_common: usize,
    pub d_specific: usize,
    /// Shared stage dimension.
    pub d: usize,
    pub volume_shape: [usize; 3],
    pub volume: VolumeEncoderConfig,
    pub heads: usize,
    pub ffw_width: usize,
    pub temperature: f64,
    pub template_id: TemplateId,
    /// JSON-Lines table of externally computed text embeddings.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external_embeddings: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_text: 512,
            adapter_hidden: vec![256, 256, 256],
            d_adapter: 128,
            shared_adapter: true,
            d_common: 64,
            d_specific: 64,
            d: 128,
            volume_shape: [8, 8, 8],
            volume: VolumeEncoderConfig::default(),
            heads: 4,
            ffw_width: 512,
            temperature: 0.1,
            template_id: TemplateId::default(),
            external_embeddings: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_text", self.d_text),
            ("d_adapter", self.d_adapter),
            ("d_common", self.d_common),
            ("d_specific", self.d_specific),
            ("d", self.d),
            ("heads", self.heads),
            ("ffw_width", self.ffw_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.adapter_hidden.contains(&0) {
            return Err(Error::Config("adapter widths must be positive".into()));
        }
        if self.d_common + self.d_specific != self.d_adapter {
            return Err(Error::Config(format!(
                "d_common + d_specific ({} + {}) must equal d_adapter ({})",
                self.d_common, self.d_specific, self.d_adapter
            )));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        if self.volume_shape.contains(&0) {
            return Err(Error::Config("volume_shape must be positive".into()));
        }
        self.volume.validate()?;
        check_temperature(self.temperature)
    }

    pub fn adapter_widths(&self) -> Vec<usize> {
        let mut w = vec![self.d_text];
        w.extend(&self.adapter_hidden);
        w.push(self.d_adapter);
        w
    }
}

/// Ablation switches; each removes one component independently.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub no_disentangle: bool,
    pub no_alignment: bool,
    pub no_fusion: bool,
    pub no_progressive: bool,
}

impl Ablations {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_progressive {
            parts.push("w/o progressive classifier");
        }
        if self.no_alignment {
            parts.push("w/o multi-modality alignment");
        }
        if self.no_disentangle {
            parts.push("w/o disentanglement");
        }
        if self.no_fusion {
            parts.push("w/o fusion");
        }
        if parts.is_empty() {
            "full model".to_owned()
        } else {
            parts.join(", ")
        }
    }
}

/// A subject with frozen text embeddings and preprocessed volumes.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSubject<T> {
    pub id: String,
    pub label: SubType,
    pub text: [Option<Vec<T>>; 3],
    pub mri: Option<Vec<T>>,
    pub pet: Option<Vec<T>>,
}

impl<T> PreparedSubject<T> {
    pub fn stages_available(&self) -> usize {
        match (&self.mri, &self.pet) {
            (Some(_), Some(_)) => 3,
            (Some(_), None) => 2,
            _ => 1,
        }
    }
}

/// Outputs of one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub n: usize,
    /// Batch rows reaching each stage; `rows[0]` is every row.
    pub rows: [Vec<usize>; 3],
    /// `features[k]`: stage feature over `rows[k]`.
    pub features: [Option<Var>; 3],
    /// `probs[k]`: sub-type probabilities over `rows[k]`.
    pub probs: [Option<Var>; 3],
    /// Text presence indicators, n × 1 each.
    pub masks: [Var; 3],
    pub presence: [Vec<bool>; 3],
    pub commons: Option<[Var; 3]>,
    pub specifics: Option<[Var; 3]>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub ablations: Ablations,
    pub params: ParamStore<T>,
    text: TextEncoder,
    criteria_text: Array2<T>,
    adapters: Vec<Adapter>,
    disentangler: Option<Disentangler>,
    stage1: Stage1Projection,
    mri_encoder: VolumeEncoder,
    pet_encoder: VolumeEncoder,
    fusion: Option<Fusion>,
    concat_fusion: Option<ConcatFusion>,
    criteria: CriteriaProjection,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialised model; parameters are a pure function of
    /// `(config, ablations, seed)`.
    pub fn new(config: ModelConfig, ablations: Ablations, seed: u64) -> Result<Self> {
        config.validate()?;
        let text = match &config.external_embeddings {
            Some(path) => TextEncoder::with_external(config.d_text, load_external_embeddings(path, config.d_text)?)?,
            None => TextEncoder::new(config.d_text),
        };
        let criteria_text = criteria_text_matrix(&text, &guideline_corpus())?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let widths = config.adapter_widths();
        let adapters = if config.shared_adapter {
            vec![Adapter::new(&mut params, "adapter", &widths, &mut rng)]
        } else {
            ["adapter_p", "adapter_h", "adapter_d"]
                .iter()
                .map(|name| Adapter::new(&mut params, name, &widths, &mut rng))
                .collect()
        };
        let disentangler = (!ablations.no_disentangle).then(|| {
            Disentangler::new(
                &mut params,
                "disentangle",
                config.d_adapter,
                config.d_common,
                config.d_specific,
                &mut rng,
            )
        });
        let stage1 = Stage1Projection::new(&mut params, "stage1", config.d_adapter, config.d, &mut rng);
        let mri_encoder = VolumeEncoder::new(
            &mut params,
            "mri",
            2,
            config.volume_shape,
            &config.volume,
            config.d,
            &mut rng,
        );
        let pet_encoder = VolumeEncoder::new(
            &mut params,
            "pet",
            3,
            config.volume_shape,
            &config.volume,
            config.d,
            &mut rng,
        );
        let (fusion, concat_fusion) = if ablations.no_fusion {
            (
                None,
                Some(ConcatFusion::new(&mut params, "concat_fusion", config.d, &mut rng)),
            )
        } else {
            (
                Some(Fusion::new(
                    &mut params,
                    "fusion",
                    config.d,
                    config.heads,
                    config.ffw_width,
                    &mut rng,
                )),
                None,
            )
        };
        let criteria = CriteriaProjection::new(&mut params, "criteria", config.d_text, config.d, &mut rng);

        Ok(Self {
            config,
            ablations,
            params,
            text,
            criteria_text,
            adapters,
            disentangler,
            stage1,
            mri_encoder,
            pet_encoder,
            fusion,
            concat_fusion,
            criteria,
        })
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn adapter(&self, component: TextComponent) -> &Adapter {
        if self.adapters.len() == 1 {
            &self.adapters[0]
        } else {
            &self.adapters[component.index()]
        }
    }

    pub fn disentangler(&self) -> Option<&Disentangler> {
        self.disentangler.as_ref()
    }

    pub fn stage1_projection(&self) -> &Stage1Projection {
        &self.stage1
    }

    pub fn volume_encoder(&self, stage: u8) -> &VolumeEncoder {
        if stage == 2 {
            &self.mri_encoder
        } else {
            &self.pet_encoder
        }
    }

    pub fn fusion(&self) -> Option<&Fusion> {
        self.fusion.as_ref()
    }

    pub fn criteria_projection(&self) -> &CriteriaProjection {
        &self.criteria
    }

    pub fn criteria_text(&self) -> &Array2<T> {
        &self.criteria_text
    }

    fn vector(values: &[f64]) -> Vec<T> {
        values.iter().map(|&x| T::of(x)).collect()
    }

    /// Textualizes, encodes and preprocesses one record.
    pub fn prepare(&self, record: &SubjectRecord) -> Result<PreparedSubject<T>> {
        let bundle = textualize_tabular(&record.tabular, self.config.template_id);
        let mut text: [Option<Vec<T>>; 3] = [None, None, None];
        for (slot, s) in text.iter_mut().zip(bundle.components()) {
            if let Some(s) = s {
                let e = self.text.encode(s)?;
                *slot = Some(Self::vector(e.as_slice()));
            }
        }
        if text.iter().all(Option::is_none) {
            return Err(Error::Input(format!(
                "subject {}: no textualized tabular data",
                record.id
            )));
        }
        let volume = |enc: &VolumeEncoder, v: &Option<crate::data::Volume>| -> Result<Option<Vec<T>>> {
            v.as_ref().map(|v| enc.preprocess(v)).transpose()
        };
        let mri = volume(&self.mri_encoder, &record.mri)?;
        let pet = volume(&self.pet_encoder, &record.pet)?;
        if pet.is_some() && mri.is_none() {
            return Err(Error::Validation(format!(
                "subject {}: PET present without MRI",
                record.id
            )));
        }
        Ok(PreparedSubject {
            id: record.id.clone(),
            label: record.label,
            text,
            mri,
            pet,
        })
    }

    pub fn prepare_all(&self, records: &[SubjectRecord]) -> Result<Vec<PreparedSubject<T>>> {
        records.iter().map(|r| self.prepare(r)).collect()
    }

    fn volume_batch(&self, subjects: &[&PreparedSubject<T>], rows: &[usize], pet: bool) -> Array2<T> {
        let voxels: usize = self.config.volume_shape.iter().product();
        let mut m = Array2::zeros((rows.len() * voxels, 1));
        for (b, &r) in rows.iter().enumerate() {
            let v = if pet { &subjects[r].pet } else { &subjects[r].mri };
            let v = v.as_ref().expect("row selected by availability");
            for (i, &x) in v.iter().enumerate() {
                m[[b * voxels + i, 0]] = x;
            }
        }
        m
    }

    fn fuse(&self, tape: &mut Tape<T>, features: &[Var]) -> Var {
        match (&self.fusion, &self.concat_fusion) {
            (Some(f), _) => f.forward(tape, &self.params, features),
            (None, Some(c)) => c.forward(tape, &self.params, features),
            (None, None) => unreachable!("one fusion variant is always built"),
        }
    }

    /// Forward pass over `subjects`, computing every stage up to `max_stage`
    /// that each subject has the modalities for.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        subjects: &[&PreparedSubject<T>],
        max_stage: usize,
    ) -> Result<ForwardPass> {
        let n = subjects.len();
        if n == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        let d_text = self.config.d_text;
        let mut presence: [Vec<bool>; 3] = Default::default();
        let mut text_vars = Vec::with_capacity(3);
        let mut masks = Vec::with_capacity(3);
        for c in 0..3 {
            let mut e = Array2::zeros((n, d_text));
            let mut m = Array2::zeros((n, 1));
            for (i, s) in subjects.iter().enumerate() {
                if let Some(v) = &s.text[c] {
                    if v.len() != d_text {
                        return Err(Error::shape("text embedding", d_text, v.len()));
                    }
                    e.row_mut(i).assign(&ndarray::ArrayView1::from(v.as_slice()));
                    m[[i, 0]] = T::one();
                    presence[c].push(true);
                } else {
                    presence[c].push(false);
                }
            }
            text_vars.push(tape.constant(e));
            masks.push(tape.constant(m));
        }
        if let Some(i) = (0..n).find(|&i| (0..3).all(|c| !presence[c][i])) {
            return Err(Error::Input(format!(
                "subject {} has no textualized tabular data",
                subjects[i].id
            )));
        }
        let masks: [Var; 3] = [masks[0], masks[1], masks[2]];

        let mut blocks = Vec::with_capacity(3);
        let mut commons = Vec::new();
        let mut specifics = Vec::new();
        for (c, component) in TextComponent::ALL.into_iter().enumerate() {
            let a = self.adapter(component).forward(tape, &self.params, text_vars[c]);
            let block = match &self.disentangler {
                Some(dis) => {
                    let (cm, sp) = dis.forward(tape, &self.params, a);
                    commons.push(cm);
                    specifics.push(sp);
                    tape.concat_cols(&[cm, sp])
                }
                None => a,
            };
            blocks.push(tape.mul_col(block, masks[c]));
        }
        let f1 = self
            .stage1
            .forward(tape, &self.params, [blocks[0], blocks[1], blocks[2]]);

        let rows1: Vec<usize> = (0..n).collect();
        let rows2: Vec<usize> = if max_stage >= 2 {
            (0..n).filter(|&i| subjects[i].stages_available() >= 2).collect()
        } else {
            Vec::new()
        };
        let rows3: Vec<usize> = if max_stage >= 3 {
            (0..n).filter(|&i| subjects[i].stages_available() >= 3).collect()
        } else {
            Vec::new()
        };

        let f2 = (!rows2.is_empty()).then(|| {
            let x = tape.constant(self.volume_batch(subjects, &rows2, false));
            self.mri_encoder.forward(tape, &self.params, x, rows2.len())
        });
        let f3 = (!rows3.is_empty()).then(|| {
            let x = tape.constant(self.volume_batch(subjects, &rows3, true));
            self.pet_encoder.forward(tape, &self.params, x, rows3.len())
        });

        let crit_text = tape.constant(self.criteria_text.clone());
        let crit = self.criteria.forward(tape, &self.params, crit_text);
        let tau = T::of(self.config.temperature);

        let mut probs: [Option<Var>; 3] = [None, None, None];
        let fused1 = self.fuse(tape, &[f1]);
        probs[0] = Some(scores_node(tape, fused1, crit, tau));
        if let Some(f2) = f2 {
            let f1s = tape.select_rows(f1, &rows2);
            let fused = self.fuse(tape, &[f1s, f2]);
            probs[1] = Some(scores_node(tape, fused, crit, tau));
        }
        if let Some(f3) = f3 {
            let f1s = tape.select_rows(f1, &rows3);
            let pos = positions(&rows2, &rows3);
            let f2s = tape.select_rows(f2.expect("stage 3 implies stage 2"), &pos);
            let fused = self.fuse(tape, &[f1s, f2s, f3]);
            probs[2] = Some(scores_node(tape, fused, crit, tau));
        }

        let to3 = |v: Vec<Var>| -> Option<[Var; 3]> { (v.len() == 3).then(|| [v[0], v[1], v[2]]) };
        Ok(ForwardPass {
            n,
            rows: [rows1, rows2, rows3],
            features: [Some(f1), f2, f3],
            probs,
            masks,
            presence,
            commons: to3(commons),
            specifics: to3(specifics),
            labels: subjects.iter().map(|s| s.label.code()).collect(),
        })
    }

    /// Per-stage probabilities for each subject (`None` where the subject
    /// lacks the stage's modality).
    pub fn stage_probabilities(&self, subjects: &[&PreparedSubject<T>]) -> Result<Vec<[Option<[f64; 4]>; 3]>> {
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(subjects.len());
        for chunk in subjects.chunks(CHUNK) {
            let mut tape = Tape::new();
            let pass = self.forward(&mut tape, chunk, 3)?;
            let mut rows: Vec<[Option<[f64; 4]>; 3]> = vec![[None; 3]; chunk.len()];
            for k in 0..3 {
                if let Some(p) = pass.probs[k] {
                    let v = tape.value(p);
                    for (j, &r) in pass.rows[k].iter().enumerate() {
                        rows[r][k] = Some([0, 1, 2, 3].map(|c| v[[j, c]].as_f64()));
                    }
                }
            }
            out.extend(rows);
        }
        Ok(out)
    }

    /// Replaces parameters from named arrays; names and shapes must match.
    pub fn load_params(&mut self, named: Vec<(String, Array2<T>)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "checkpoint holds {} arrays, model expects {}",
                named.len(),
                self.params.len()
            )));
        }
        for (name, value) in named {
            let id = self
                .params
                .id(&name)
                .ok_or_else(|| Error::Validation(format!("unknown parameter {name}")))?;
            let slot = self.params.get_mut(id);
            if slot.dim() != value.dim() {
                return Err(Error::shape(
                    format!("parameter {name}"),
                    format!("{:?}", slot.dim()),
                    format!("{:?}", value.dim()),
                ));
            }
            *slot = value;
        }
        Ok(())
    }
}

/// Index of each element of `subset` within `superset` (both sorted).
fn positions(superset: &[usize], subset: &[usize]) -> Vec<usize> {
    subset
        .iter()
        .map(|r| superset.binary_search(r).expect("nested availability"))
        .collect()
}
