mod common;

use ndarray::Array2;
use proptest::prelude::*;
use stagewise::autodiff::{ParamStore, Tape};
use stagewise::data::{textualize_tabular, DementiaLevel, Gender, SubType, Tabular, TemplateId, TextComponent, Volume};
use stagewise::disentangle::{mi_penalty, orthogonal_loss, DisentangledPair};
use stagewise::encoders::TextEncoder;
use stagewise::fusion_align::{
    alignment_loss, contrastive_scores, CriterionEmbedding, FusedFeature, Fusion, StageFeature,
};
use stagewise::progressive::{batch_loss, confidence, decide, PolicyConfig};
use stagewise::{Ablations, Model};

fn tabular() -> impl Strategy<Value = Tabular> {
    let flag = || proptest::option::of(any::<bool>());
    (
        (
            proptest::option::of(40u32..100),
            proptest::option::of(0u32..25),
            proptest::option::of(prop_oneof![Just(Gender::Female), Just(Gender::Male)]),
        ),
        (flag(), flag(), flag(), flag(), flag()),
        proptest::option::of(-5.0f64..5.0),
        proptest::option::of(proptest::sample::select(DementiaLevel::ALL.to_vec())),
    )
        .prop_map(
            |((age, education, gender), (ha, ht, st, aa, pd), blood_test, dementia_level)| Tabular {
                age,
                education,
                gender,
                heart_attack: ha,
                hypertension: ht,
                stroke: st,
                alcohol_abuse: aa,
                psychiatric_disorder: pd,
                blood_test,
                dementia_level,
            },
        )
}

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-3.0f64..3.0, d)
        .prop_filter("non-degenerate", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

fn probs() -> impl Strategy<Value = [f64; 4]> {
    proptest::array::uniform4(0.001f64..1.0).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.map(|x| x / s)
    })
}

fn pair(common: Vec<f64>, specific: Vec<f64>, source: TextComponent) -> DisentangledPair<f64> {
    DisentangledPair {
        common,
        specific,
        source,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn templates_extend_each_clause(t in tabular()) {
        let renders: Vec<_> = (1..=3).map(|id| textualize_tabular(&t, TemplateId::new(id).unwrap())).collect();
        for c in TextComponent::ALL {
            let texts: Vec<Option<&str>> = renders.iter().map(|r| r.get(c)).collect();
            prop_assert!(texts.iter().all(|x| x.is_some()) || texts.iter().all(|x| x.is_none()));
            if let [Some(a), Some(b), Some(d)] = texts[..] {
                let split = |s: &str| s.split("; ").map(str::to_owned).collect::<Vec<_>>();
                let (a, b, d) = (split(a), split(b), split(d));
                prop_assert_eq!(a.len(), b.len());
                prop_assert_eq!(b.len(), d.len());
                for i in 0..a.len() {
                    prop_assert!(b[i].starts_with(&a[i]));
                    prop_assert!(d[i].starts_with(&b[i]));
                }
            }
        }
    }

    #[test]
    fn textualize_is_pure(t in tabular(), id in 1u8..=3) {
        let template = TemplateId::new(id).unwrap();
        prop_assert_eq!(textualize_tabular(&t, template), textualize_tabular(&t, template));
    }

    #[test]
    fn text_encoder_ignores_call_order(a in "[a-z ]{1,40}[a-z]", b in "[a-z ]{1,40}[a-z]") {
        let enc = TextEncoder::new(64);
        let first = enc.encode(&a).unwrap();
        enc.encode(&b).unwrap();
        prop_assert_eq!(first, enc.encode(&a).unwrap());
        prop_assert_eq!(enc.encode(&a).unwrap(), TextEncoder::new(64).encode(&a).unwrap());
    }

    #[test]
    fn orthogonal_loss_is_symmetric_and_bounded(
        cs in proptest::collection::vec(vector(6), 3),
        ss in proptest::collection::vec(vector(5), 3),
    ) {
        let pairs: Vec<_> = (0..3).map(|i| pair(cs[i].clone(), ss[i].clone(), TextComponent::ALL[i])).collect();
        let base = orthogonal_loss(&pairs);
        for perm in [[1, 0, 2], [2, 1, 0], [1, 2, 0]] {
            let p: Vec<_> = perm.iter().map(|&i| pairs[i].clone()).collect();
            prop_assert!((orthogonal_loss(&p) - base).abs() < 1e-12);
        }
        // Three pairwise cosines among three vectors sum to at least -3/2.
        prop_assert!((-3.0 - 1e-12..=4.5 + 1e-12).contains(&base), "{}", base);
    }

    #[test]
    fn mi_penalty_is_nonnegative_and_affine_invariant(
        c in proptest::collection::vec(-2.0f64..2.0, 16 * 4),
        s in proptest::collection::vec(-2.0f64..2.0, 16 * 5),
        scale in proptest::collection::vec(prop_oneof![-4.0f64..-0.25, 0.25f64..4.0], 9),
        shift in proptest::collection::vec(-10.0f64..10.0, 9),
    ) {
        let c = Array2::from_shape_vec((16, 4), c).unwrap();
        let s = Array2::from_shape_vec((16, 5), s).unwrap();
        let base = mi_penalty(&c, &s).unwrap();
        prop_assert!(base >= 0.0);
        let mut c2 = c.clone();
        let mut s2 = s.clone();
        for j in 0..4 {
            c2.column_mut(j).mapv_inplace(|x| x * scale[j] + shift[j]);
        }
        for j in 0..5 {
            s2.column_mut(j).mapv_inplace(|x| x * scale[4 + j] + shift[4 + j]);
        }
        let moved = mi_penalty(&c2, &s2).unwrap();
        prop_assert!((moved - base).abs() <= 1e-8 * base.max(1.0), "{} vs {}", moved, base);
    }

    #[test]
    fn alignment_loss_is_nonnegative(f1 in vector(8), f2 in vector(8), f3 in vector(8)) {
        let sf = |stage, values: &Vec<f64>| StageFeature { stage, values: values.clone() };
        let l = alignment_loss(&sf(1, &f1), Some(&sf(2, &f2)), Some(&sf(3, &f3))).unwrap();
        prop_assert!(l >= 0.0);
        let same = alignment_loss(&sf(1, &f1), Some(&sf(2, &f1)), Some(&sf(3, &f1))).unwrap();
        prop_assert_eq!(same, 0.0);
        if f1 != f2 {
            prop_assert!(alignment_loss(&sf(1, &f1), Some(&sf(2, &f2)), None).unwrap() > 0.0);
        }
    }

    #[test]
    fn scores_are_a_distribution_invariant_to_scale(f in vector(8), rows in proptest::collection::vec(vector(8), 4), k in 0.01f64..100.0) {
        let mut m = Array2::zeros((4, 8));
        for (i, r) in rows.iter().enumerate() {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            for j in 0..8 {
                m[[i, j]] = r[j] / n;
            }
        }
        let criteria = CriterionEmbedding { rows: m };
        let p = contrastive_scores(&FusedFeature { stage: 1, values: f.clone() }, &criteria, 0.1).unwrap();
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let scaled = FusedFeature { stage: 1, values: f.iter().map(|x| x * k).collect() };
        let q = contrastive_scores(&scaled, &criteria, 0.1).unwrap();
        prop_assert_eq!(stagewise::progressive::argmax(&p), stagewise::progressive::argmax(&q));
    }

    #[test]
    fn softmax_ignores_logit_shift(logits in proptest::collection::vec(-20.0f64..20.0, 4), shift in -50.0f64..50.0) {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Array2::from_shape_vec((1, 4), logits.clone()).unwrap());
        let b = tape.constant(Array2::from_shape_vec((1, 4), logits.iter().map(|x| x + shift).collect()).unwrap());
        let (pa, pb) = (tape.softmax_rows(a), tape.softmax_rows(b));
        for j in 0..4 {
            prop_assert!((tape.value(pa)[[0, j]] - tape.value(pb)[[0, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn confidence_is_bounded(p in probs()) {
        let c = confidence(&p);
        prop_assert!((0.0..=1.0).contains(&c));
        let mut tied = p;
        let mut order = [0, 1, 2, 3];
        order.sort_by(|&i, &j| p[j].total_cmp(&p[i]));
        tied[order[1]] = tied[order[0]];
        prop_assert_eq!(confidence(&tied), 0.0);
    }

    #[test]
    fn decision_stage_is_monotone_in_threshold(outputs in proptest::collection::vec(proptest::array::uniform3(probs()), 1..40)) {
        let stages = |theta: f64| -> Vec<usize> {
            let cfg = PolicyConfig::default().with_threshold(theta);
            outputs
                .iter()
                .map(|o| decide(&o.map(Some), &cfg).unwrap().len())
                .collect()
        };
        let mut prev = stages(0.0);
        prop_assert!(prev.iter().all(|&s| s == 1));
        for theta in [0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 1.0] {
            let now = stages(theta);
            prop_assert!(now.iter().zip(&prev).all(|(n, p)| n >= p));
            let cost = now.iter().sum::<usize>() as f64 / now.len() as f64;
            prop_assert!((1.0..=3.0).contains(&cost));
            prev = now;
        }
        let off = PolicyConfig { progressive: false, ..PolicyConfig::default() };
        prop_assert!(outputs.iter().all(|o| decide(&o.map(Some), &off).unwrap().len() == 3));
    }
}

#[test]
fn confidence_zero_only_on_ties() {
    assert!(confidence(&[0.4, 0.35, 0.15, 0.1]) > 0.0);
    assert_eq!(confidence(&[0.3, 0.3, 0.3, 0.1]), 0.0);
    assert_eq!(confidence(&[0.25; 4]), 0.0);
}

#[test]
fn fusion_ignores_feature_order() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = common::rng(11);
    let fusion = Fusion::new(&mut store, "fusion", 128, 4, 512, &mut rng);
    let feats: Vec<StageFeature<f64>> = (1..=3)
        .map(|s| StageFeature {
            stage: s,
            values: common::normal(&mut rng, 1, 128).into_raw_vec_and_offset().0,
        })
        .collect();
    let base = fusion.fuse(&store, &feats).unwrap();
    assert_eq!(base.values.len(), 128);
    assert!(base.values.iter().all(|x| x.is_finite()));
    for perm in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let p: Vec<_> = perm.iter().map(|&i| feats[i].clone()).collect();
        let out = fusion.fuse(&store, &p).unwrap();
        for (a, b) in base.values.iter().zip(&out.values) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn volume_encoders_do_not_share_parameters() {
    let cfg = common::tiny_model();
    let mut model = Model::<f64>::new(cfg, Ablations::default(), 5).unwrap();
    let v = Volume::new([4, 4, 4], (0..64).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let pet = model.volume_encoder(3).encode_volume(&model.params, &v).unwrap();
    let mri = model.volume_encoder(2).encode_volume(&model.params, &v).unwrap();
    assert_ne!(pet.values, mri.values);
    let ids: Vec<usize> = (0..model.params.len())
        .filter(|&id| model.params.name(id).starts_with("mri."))
        .collect();
    assert!(!ids.is_empty());
    for id in ids {
        model.params.get_mut(id).mapv_inplace(|x| x * 3.0 + 1.0);
    }
    assert_eq!(model.volume_encoder(3).encode_volume(&model.params, &v).unwrap(), pet);
    assert_ne!(model.volume_encoder(2).encode_volume(&model.params, &v).unwrap(), mri);
}

#[test]
fn total_loss_matches_its_breakdown() {
    let cohort = common::tiny_cohort(40, 9);
    for ablations in [
        Ablations::default(),
        Ablations {
            no_disentangle: true,
            ..Ablations::default()
        },
        Ablations {
            no_alignment: true,
            ..Ablations::default()
        },
    ] {
        let model = Model::<f64>::new(common::tiny_model(), ablations, 2).unwrap();
        let prepared = model.prepare_all(&cohort).unwrap();
        let batch: Vec<_> = prepared.iter().collect();
        let mut tape = Tape::new();
        let (root, breakdown) = batch_loss(&mut tape, &model, &batch, &PolicyConfig::default()).unwrap();
        let sum: f64 = breakdown.terms().iter().map(|(_, v)| v).sum();
        assert!((sum - breakdown.total).abs() <= 1e-9 * breakdown.total.abs().max(1.0));
        assert!((tape.scalar(root) - breakdown.total).abs() <= 1e-12 * breakdown.total.abs().max(1.0));
        assert_eq!(breakdown.mi.is_some(), !ablations.no_disentangle);
        assert_eq!(breakdown.orthogonal.is_some(), !ablations.no_disentangle);
        assert_eq!(breakdown.alignment.is_some(), !ablations.no_alignment);
        assert!(breakdown.stage.iter().all(|s| s.is_some()));
    }
}

#[test]
fn subtype_codes_round_trip() {
    for s in SubType::ALL {
        assert_eq!(SubType::from_code(s.code()), Some(s));
    }
}
