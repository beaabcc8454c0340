//! Finite-difference checks of every trainable block at full width.

use super::{fd_check, normal, project, rng};
use stagewise::autodiff::ParamStore;
use stagewise::data::{guideline_corpus, Volume};
use stagewise::disentangle::{mi_penalty_node, orthogonal_loss_rows, Disentangler, Stage1Projection};
use stagewise::encoders::{Adapter, TextEncoder, VolumeEncoder, VolumeEncoderConfig};
use stagewise::fusion_align::{criteria_text_matrix, scores_node, CriteriaProjection, Fusion};

pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 10;

pub fn adapter(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let adapter = Adapter::new(&mut store, "a", &[512, 256, 256, 256, 128], &mut r);
    let x = normal(&mut r, 3, 512);
    let w = normal(&mut r, 3, 128);
    fd_check(&mut store, 12, seed, |t, s| {
        let x = t.constant(x.clone());
        let y = adapter.forward(t, s, x);
        project(t, y, &w)
    })
}

pub fn disentangler(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let d = Disentangler::new(&mut store, "d", 128, 64, 64, &mut r);
    let xs: Vec<_> = (0..3).map(|_| normal(&mut r, 6, 128)).collect();
    let wc = normal(&mut r, 6, 64);
    let mut mask = ndarray::Array2::ones((6, 1));
    mask[[2, 0]] = 0.0;
    fd_check(&mut store, 12, seed, |t, s| {
        let mut cs = Vec::new();
        let mut ss = Vec::new();
        for x in &xs {
            let x = t.constant(x.clone());
            let (c, sp) = d.forward(t, s, x);
            cs.push(c);
            ss.push(sp);
        }
        let masks = [
            t.constant(mask.clone()),
            t.constant(ndarray::Array2::ones((6, 1))),
            t.constant(mask.clone()),
        ];
        let orth = orthogonal_loss_rows(t, [cs[0], cs[1], cs[2]], [ss[0], ss[1], ss[2]], masks);
        let orth = t.sum(orth);
        let mi = mi_penalty_node(t, cs[1], ss[1]);
        let p = project(t, cs[0], &wc);
        let a = t.add(orth, mi);
        t.add(a, p)
    })
}

pub fn stage1_projection(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let proj = Stage1Projection::new(&mut store, "p", 128, 128, &mut r);
    let blocks: Vec<_> = (0..3).map(|_| normal(&mut r, 4, 128)).collect();
    let w = normal(&mut r, 4, 128);
    fd_check(&mut store, 20, seed, |t, s| {
        let b: Vec<_> = blocks.iter().map(|b| t.constant(b.clone())).collect();
        let y = proj.forward(t, s, [b[0], b[1], b[2]]);
        project(t, y, &w)
    })
}

pub fn volume_encoder(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let enc = VolumeEncoder::new(
        &mut store,
        "v",
        2,
        [4, 4, 4],
        &VolumeEncoderConfig::default(),
        128,
        &mut r,
    );
    let vols: Vec<Volume> = (0..2)
        .map(|_| Volume::new([4, 4, 4], normal(&mut r, 64, 1).iter().map(|&x| x as f32).collect()).unwrap())
        .collect();
    let refs: Vec<&Volume> = vols.iter().collect();
    let x = enc.input_matrix::<f64>(&refs).unwrap();
    let w = normal(&mut r, 2, 128);
    fd_check(&mut store, 12, seed, |t, s| {
        let x = t.constant(x.clone());
        let y = enc.forward(t, s, x, 2);
        project(t, y, &w)
    })
}

pub fn fusion(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let fusion = Fusion::new(&mut store, "f", 128, 4, 512, &mut r);
    let feats: Vec<_> = (0..3).map(|_| normal(&mut r, 3, 128)).collect();
    let w = normal(&mut r, 3, 128);
    fd_check(&mut store, 12, seed, |t, s| {
        let f: Vec<_> = feats.iter().map(|f| t.constant(f.clone())).collect();
        let y = fusion.forward(t, s, &f);
        project(t, y, &w)
    })
}

pub fn criteria_projection(seed: u64) -> f64 {
    let encoder = TextEncoder::new(512);
    let text = criteria_text_matrix::<f64>(&encoder, &guideline_corpus()).unwrap();
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let crit = CriteriaProjection::new(&mut store, "c", 512, 128, &mut r);
    let fused = normal(&mut r, 5, 128);
    let labels = [0, 1, 2, 3, 1];
    fd_check(&mut store, 20, seed, |t, s| {
        let e = t.constant(text.clone());
        let c = crit.forward(t, s, e);
        let f = t.constant(fused.clone());
        let p = scores_node(t, f, c, 0.1);
        let l = t.neg_log_pick(p, &labels, 1e-12);
        t.sum(l)
    })
}

/// Block name and its worst error for one seed.
pub type BlockCheck = fn(u64) -> f64;

pub const BLOCKS: [(&str, BlockCheck); 6] = [
    ("adapter", adapter),
    ("disentangler", disentangler),
    ("stage-1 projection", stage1_projection),
    ("volume encoder", volume_encoder),
    ("fusion", fusion),
    ("criteria projection", criteria_projection),
];
