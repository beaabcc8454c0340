//! Small 3D convolutional encoder for MRI/PET volumes.
//!
//! Each block is a 3×3×3 convolution (padding 1) followed by per-sample
//! standardisation over the whole feature map and a rectifier. Global average
//! pooling and a linear head map the last feature map to the stage dimension.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, ParamId, ParamStore, Tape, Var};
use crate::data::Volume;
use crate::error::{Error, Result};
use crate::nn::{he_normal, Linear};
use crate::scalar::Scalar;

const KERNEL: usize = 3;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeEncoderConfig {
    /// Output channels per block.
    pub channels: Vec<usize>,
    /// Convolution stride per block.
    pub strides: Vec<usize>,
    /// Per-volume z-scoring before the first block.
    pub standardize: bool,
}

impl Default for VolumeEncoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![4, 8, 16],
            strides: vec![1, 2, 2],
            standardize: true,
        }
    }
}

impl VolumeEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "volume encoder needs matching non-empty channels/strides, got {:?} / {:?}",
                self.channels, self.strides
            )));
        }
        if self.channels.iter().chain(&self.strides).any(|&c| c == 0) {
            return Err(Error::Config(
                "volume encoder channels and strides must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Feature of an imaging stage (2 = MRI, 3 = PET).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeature<T> {
    pub stage: u8,
    pub values: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    c_in: usize,
    stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeEncoder {
    stage: u8,
    in_shape: [usize; 3],
    standardize: bool,
    blocks: Vec<ConvBlock>,
    head: Linear,
}

/// Z-scores a volume; a constant volume maps to zeros.
pub fn standardize_volume(v: &Volume) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.data().iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let var = v.data().iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd <= 1e-12 * mean.abs().max(1.0) {
        return vec![0.0; v.len()];
    }
    v.data().iter().map(|&x| (f64::from(x) - mean) / sd).collect()
}

impl VolumeEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        stage: u8,
        in_shape: [usize; 3],
        cfg: &VolumeEncoderConfig,
        d: usize,
        rng: &mut R,
    ) -> Self {
        let mut c_in = 1;
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        for (i, (&c_out, &stride)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
            let fan_in = KERNEL * KERNEL * KERNEL * c_in;
            let weight = store.add(format!("{name}.conv{i}.weight"), he_normal(rng, fan_in, c_out, 1.0));
            let bias = store.add(format!("{name}.conv{i}.bias"), Array2::zeros((1, c_out)));
            blocks.push(ConvBlock {
                weight,
                bias,
                c_in,
                stride,
            });
            c_in = c_out;
        }
        let head = Linear::new(store, &format!("{name}.head"), c_in, d, rng);
        Self {
            stage,
            in_shape,
            standardize: cfg.standardize,
            blocks,
            head,
        }
    }

    pub fn stage(&self) -> u8 {
        self.stage
    }

    pub fn in_shape(&self) -> [usize; 3] {
        self.in_shape
    }

    pub fn d_out(&self) -> usize {
        self.head.d_out
    }

    /// Shape-checks and (optionally) z-scores one volume.
    pub fn preprocess<T: Scalar>(&self, v: &Volume) -> Result<Vec<T>> {
        self.check_shape(v)?;
        Ok(if self.standardize {
            standardize_volume(v).into_iter().map(T::of).collect()
        } else {
            v.data().iter().map(|&x| T::of(f64::from(x))).collect()
        })
    }

    /// Stacks volumes into the `(n * voxels) × 1` layout `forward` expects.
    pub fn input_matrix<T: Scalar>(&self, volumes: &[&Volume]) -> Result<Array2<T>> {
        let voxels: usize = self.in_shape.iter().product();
        let mut m = Array2::zeros((volumes.len() * voxels, 1));
        for (b, v) in volumes.iter().enumerate() {
            for (i, x) in self.preprocess::<T>(v)?.into_iter().enumerate() {
                m[[b * voxels + i, 0]] = x;
            }
        }
        Ok(m)
    }

    pub fn check_shape(&self, v: &Volume) -> Result<()> {
        if v.shape() != self.in_shape {
            return Err(Error::shape(
                format!("stage-{} volume", self.stage),
                format!("{:?}", self.in_shape),
                format!("{:?}", v.shape()),
            ));
        }
        Ok(())
    }

    /// `x`: `(batch * voxels) × 1`; returns `batch × d`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, batch: usize) -> Var {
        let mut h = x;
        let mut shape = self.in_shape;
        for block in &self.blocks {
            let geom = ConvGeometry {
                batch,
                in_shape: shape,
                channels: block.c_in,
                kernel: KERNEL,
                stride: block.stride,
                pad: 1,
            };
            let cols = tape.im2col(h, geom);
            let w = tape.param(store, block.weight);
            let b = tape.param(store, block.bias);
            let conv = tape.matmul(cols, w);
            let conv = tape.add_bias(conv, b);
            shape = geom.out_shape();
            let norm = tape.group_standardize(conv, geom.out_voxels(), T::of(NORM_EPS));
            h = tape.relu(norm);
        }
        let pooled = tape.group_mean(h, shape.iter().product());
        self.head.forward(tape, store, pooled)
    }

    pub fn encode_volume<T: Scalar>(&self, store: &ParamStore<T>, v: &Volume) -> Result<ImageFeature<T>> {
        let x = self.input_matrix::<T>(&[v])?;
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let y = self.forward(&mut tape, store, x, 1);
        Ok(ImageFeature {
            stage: self.stage,
            values: tape.value(y).iter().copied().collect(),
        })
    }
}
