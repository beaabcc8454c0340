use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::data::TextComponent;
use crate::encoders::TextEmbedding;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::scalar::Scalar;

/// Adapted text feature of one component.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterOutput<T> {
    pub component: TextComponent,
    pub values: Vec<T>,
}

/// Trainable perceptron between the frozen text encoder and the rest of the
/// model.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    mlp: Mlp,
}

impl Adapter {
    /// `widths = [d_text, hidden.., d_a]`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        Self {
            mlp: Mlp::new(store, name, widths, rng),
        }
    }

    pub fn layer_count(&self) -> usize {
        self.mlp.depth()
    }

    pub fn d_in(&self) -> usize {
        self.mlp.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.mlp.d_out()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        self.mlp.forward(tape, store, x)
    }

    pub fn adapt<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        e: &TextEmbedding,
        component: TextComponent,
    ) -> Result<AdapterOutput<T>> {
        if e.dim() != self.d_in() {
            return Err(Error::shape("text embedding", self.d_in(), e.dim()));
        }
        let mut tape = Tape::new();
        let x = tape.constant(Array2::from_shape_fn((1, e.dim()), |(_, j)| T::of(e.as_slice()[j])));
        let y = self.forward(&mut tape, store, x);
        Ok(AdapterOutput {
            component,
            values: tape.value(y).iter().copied().collect(),
        })
    }
}
