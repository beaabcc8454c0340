//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! `Array2<T>`; by convention rows index samples (or voxels) and columns index
//! features. [`Tape::backward`] seeds a 1×1 node with one and walks the tape in
//! reverse, accumulating gradients for parameters and any node that requires
//! them.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::scalar::Scalar;

/// Index of a parameter tensor inside a [`ParamStore`].
pub type ParamId = usize;

/// Named parameter tensors. Two stores never share storage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Plain gradient step `p -= lr * g`.
    pub fn sgd_step(&mut self, grads: &Grads<T>, lr: T) {
        for (id, value) in self.values.iter_mut().enumerate() {
            if let Some(g) = grads.param(id) {
                value.scaled_add(-lr, g);
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 3×3×3-style convolution lowered to a matrix product.
///
/// Input rows are `batch * depth * height * width` voxels in (z, y, x)
/// order, sample-major; columns are channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_shape: [usize; 3],
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_shape(&self) -> [usize; 3] {
        let f = |n: usize| (n + 2 * self.pad - self.kernel) / self.stride + 1;
        [f(self.in_shape[0]), f(self.in_shape[1]), f(self.in_shape[2])]
    }

    pub fn in_voxels(&self) -> usize {
        self.in_shape.iter().product()
    }

    pub fn out_voxels(&self) -> usize {
        self.out_shape().iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    /// Input voxel feeding output voxel `out` through kernel tap `tap`.
    fn source(&self, out: usize, tap: usize) -> Option<usize> {
        let [_, oh, ow] = self.out_shape();
        let [d, h, w] = self.in_shape;
        let (oz, rem) = (out / (oh * ow), out % (oh * ow));
        let (oy, ox) = (rem / ow, rem % ow);
        let k = self.kernel;
        let (kz, rem) = (tap / (k * k), tap % (k * k));
        let (ky, kx) = (rem / k, rem % k);
        let iz = (oz * self.stride + kz) as isize - self.pad as isize;
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
            return None;
        }
        Some((iz as usize * h + iy as usize) * w + ix as usize)
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    RowSum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    RepeatRows(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    NormalizeRows(Var),
    RowCosine(Var, Var),
    NegLogPick(Var, Vec<usize>, T),
    TopGap(Var),
    ColStandardize(Var),
    GroupStandardize(Var, usize, T),
    GroupMean(Var, usize),
    Im2col(Var, ConvGeometry),
    StopGrad,
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    params: Vec<Option<Array2<T>>>,
    nodes: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn param(&self, id: ParamId) -> Option<&Array2<T>> {
        self.params.get(id).and_then(Option::as_ref)
    }

    /// Gradient with respect to a recorded node, if it required one.
    pub fn wrt(&self, var: Var) -> Option<&Array2<T>> {
        self.nodes.get(var.0).and_then(Option::as_ref)
    }
}

/// One forward pass worth of recorded operations.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    n_params: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            n_params: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is tracked (e.g. an input under test).
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.n_params = self.n_params.max(store.len());
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// Adds a 1×m row vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let v = self.value(a) + self.value(bias);
        let rg = self.rg(a) || self.rg(bias);
        self.push(v, Op::AddBias(a, bias), rg)
    }

    /// Elementwise sum; a 1×m operand is broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        if self.shape(b).0 == 1 && self.shape(a).0 != 1 {
            return self.add_bias(a, b);
        }
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Scales each row of `a` (n×m) by the matching entry of `col` (n×1).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) * self.value(col);
        let rg = self.rg(a) || self.rg(col);
        self.push(v, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a) * s;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(T::abs);
        let rg = self.rg(a);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a), rg)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(v, Op::RowSum(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), rows);
        let rg = self.rg(a);
        self.push(v, Op::SelectRows(a, rows.to_vec()), rg)
    }

    /// Broadcasts a 1×m row to n×m.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let row = self.value(a);
        assert_eq!(row.nrows(), 1);
        let v = row.broadcast((n, row.ncols())).expect("broadcast").to_owned();
        let rg = self.rg(a);
        self.push(v, Op::RepeatRows(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(T::neg_infinity(), |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// L2-normalises each row; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > T::zero() {
                row.mapv_inplace(|x| x / n);
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::NormalizeRows(a), rg)
    }

    /// Row-wise cosine similarity (n×1). A zero row has cosine 0.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Array2::zeros((va.nrows(), 1));
        for (i, (ra, rb)) in va.rows().into_iter().zip(vb.rows()).enumerate() {
            let (na, nb) = (ra.dot(&ra).sqrt(), rb.dot(&rb).sqrt());
            if na > T::zero() && nb > T::zero() {
                out[[i, 0]] = ra.dot(&rb) / (na * nb);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::RowCosine(a, b), rg)
    }

    /// `-ln(max(p[i, label_i], floor))` per row, as n×1.
    pub fn neg_log_pick(&mut self, probs: Var, labels: &[usize], floor: T) -> Var {
        let p = self.value(probs);
        let v = Array2::from_shape_fn((p.nrows(), 1), |(i, _)| -p[[i, labels[i]]].max(floor).ln());
        let rg = self.rg(probs);
        self.push(v, Op::NegLogPick(probs, labels.to_vec(), floor), rg)
    }

    /// Largest minus second-largest entry of each row, as n×1.
    pub fn top_gap(&mut self, a: Var) -> Var {
        let p = self.value(a);
        let v = Array2::from_shape_fn((p.nrows(), 1), |(i, _)| {
            let (first, second) = top_two(p.row(i).as_slice().expect("row-major"));
            p[[i, first]] - p[[i, second]]
        });
        let rg = self.rg(a);
        self.push(v, Op::TopGap(a), rg)
    }

    /// Standardises each column over the rows with population statistics.
    /// Zero-variance columns map to zero.
    pub fn col_standardize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (mean, std) = col_stats(x);
        let mut v = x.clone();
        for (j, mut col) in v.columns_mut().into_iter().enumerate() {
            if std[j] > T::zero() {
                col.mapv_inplace(|e| (e - mean[j]) / std[j]);
            } else {
                col.fill(T::zero());
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::ColStandardize(a), rg)
    }

    /// Standardises each block of `group` consecutive rows over all of its
    /// entries, with `eps` added to the variance.
    pub fn group_standardize(&mut self, a: Var, group: usize, eps: T) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.nrows() % group, 0);
        for mut block in v.axis_chunks_iter_mut(Axis(0), group) {
            let n = T::from_usize(block.len()).unwrap();
            let mean = block.sum() / n;
            let var = block.fold(T::zero(), |acc, &e| acc + (e - mean) * (e - mean)) / n;
            let sd = (var + eps).sqrt();
            block.mapv_inplace(|e| (e - mean) / sd);
        }
        let rg = self.rg(a);
        self.push(v, Op::GroupStandardize(a, group, eps), rg)
    }

    /// Mean over each block of `group` consecutive rows.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows() % group, 0);
        let n = T::from_usize(group).unwrap();
        let mut v = Array2::zeros((x.nrows() / group, x.ncols()));
        for (i, block) in x.axis_chunks_iter(Axis(0), group).enumerate() {
            v.row_mut(i).assign(&(block.sum_axis(Axis(0)) / n));
        }
        let rg = self.rg(a);
        self.push(v, Op::GroupMean(a, group), rg)
    }

    /// Unfolds convolution patches: output has one row per output voxel and
    /// `taps * channels` columns (tap-major).
    pub fn im2col(&mut self, a: Var, geom: ConvGeometry) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), (geom.batch * geom.in_voxels(), geom.channels));
        let (vin, vout, taps, c) = (geom.in_voxels(), geom.out_voxels(), geom.taps(), geom.channels);
        let mut v = Array2::zeros((geom.batch * vout, taps * c));
        for b in 0..geom.batch {
            for o in 0..vout {
                let mut row = v.row_mut(b * vout + o);
                for tap in 0..taps {
                    if let Some(src) = geom.source(o, tap) {
                        row.slice_mut(s![tap * c..(tap + 1) * c]).assign(&x.row(b * vin + src));
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::Im2col(a, geom), rg)
    }

    /// Copies the value of `a` into a node that blocks gradient flow.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad, false)
    }

    /// Back-propagates from the 1×1 node `root`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        let mut params: Vec<Option<Array2<T>>> = vec![None; self.n_params];
        grads[root.0] = Some(Array2::from_elem((1, 1), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut params);
            grads[idx] = Some(g);
        }

        Grads { params, nodes: grads }
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Array2<T>,
        grads: &mut [Option<Array2<T>>],
        params: &mut Vec<Option<Array2<T>>>,
    ) {
        let mut send = |v: Var, delta: Array2<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Param(id) => {
                if params.len() <= *id {
                    params.resize(*id + 1, None);
                }
                match &mut params[*id] {
                    Some(acc) => *acc += g,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    send(*b, self.value(*a).t().dot(g));
                }
            }
            Op::AddBias(a, b) => {
                send(*a, g.clone());
                send(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                send(*a, g * self.value(*b));
                send(*b, g * self.value(*a));
            }
            Op::MulCol(a, c) => {
                send(*a, g * self.value(*c));
                if self.rg(*c) {
                    let gc = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    send(*c, gc);
                }
            }
            Op::Scale(a, s) => send(*a, g * *s),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= T::zero() {
                        *d = T::zero();
                    }
                });
                send(*a, d);
            }
            Op::Abs(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    *d = if x > T::zero() {
                        *d
                    } else if x < T::zero() {
                        -*d
                    } else {
                        T::zero()
                    };
                });
                send(*a, d);
            }
            Op::Square(a) => {
                let two = T::one() + T::one();
                send(*a, g * &self.value(*a).mapv(|x| two * x));
            }
            Op::Sum(a) => {
                let shape = self.shape(*a);
                send(*a, Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::RowSum(a) => {
                let shape = self.shape(*a);
                send(*a, g.broadcast(shape).expect("n×1 broadcast").to_owned());
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.rg(p) {
                        send(p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                send(*a, d);
            }
            Op::SelectRows(a, rows) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(i);
                }
                send(*a, d);
            }
            Op::RepeatRows(a) => send(*a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
            Op::Transpose(a) => send(*a, g.t().to_owned()),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                send(*a, y * &(g - &dot));
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut d = Array2::zeros(x.dim());
                for i in 0..x.nrows() {
                    let n = x.row(i).dot(&x.row(i)).sqrt();
                    if n > T::zero() {
                        let yg = y.row(i).dot(&g.row(i));
                        let row = (&g.row(i) - &(&y.row(i) * yg)) / n;
                        d.row_mut(i).assign(&row);
                    }
                }
                send(*a, d);
            }
            Op::RowCosine(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = Array2::zeros(va.dim());
                let mut db = Array2::zeros(vb.dim());
                for i in 0..va.nrows() {
                    let (ra, rb) = (va.row(i), vb.row(i));
                    let (na, nb) = (ra.dot(&ra).sqrt(), rb.dot(&rb).sqrt());
                    if na > T::zero() && nb > T::zero() {
                        let c = node.value[[i, 0]];
                        let gi = g[[i, 0]];
                        let inv = T::one() / (na * nb);
                        let ga = (&rb * inv - &(&ra * (c / (na * na)))) * gi;
                        let gb = (&ra * inv - &(&rb * (c / (nb * nb)))) * gi;
                        da.row_mut(i).assign(&ga);
                        db.row_mut(i).assign(&gb);
                    }
                }
                send(*a, da);
                send(*b, db);
            }
            Op::NegLogPick(p, labels, floor) => {
                let pv = self.value(*p);
                let mut d = Array2::zeros(pv.dim());
                for (i, &l) in labels.iter().enumerate() {
                    let x = pv[[i, l]];
                    if x > *floor {
                        d[[i, l]] = -g[[i, 0]] / x;
                    }
                }
                send(*p, d);
            }
            Op::TopGap(a) => {
                let pv = self.value(*a);
                let mut d = Array2::zeros(pv.dim());
                for i in 0..pv.nrows() {
                    let (first, second) = top_two(pv.row(i).as_slice().expect("row-major"));
                    d[[i, first]] = g[[i, 0]];
                    d[[i, second]] = -g[[i, 0]];
                }
                send(*a, d);
            }
            Op::ColStandardize(a) => {
                let x = self.value(*a);
                let z = &node.value;
                let (_, std) = col_stats(x);
                let n = T::from_usize(x.nrows()).unwrap();
                let mut d = Array2::zeros(x.dim());
                for j in 0..x.ncols() {
                    if std[j] > T::zero() {
                        let gc = g.column(j);
                        let zc = z.column(j);
                        let mg = gc.sum() / n;
                        let mgz = gc.dot(&zc) / n;
                        let col = (&gc - &(&zc * mgz)).mapv(|e| (e - mg) / std[j]);
                        d.column_mut(j).assign(&col);
                    }
                }
                send(*a, d);
            }
            Op::GroupStandardize(a, group, eps) => {
                let x = self.value(*a);
                let z = &node.value;
                let mut d = Array2::zeros(x.dim());
                let chunks = x
                    .axis_chunks_iter(Axis(0), *group)
                    .zip(z.axis_chunks_iter(Axis(0), *group))
                    .zip(g.axis_chunks_iter(Axis(0), *group))
                    .zip(d.axis_chunks_iter_mut(Axis(0), *group));
                for (((xb, zb), gb), mut db) in chunks {
                    let n = T::from_usize(xb.len()).unwrap();
                    let mean = xb.sum() / n;
                    let var = xb.fold(T::zero(), |acc, &e| acc + (e - mean) * (e - mean)) / n;
                    let sd = (var + *eps).sqrt();
                    let mg = gb.sum() / n;
                    let mgz = (&gb * &zb).sum() / n;
                    Zip::from(&mut db).and(&gb).and(&zb).for_each(|d, &gv, &zv| {
                        *d = (gv - mg - zv * mgz) / sd;
                    });
                }
                send(*a, d);
            }
            Op::GroupMean(a, group) => {
                let n = T::from_usize(*group).unwrap();
                let (rows, cols) = self.shape(*a);
                let d = Array2::from_shape_fn((rows, cols), |(r, c)| g[[r / group, c]] / n);
                send(*a, d);
            }
            Op::Im2col(a, geom) => {
                let (vin, vout, taps, c) = (geom.in_voxels(), geom.out_voxels(), geom.taps(), geom.channels);
                let mut d = Array2::zeros(self.shape(*a));
                for b in 0..geom.batch {
                    for o in 0..vout {
                        let grow = g.row(b * vout + o);
                        for tap in 0..taps {
                            if let Some(src) = geom.source(o, tap) {
                                let mut dst = d.row_mut(b * vin + src);
                                dst += &grow.slice(s![tap * c..(tap + 1) * c]);
                            }
                        }
                    }
                }
                send(*a, d);
            }
        }
    }
}

/// Indices of the largest and second-largest entries (first occurrence wins
/// ties, so a tie yields distinct indices with equal values).
pub(crate) fn top_two<T: Scalar>(row: &[T]) -> (usize, usize) {
    debug_assert!(row.len() >= 2);
    let mut first = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[first] {
            first = i;
        }
    }
    let mut second = if first == 0 { 1 } else { 0 };
    for (i, &x) in row.iter().enumerate() {
        if i != first && x > row[second] {
            second = i;
        }
    }
    (first, second)
}

fn col_stats<T: Scalar>(x: &Array2<T>) -> (Vec<T>, Vec<T>) {
    let n = T::from_usize(x.nrows()).unwrap();
    let mut mean = Vec::with_capacity(x.ncols());
    let mut std = Vec::with_capacity(x.ncols());
    for col in x.columns() {
        let m = col.sum() / n;
        let var = col.fold(T::zero(), |acc, &e| acc + (e - m) * (e - m)) / n;
        // Relative guard: a column of identical values can carry rounding noise.
        let scale = col.fold(T::zero(), |acc, &e| acc.max(e.abs()));
        let sd = var.sqrt();
        mean.push(m);
        std.push(if sd > scale * T::epsilon() * T::of(16.0) {
            sd
        } else {
            T::zero()
        });
    }
    (mean, std)
}
