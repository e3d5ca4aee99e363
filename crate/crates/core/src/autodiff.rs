//! Matrix-valued reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! a row-major `rows x cols` value. [`Tape::backward`] walks the nodes in
//! reverse insertion order, which is a reverse topological order because a
//! node can only reference nodes created before it.
//!
//! Parameters live outside the tape in a [`ParamStore`]; the tape reads them
//! in place and returns their gradients as [`ParamGrads`].
//!
//! Matrix products are instrumented: every multiply is attributed to the
//! current [`Section`], so analytic cost formulas can be checked against an
//! actual forward pass.

use std::collections::HashMap;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

/// Named, shape-tagged parameter matrices.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<T>) -> ParamId {
        let name = name.into();
        assert_eq!(data.len(), rows * cols, "parameter `{name}` has wrong length");
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, rows, cols, data });
        ParamId(id)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: T) -> ParamId {
        self.add(name, rows, cols, vec![v; rows * cols])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Converts every value to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.add(e.name.clone(), e.rows, e.cols, e.data.iter().map(|&v| U::of(v.to_f64_lossy())).collect());
        }
        out
    }
}

/// Per-parameter gradients; `None` for parameters the pass never touched.
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    pub grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn empty(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    /// `self += other`, in parameter order.
    pub fn accumulate(&mut self, other: &ParamGrads<T>) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.iter_mut().zip(src).for_each(|(a, &b)| *a += b),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Cost-accounting buckets for instrumented multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Section {
    Other = 0,
    Patchify = 1,
    Encoder = 2,
    EncToDec = 3,
    Decoder = 4,
    Unpatchify = 5,
    Head = 6,
}

pub const NUM_SECTIONS: usize = 7;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Softmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Rows(Vec<(Var, usize)>),
    Sum(Var),
    L1 { x: Var, target: Vec<T>, row_weights: Vec<T> },
    Bce { x: Var, target: Vec<T>, weight: T },
    CrossEntropy { x: Var, targets: Vec<(usize, usize)>, weight: T },
}

#[derive(Debug, Clone)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
}

pub struct Tape<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    section: Section,
    mults: [u64; NUM_SECTIONS],
}

/// `out[n x m] += a[n x k] * b[k x m]`
fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n x m] += a[n x k] * b[m x k]^T`
fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * m + j] += acc;
        }
    }
}

/// `out[k x m] += a[n x k]^T * b[n x m]`
fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-6;

fn gelu<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * du
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            params: HashMap::new(),
            section: Section::Other,
            mults: [0; NUM_SECTIONS],
        }
    }

    pub fn set_section(&mut self, s: Section) -> Section {
        std::mem::replace(&mut self.section, s)
    }

    pub fn mults(&self, s: Section) -> u64 {
        self.mults[s as usize]
    }

    pub fn total_mults(&self) -> u64 {
        self.mults.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        let n = &self.nodes[v.0];
        match n.op {
            Op::Param(id) => &self.store.get(id).data,
            _ => &n.value,
        }
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<T>) -> Var {
        assert_eq!(value.len(), rows * cols, "constant has wrong length");
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let e = self.store.get(id);
        let v = self.push(e.rows, e.cols, Vec::new(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    fn count(&mut self, n: usize, k: usize, m: usize) {
        self.mults[self.section as usize] += (n * k * m) as u64;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![T::zero(); n * m];
        gemm_nn(self.value(a), self.value(b), &mut out, n, k, m);
        self.count(n, k, m);
        self.push(n, m, out, Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt inner dimensions differ");
        let mut out = vec![T::zero(); n * m];
        gemm_nt(self.value(a), self.value(b), &mut out, n, k, m);
        self.count(n, k, m);
        self.push(n, m, out, Op::MatMulNT(a, b))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa, self.shape(b), "elementwise shapes differ");
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(sa.0, sa.1, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the `1 x cols` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(self.shape(bias), (1, m), "bias must be a 1 x cols row");
        let b = self.value(bias);
        let out = self.value(a).chunks(m.max(1)).flat_map(|r| r.iter().zip(b).map(|(&x, &y)| x + y)).collect();
        self.push(n, m, out, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let (n, m) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        self.push(n, m, out, Op::Scale(a, s))
    }

    /// Multiplies row `i` of `a` by `w[i]`, where `w` is `rows x 1`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(self.shape(w), (n, 1), "row weights must be rows x 1");
        let wv = self.value(w);
        let out = self
            .value(a)
            .chunks(m.max(1))
            .zip(wv)
            .flat_map(|(r, &s)| r.iter().map(move |&x| x * s))
            .collect();
        self.push(n, m, out, Op::ScaleRows(a, w))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (n, m) = self.shape(x);
        assert_eq!(self.shape(gain), (1, m));
        assert_eq!(self.shape(bias), (1, m));
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = Vec::with_capacity(n * m);
        let mut rstd = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * m);
        let inv_m = T::one() / T::of_usize(m);
        for row in xv.chunks(m) {
            let mean = row.iter().copied().sum::<T>() * inv_m;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
            let r = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
            rstd.push(r);
            for j in 0..m {
                let h = (row[j] - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.push(n, m, out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.push(n, m, out, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let mut out = Vec::with_capacity(n * m);
        for row in self.value(a).chunks(m.max(1)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut z = T::zero();
            for &v in row {
                let e = (v - mx).exp();
                z += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= z);
        }
        self.push(n, m, out, Op::Softmax(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (n, m) = self.shape(a);
        assert!(start + len <= m, "column slice out of range");
        let out = self.value(a).chunks(m).flat_map(|r| r[start..start + len].iter().copied()).collect();
        self.push(n, len, out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        assert!(parts.iter().all(|&p| self.shape(p).0 == n), "concat_cols row counts differ");
        let m: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        self.push(n, m, out, Op::ConcatCols(parts.to_vec()))
    }

    /// Builds a matrix whose row `i` is row `sources[i].1` of
    /// `sources[i].0`. Gather, row concatenation and mask-token insertion
    /// are all instances of this.
    pub fn rows(&mut self, sources: Vec<(Var, usize)>, cols: usize) -> Var {
        let mut out = Vec::with_capacity(sources.len() * cols);
        for &(v, r) in &sources {
            let (rows, c) = self.shape(v);
            assert_eq!(c, cols, "row source has wrong width");
            assert!(r < rows, "row index out of range");
            out.extend_from_slice(&self.value(v)[r * cols..(r + 1) * cols]);
        }
        let n = sources.len();
        self.push(n, cols, out, Op::Rows(sources))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let sources = parts.iter().flat_map(|&p| (0..self.shape(p).0).map(move |r| (p, r))).collect();
        self.rows(sources, cols)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    /// `sum_i w_i * sum_j |x_ij - target_ij|`
    pub fn l1_loss(&mut self, x: Var, target: Vec<T>, row_weights: Vec<T>) -> Var {
        let (n, m) = self.shape(x);
        assert_eq!(target.len(), n * m, "l1 target has wrong length");
        assert_eq!(row_weights.len(), n, "l1 needs one weight per row");
        let xv = self.value(x);
        let mut s = T::zero();
        for i in 0..n {
            if row_weights[i] == T::zero() {
                continue;
            }
            let r: T = (0..m).map(|j| (xv[i * m + j] - target[i * m + j]).abs()).sum();
            s += row_weights[i] * r;
        }
        self.push(1, 1, vec![s], Op::L1 { x, target, row_weights })
    }

    /// `weight * sum_ij BCE(sigmoid(x_ij), target_ij)`
    pub fn bce_with_logits(&mut self, x: Var, target: Vec<T>, weight: T) -> Var {
        let xv = self.value(x);
        assert_eq!(target.len(), xv.len(), "bce target has wrong length");
        let s: T = xv
            .iter()
            .zip(&target)
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln())
            .sum();
        self.push(1, 1, vec![s * weight], Op::Bce { x, target, weight })
    }

    /// `weight * sum over (row, class) of -log softmax(x_row)[class]`
    pub fn cross_entropy(&mut self, x: Var, targets: Vec<(usize, usize)>, weight: T) -> Var {
        let (_, m) = self.shape(x);
        let xv = self.value(x);
        let mut s = T::zero();
        for &(r, c) in &targets {
            let row = &xv[r * m..(r + 1) * m];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            s += lse - row[c];
        }
        self.push(1, 1, vec![s * weight], Op::CrossEntropy { x, targets, weight })
    }

    /// Reverse pass from the scalar `loss`. Returns parameter gradients.
    pub fn backward(&self, loss: Var) -> ParamGrads<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = ParamGrads::empty(self.store.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let (n, m) = (node.rows, node.cols);
            macro_rules! acc {
                ($v:expr) => {{
                    let v: Var = $v;
                    let len = self.nodes[v.0].rows * self.nodes[v.0].cols;
                    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
                }};
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.grads[id.0] = Some(g),
                Op::MatMul(a, b) => {
                    let k = self.nodes[a.0].cols;
                    let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                    gemm_nt(&g, &bv, acc!(*a), n, m, k);
                    gemm_tn(&av, &g, acc!(*b), n, k, m);
                }
                Op::MatMulNT(a, b) => {
                    let k = self.nodes[a.0].cols;
                    let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                    gemm_nn(&g, &bv, acc!(*a), n, m, k);
                    gemm_tn(&g, &av, acc!(*b), n, m, k);
                }
                Op::Add(a, b) => {
                    acc!(*a).iter_mut().zip(&g).for_each(|(d, &x)| *d += x);
                    acc!(*b).iter_mut().zip(&g).for_each(|(d, &x)| *d += x);
                }
                Op::Sub(a, b) => {
                    acc!(*a).iter_mut().zip(&g).for_each(|(d, &x)| *d += x);
                    acc!(*b).iter_mut().zip(&g).for_each(|(d, &x)| *d -= x);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                    acc!(*a).iter_mut().zip(g.iter().zip(&bv)).for_each(|(d, (&x, &y))| *d += x * y);
                    acc!(*b).iter_mut().zip(g.iter().zip(&av)).for_each(|(d, (&x, &y))| *d += x * y);
                }
                Op::AddRow(a, bias) => {
                    acc!(*a).iter_mut().zip(&g).for_each(|(d, &x)| *d += x);
                    let db = acc!(*bias);
                    for row in g.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc!(*a).iter_mut().zip(&g).for_each(|(d, &x)| *d += x * s);
                }
                Op::ScaleRows(a, w) => {
                    let (av, wv) = (self.value(*a).to_vec(), self.value(*w).to_vec());
                    let da = acc!(*a);
                    for i in 0..n {
                        for j in 0..m {
                            da[i * m + j] += g[i * m + j] * wv[i];
                        }
                    }
                    let dw = acc!(*w);
                    for i in 0..n {
                        dw[i] += (0..m).map(|j| g[i * m + j] * av[i * m + j]).sum::<T>();
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let gv = self.value(*gain).to_vec();
                    let inv_m = T::one() / T::of_usize(m);
                    {
                        let dx = acc!(*x);
                        for i in 0..n {
                            let gr = &g[i * m..(i + 1) * m];
                            let xh = &xhat[i * m..(i + 1) * m];
                            let mut mean_d = T::zero();
                            let mut mean_dx = T::zero();
                            for j in 0..m {
                                let d = gr[j] * gv[j];
                                mean_d += d;
                                mean_dx += d * xh[j];
                            }
                            mean_d *= inv_m;
                            mean_dx *= inv_m;
                            for j in 0..m {
                                let d = gr[j] * gv[j];
                                dx[i * m + j] += rstd[i] * (d - mean_d - xh[j] * mean_dx);
                            }
                        }
                    }
                    {
                        let dg = acc!(*gain);
                        for i in 0..n {
                            for j in 0..m {
                                dg[j] += g[i * m + j] * xhat[i * m + j];
                            }
                        }
                    }
                    let db = acc!(*bias);
                    for row in g.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                    }
                }
                Op::Gelu(a) => {
                    let av = self.value(*a).to_vec();
                    acc!(*a).iter_mut().zip(g.iter().zip(&av)).for_each(|(d, (&x, &v))| *d += x * gelu_grad(v));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let da = acc!(*a);
                    for i in 0..n {
                        let yr = &y[i * m..(i + 1) * m];
                        let gr = &g[i * m..(i + 1) * m];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..m {
                            da[i * m + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    let am = self.nodes[a.0].cols;
                    let da = acc!(*a);
                    for i in 0..n {
                        for j in 0..m {
                            da[i * am + start + j] += g[i * m + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].cols;
                        let dp = acc!(p);
                        for i in 0..n {
                            for j in 0..w {
                                dp[i * w + j] += g[i * m + off + j];
                            }
                        }
                        off += w;
                    }
                }
                Op::Rows(sources) => {
                    for (i, &(v, r)) in sources.iter().enumerate() {
                        let dv = acc!(v);
                        dv[r * m..(r + 1) * m].iter_mut().zip(&g[i * m..(i + 1) * m]).for_each(|(d, &x)| *d += x);
                    }
                }
                Op::Sum(a) => {
                    let s = g[0];
                    acc!(*a).iter_mut().for_each(|d| *d += s);
                }
                Op::L1 { x, target, row_weights } => {
                    let s = g[0];
                    let xv = self.value(*x).to_vec();
                    let m = self.nodes[x.0].cols;
                    let dx = acc!(*x);
                    for (i, &w) in row_weights.iter().enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        for j in 0..m {
                            let r = xv[i * m + j] - target[i * m + j];
                            let sign = if r > T::zero() {
                                T::one()
                            } else if r < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            dx[i * m + j] += s * w * sign;
                        }
                    }
                }
                Op::Bce { x, target, weight } => {
                    let s = g[0] * *weight;
                    let xv = self.value(*x).to_vec();
                    let dx = acc!(*x);
                    for ((d, &v), &y) in dx.iter_mut().zip(&xv).zip(target) {
                        let sig = T::one() / (T::one() + (-v).exp());
                        *d += s * (sig - y);
                    }
                }
                Op::CrossEntropy { x, targets, weight } => {
                    let s = g[0] * *weight;
                    let m = self.nodes[x.0].cols;
                    let xv = self.value(*x).to_vec();
                    let dx = acc!(*x);
                    for &(r, c) in targets {
                        let row = &xv[r * m..(r + 1) * m];
                        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
                        for j in 0..m {
                            let p = (row[j] - mx).exp() / z;
                            let onehot = if j == c { T::one() } else { T::zero() };
                            dx[r * m + j] += s * (p - onehot);
                        }
                    }
                }
            }
        }
        out
    }
}
