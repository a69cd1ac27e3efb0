//! Eager tape-based reverse-mode automatic differentiation in `f64`.
//!
//! Every operation computes its value immediately and records the inputs it
//! needs to replay the chain rule in reverse. Storage is dynamic-rank
//! `ndarray`; all arithmetic is sequential, so results are bit-reproducible
//! for fixed inputs. The op set is exactly what the model and losses need —
//! nothing speculative.
//!
//! Shape violations are programmer errors and panic; the only `Result` op is
//! [`Tape::l2_normalize_rows`], whose degenerate-input failure is part of the
//! embedding contract.

mod conv;

use ndarray::{Array1, Array2, ArrayD, Ix1, Ix2, Ix4, IxDyn};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    AddRowBias(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Square(NodeId),
    SumAll(NodeId),
    MeanRows(NodeId),
    SumAxis1(NodeId),
    Reshape(NodeId),
    GatherRows(NodeId, Vec<usize>),
    SegmentMeanRows(NodeId, Vec<usize>, Vec<usize>),
    L2NormalizeRows(NodeId),
    LogSoftmaxRows(NodeId),
    MaskedLogSumExpRows(NodeId, Array2<f64>),
    MaskedNegLog1mExp(NodeId, Array2<f64>),
    Entropy1d(NodeId),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    ConvTranspose2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
}

struct Node {
    op: Op,
    value: ArrayD<f64>,
}

/// Append-only computation record. Node inputs always precede the node, so a
/// single reverse sweep performs backpropagation.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root w.r.t. the given node, if the node
    /// participates in the root's computation.
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

fn dims2(v: &ArrayD<f64>) -> (usize, usize) {
    assert_eq!(v.ndim(), 2, "expected rank-2 value, got shape {:?}", v.shape());
    (v.shape()[0], v.shape()[1])
}

fn scalar_array(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: ArrayD<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a zero-rank or single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert!(v.len() == 1, "scalar() on node of shape {:?}", v.shape());
        *v.first().expect("non-empty")
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> NodeId {
        self.leaf(scalar_array(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x * c);
        self.push(Op::ScalarMul(a, c), v)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("matmul lhs rank 2");
        let bv = self.value(b).view().into_dimensionality::<Ix2>().expect("matmul rhs rank 2");
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let v = av.dot(&bv).into_dyn();
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("transpose rank 2");
        let v = av.t().as_standard_layout().to_owned().into_dyn();
        self.push(Op::Transpose(a), v)
    }

    /// Broadcast-add a length-n bias to every row of an `[m,n]` matrix.
    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (_, n) = dims2(self.value(x));
        let bv = self.value(b).view().into_dimensionality::<Ix1>().expect("bias rank 1");
        assert_eq!(bv.len(), n, "bias length");
        let mut v = self.value(x).clone();
        for mut row in v.view_mut().into_dimensionality::<Ix2>().unwrap().rows_mut() {
            row += &bv;
        }
        self.push(Op::AddRowBias(x, b), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = scalar_array(self.value(a).sum());
        self.push(Op::SumAll(a), v)
    }

    /// Column means of an `[m,n]` matrix -> `[n]`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("mean_rows rank 2");
        let m = av.nrows();
        assert!(m > 0, "mean_rows on empty matrix");
        let mut acc = Array1::<f64>::zeros(av.ncols());
        for row in av.rows() {
            acc += &row;
        }
        acc /= m as f64;
        self.push(Op::MeanRows(a), acc.into_dyn())
    }

    /// Row sums of an `[m,n]` matrix -> `[m]`.
    pub fn sum_axis1(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("sum_axis1 rank 2");
        let v = Array1::from_iter(av.rows().into_iter().map(|r| r.sum())).into_dyn();
        self.push(Op::SumAxis1(a), v)
    }

    pub fn reshape(&mut self, a: NodeId, dims: &[usize]) -> NodeId {
        let old = self.value(a);
        assert_eq!(old.len(), dims.iter().product::<usize>(), "reshape element count");
        let flat: Vec<f64> = old.iter().copied().collect();
        let v = ArrayD::from_shape_vec(IxDyn(dims), flat).expect("reshape");
        self.push(Op::Reshape(a), v)
    }

    /// Select rows of an `[r,n]` matrix; indices may repeat. Backward
    /// scatter-adds into the source rows.
    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("gather_rows rank 2");
        let n = av.ncols();
        let mut v = Array2::<f64>::zeros((indices.len(), n));
        for (k, &i) in indices.iter().enumerate() {
            assert!(i < av.nrows(), "gather_rows index {i} out of range");
            v.row_mut(k).assign(&av.row(i));
        }
        self.push(Op::GatherRows(a, indices), v.into_dyn())
    }

    /// Mean of the rows belonging to each segment. `segments[i]` assigns row
    /// i to a segment in `0..n_segments`; every segment must be non-empty.
    pub fn segment_mean_rows(&mut self, a: NodeId, segments: Vec<usize>, n_segments: usize) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("segment_mean rank 2");
        assert_eq!(segments.len(), av.nrows(), "segment vector length");
        let mut counts = vec![0usize; n_segments];
        for &s in &segments {
            assert!(s < n_segments, "segment index out of range");
            counts[s] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "empty segment in segment_mean_rows");
        let mut v = Array2::<f64>::zeros((n_segments, av.ncols()));
        for (i, &s) in segments.iter().enumerate() {
            let mut row = v.row_mut(s);
            row += &av.row(i);
        }
        for (s, &c) in counts.iter().enumerate() {
            let mut row = v.row_mut(s);
            row /= c as f64;
        }
        self.push(Op::SegmentMeanRows(a, segments, counts), v.into_dyn())
    }

    /// Scale every row of an `[m,n]` matrix to unit Euclidean norm.
    ///
    /// Rows with norm below 1e-12 are rejected rather than epsilon-padded, so
    /// a collapsing embedding fails loudly instead of exploding silently.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("l2_normalize rank 2");
        let mut v = av.to_owned();
        for mut row in v.rows_mut() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::DegenerateEmbedding { norm });
            }
            row /= norm;
        }
        Ok(self.push(Op::L2NormalizeRows(a), v.into_dyn()))
    }

    /// Row-wise log-softmax. The normalizer is computed as
    /// `max + ln1p(sum_{k != argmax} e^{x_k - max})` so that entries stay
    /// strictly negative even when one logit dominates.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("log_softmax rank 2");
        let mut v = av.to_owned();
        for mut row in v.rows_mut() {
            let (arg, mx) = row
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |(ai, am), (i, &x)| {
                    if x > am { (i, x) } else { (ai, am) }
                });
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != arg)
                .map(|(_, &x)| (x - mx).exp())
                .sum();
            let log_z = rest.ln_1p();
            for x in row.iter_mut() {
                *x = *x - mx - log_z;
            }
        }
        self.push(Op::LogSoftmaxRows(a), v.into_dyn())
    }

    /// Row-wise `log sum_k mask[k] * e^{x_k}` over the entries with mask 1.
    /// Every row must have at least one unmasked entry.
    pub fn masked_logsumexp_rows(&mut self, a: NodeId, mask: Array2<f64>) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("masked_lse rank 2");
        assert_eq!(av.dim(), mask.dim(), "mask shape");
        let mut out = Array1::<f64>::zeros(av.nrows());
        for (i, row) in av.rows().into_iter().enumerate() {
            let mut mx = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if mask[[i, j]] != 0.0 && x > mx {
                    mx = x;
                }
            }
            assert!(mx.is_finite(), "masked_logsumexp row {i} has no unmasked entry");
            let sum: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| mask[[i, j]] != 0.0)
                .map(|(_, &x)| (x - mx).exp())
                .sum();
            out[i] = mx + sum.ln();
        }
        self.push(Op::MaskedLogSumExpRows(a, mask), out.into_dyn())
    }

    /// Elementwise `-ln(1 - e^x)` where the mask is 1, zero elsewhere.
    /// Inputs must be log-probabilities (x <= 0); `expm1` keeps the result
    /// accurate when e^x is close to 1.
    pub fn masked_neg_log1m_exp(&mut self, a: NodeId, mask: Array2<f64>) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("neg_log1m rank 2");
        assert_eq!(av.dim(), mask.dim(), "mask shape");
        let mut v = Array2::<f64>::zeros(av.dim());
        for ((i, j), &x) in av.indexed_iter() {
            if mask[[i, j]] != 0.0 {
                v[[i, j]] = -(-x.exp_m1()).ln();
            }
        }
        self.push(Op::MaskedNegLog1mExp(a, mask), v.into_dyn())
    }

    /// Entropy `-sum p ln p` of a probability vector, with the 0 ln 0 = 0
    /// convention.
    pub fn entropy1d(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix1>().expect("entropy rank 1");
        let h: f64 = av.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum();
        self.push(Op::Entropy1d(a), scalar_array(h))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("conv2d input rank 4");
        let wv = self.value(w).view().into_dimensionality::<Ix4>().expect("conv2d weight rank 4");
        let bv = self.value(b).view().into_dimensionality::<Ix1>().expect("conv2d bias rank 1");
        let v = conv::conv2d_forward(xv, wv, bv, stride, pad).into_dyn();
        self.push(Op::Conv2d { x, w, b, stride, pad }, v)
    }

    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("convT input rank 4");
        let wv = self.value(w).view().into_dimensionality::<Ix4>().expect("convT weight rank 4");
        let bv = self.value(b).view().into_dimensionality::<Ix1>().expect("convT bias rank 1");
        let v = conv::conv_transpose2d_forward(xv, wv, bv, stride, pad).into_dyn();
        self.push(Op::ConvTranspose2d { x, w, b, stride, pad }, v)
    }

    /// Reverse sweep from a scalar root. Returns gradients for every node
    /// that transitively feeds the root.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert!(self.value(root).len() == 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), 1.0));

        for idx in (0..=root.0).rev() {
            let (lower, upper) = grads.split_at_mut(idx);
            let g = match upper[0].as_ref() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            let mut accum = |id: NodeId, delta: ArrayD<f64>| {
                debug_assert!(id.0 < idx, "tape not topologically ordered");
                match &mut lower[id.0] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accum(*a, g.clone());
                    accum(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    accum(*a, g.clone());
                    accum(*b, g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    accum(*a, g * self.value(*b));
                    accum(*b, g * self.value(*a));
                }
                Op::ScalarMul(a, c) => accum(*a, g.mapv(|x| x * c)),
                Op::MatMul(a, b) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let av = self.value(*a).view().into_dimensionality::<Ix2>().unwrap();
                    let bv = self.value(*b).view().into_dimensionality::<Ix2>().unwrap();
                    accum(*a, g2.dot(&bv.t()).into_dyn());
                    accum(*b, av.t().dot(&g2).into_dyn());
                }
                Op::Transpose(a) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    accum(*a, g2.t().as_standard_layout().to_owned().into_dyn());
                }
                Op::AddRowBias(x, b) => {
                    accum(*x, g.clone());
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut db = Array1::<f64>::zeros(g2.ncols());
                    for row in g2.rows() {
                        db += &row;
                    }
                    accum(*b, db.into_dyn());
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    accum(*a, g * &y.mapv(|t| 1.0 - t * t));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    accum(*a, g * &y.mapv(|s| s * (1.0 - s)));
                }
                Op::Exp(a) => accum(*a, g * &node.value),
                Op::Square(a) => accum(*a, g * &self.value(*a).mapv(|x| 2.0 * x)),
                Op::SumAll(a) => {
                    let gv = *g.first().unwrap();
                    accum(*a, ArrayD::from_elem(self.value(*a).raw_dim(), gv));
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let (m, n) = dims2(av);
                    let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                    let mut da = Array2::<f64>::zeros((m, n));
                    let scaled = g1.mapv(|x| x / m as f64);
                    for mut row in da.rows_mut() {
                        row.assign(&scaled);
                    }
                    accum(*a, da.into_dyn());
                }
                Op::SumAxis1(a) => {
                    let (m, n) = dims2(self.value(*a));
                    let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                    let mut da = Array2::<f64>::zeros((m, n));
                    for (i, mut row) in da.rows_mut().into_iter().enumerate() {
                        row.fill(g1[i]);
                    }
                    accum(*a, da.into_dyn());
                }
                Op::Reshape(a) => {
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let da = ArrayD::from_shape_vec(self.value(*a).raw_dim(), flat).unwrap();
                    accum(*a, da);
                }
                Op::GatherRows(a, indices) => {
                    let (r, n) = dims2(self.value(*a));
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut da = Array2::<f64>::zeros((r, n));
                    for (k, &i) in indices.iter().enumerate() {
                        let mut row = da.row_mut(i);
                        row += &g2.row(k);
                    }
                    accum(*a, da.into_dyn());
                }
                Op::SegmentMeanRows(a, segments, counts) => {
                    let (m, n) = dims2(self.value(*a));
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut da = Array2::<f64>::zeros((m, n));
                    for (i, &s) in segments.iter().enumerate() {
                        let scale = 1.0 / counts[s] as f64;
                        let mut row = da.row_mut(i);
                        row.assign(&g2.row(s).mapv(|x| x * scale));
                    }
                    accum(*a, da.into_dyn());
                }
                Op::L2NormalizeRows(a) => {
                    // y = x / |x|; dx = (g - (g . y) y) / |x|
                    let xv = self.value(*a).view().into_dimensionality::<Ix2>().unwrap();
                    let yv = node.value.view().into_dimensionality::<Ix2>().unwrap();
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut da = Array2::<f64>::zeros(xv.dim());
                    for i in 0..xv.nrows() {
                        let norm = xv.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                        let dot: f64 = g2.row(i).iter().zip(yv.row(i).iter()).map(|(a, b)| a * b).sum();
                        for j in 0..xv.ncols() {
                            da[[i, j]] = (g2[[i, j]] - dot * yv[[i, j]]) / norm;
                        }
                    }
                    accum(*a, da.into_dyn());
                }
                Op::LogSoftmaxRows(a) => {
                    // dx = g - softmax * rowsum(g)
                    let ls = node.value.view().into_dimensionality::<Ix2>().unwrap();
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut da = Array2::<f64>::zeros(ls.dim());
                    for i in 0..ls.nrows() {
                        let gsum: f64 = g2.row(i).sum();
                        for j in 0..ls.ncols() {
                            da[[i, j]] = g2[[i, j]] - ls[[i, j]].exp() * gsum;
                        }
                    }
                    accum(*a, da.into_dyn());
                }
                Op::MaskedLogSumExpRows(a, mask) => {
                    let xv = self.value(*a).view().into_dimensionality::<Ix2>().unwrap();
                    let lse = node.value.view().into_dimensionality::<Ix1>().unwrap();
                    let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                    let mut da = Array2::<f64>::zeros(xv.dim());
                    for i in 0..xv.nrows() {
                        for j in 0..xv.ncols() {
                            if mask[[i, j]] != 0.0 {
                                da[[i, j]] = g1[i] * (xv[[i, j]] - lse[i]).exp();
                            }
                        }
                    }
                    accum(*a, da.into_dyn());
                }
                Op::MaskedNegLog1mExp(a, mask) => {
                    // d/dx [-ln(1 - e^x)] = e^x / (1 - e^x)
                    let xv = self.value(*a).view().into_dimensionality::<Ix2>().unwrap();
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut da = Array2::<f64>::zeros(xv.dim());
                    for ((i, j), &x) in xv.indexed_iter() {
                        if mask[[i, j]] != 0.0 {
                            da[[i, j]] = g2[[i, j]] * x.exp() / (-x.exp_m1());
                        }
                    }
                    accum(*a, da.into_dyn());
                }
                Op::Entropy1d(a) => {
                    let pv = self.value(*a).view().into_dimensionality::<Ix1>().unwrap();
                    let gv = *g.first().unwrap();
                    let da = pv.mapv(|p| -gv * (p.max(1e-300).ln() + 1.0));
                    accum(*a, da.into_dyn());
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xv = self.value(*x).view().into_dimensionality::<Ix4>().unwrap();
                    let wv = self.value(*w).view().into_dimensionality::<Ix4>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (dx, dw, db) = conv::conv2d_backward(xv, wv, gv, *stride, *pad);
                    accum(*x, dx.into_dyn());
                    accum(*w, dw.into_dyn());
                    accum(*b, db.into_dyn());
                }
                Op::ConvTranspose2d { x, w, b, stride, pad } => {
                    let xv = self.value(*x).view().into_dimensionality::<Ix4>().unwrap();
                    let wv = self.value(*w).view().into_dimensionality::<Ix4>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (dx, dw, db) = conv::conv_transpose2d_backward(xv, wv, gv, *stride, *pad);
                    accum(*x, dx.into_dyn());
                    accum(*w, dw.into_dyn());
                    accum(*b, db.into_dyn());
                }
            }
        }
        Gradients { grads }
    }
}
