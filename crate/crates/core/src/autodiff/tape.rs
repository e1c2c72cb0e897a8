use std::rc::Rc;

use crate::{Error, Result};

use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(u32);

impl TensorId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f32>,
}

enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    AddRow { a: TensorId, b: TensorId },
    SubRow { a: TensorId, b: TensorId },
    MulRow { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f32 },
    AddConst { a: TensorId },
    Relu { a: TensorId },
    Sqrt { a: TensorId },
    Recip { a: TensorId },
    Sin { a: TensorId },
    Cos { a: TensorId },
    MinConst { a: TensorId, c: f32 },
    MaxConst { a: TensorId, c: f32 },
    MulScalar { a: TensorId, s: TensorId },
    ConcatCols { parts: Vec<TensorId> },
    ConcatRows { parts: Vec<TensorId> },
    SliceCols { a: TensorId, c0: usize },
    SliceRows { a: TensorId, r0: usize },
    GatherRows { a: TensorId, idx: Rc<Vec<u32>> },
    ScatterAddRows { a: TensorId, idx: Rc<Vec<u32>> },
    SumAll { a: TensorId },
    MeanRows { a: TensorId },
    SumCols { a: TensorId },
    ScaleRows { a: TensorId, f: Rc<Vec<f32>> },
    Reshape { a: TensorId },
}

/// Reverse-mode tape over dense f32 matrices.
///
/// Operations execute eagerly and are recorded in topological order (an
/// operation's inputs always precede it). [`Tape::backward`] then visits every
/// recorded operation exactly once, in reverse, accumulating gradients.
///
/// Shape errors on tape primitives are programming errors and panic; the
/// public entry points that accept external data (`forward` on MLPs, the model
/// step, ...) validate first and return typed errors.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f32>>>,
    /// (parameter-store slot, tape id) pairs registered via [`Tape::param`].
    param_refs: Vec<(usize, TensorId)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f32>, op: Op) -> TensorId {
        debug_assert_eq!(rows * cols, value.len());
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(Node { rows, cols, value });
        self.ops.push(op);
        id
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.idx()]
    }

    pub fn rows(&self, id: TensorId) -> usize {
        self.node(id).rows
    }

    pub fn cols(&self, id: TensorId) -> usize {
        self.node(id).cols
    }

    pub fn value(&self, id: TensorId) -> &[f32] {
        &self.node(id).value
    }

    /// Gradient of the last `backward` target with respect to `id`, if any
    /// flowed there.
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.grads.get(id.idx()).and_then(|g| g.as_deref())
    }

    pub fn param_refs(&self) -> &[(usize, TensorId)] {
        &self.param_refs
    }

    // ---- value entry points ------------------------------------------------

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f32>) -> TensorId {
        assert_eq!(rows * cols, value.len(), "leaf: shape/value mismatch");
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn leaf_from(&mut self, t: &Tensor) -> TensorId {
        let (r, c) = t.as_matrix_dims().expect("leaf_from: tensor rank > 2");
        self.leaf(r, c, t.data.clone())
    }

    /// Register a parameter-store entry as a leaf, remembering the slot so
    /// gradients can be pushed back after `backward`.
    pub fn param(&mut self, slot: usize, t: &Tensor) -> TensorId {
        let id = self.leaf_from(t);
        self.param_refs.push((slot, id));
        id
    }

    pub fn scalar(&mut self, v: f32) -> TensorId {
        self.leaf(1, 1, vec![v])
    }

    // ---- arithmetic --------------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, ka) = (self.rows(a), self.cols(a));
        let (kb, n) = (self.rows(b), self.cols(b));
        assert_eq!(ka, kb, "matmul: inner dims {ka} vs {kb}");
        let mut out = vec![0.0f32; m * n];
        gemm_nn(
            m,
            ka,
            n,
            1.0,
            &self.node(a).value,
            &self.node(b).value,
            0.0,
            &mut out,
        );
        self.push(m, n, out, Op::MatMul { a, b })
    }

    fn ew2(&mut self, a: TensorId, b: TensorId, op: Op, f: impl Fn(f32, f32) -> f32) -> TensorId {
        let (r, c) = (self.rows(a), self.cols(a));
        assert_eq!(
            (r, c),
            (self.rows(b), self.cols(b)),
            "elementwise: shape mismatch"
        );
        let out = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push(r, c, out, op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.ew2(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.ew2(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.ew2(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    fn row_bcast(
        &mut self,
        a: TensorId,
        b: TensorId,
        op: Op,
        f: impl Fn(f32, f32) -> f32,
    ) -> TensorId {
        let (r, c) = (self.rows(a), self.cols(a));
        assert_eq!(
            (self.rows(b), self.cols(b)),
            (1, c),
            "row broadcast: rhs must be [1,{c}]"
        );
        let mut out = Vec::with_capacity(r * c);
        let bv = &self.node(b).value;
        for row in self.node(a).value.chunks_exact(c) {
            out.extend(row.iter().zip(bv).map(|(x, y)| f(*x, *y)));
        }
        self.push(r, c, out, op)
    }

    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.row_bcast(a, b, Op::AddRow { a, b }, |x, y| x + y)
    }

    pub fn sub_row(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.row_bcast(a, b, Op::SubRow { a, b }, |x, y| x - y)
    }

    pub fn mul_row(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.row_bcast(a, b, Op::MulRow { a, b }, |x, y| x * y)
    }

    fn ew1(&mut self, a: TensorId, op: Op, f: impl Fn(f32) -> f32) -> TensorId {
        let (r, c) = (self.rows(a), self.cols(a));
        let out = self.node(a).value.iter().map(|x| f(*x)).collect();
        self.push(r, c, out, op)
    }

    pub fn scale(&mut self, a: TensorId, c: f32) -> TensorId {
        self.ew1(a, Op::Scale { a, c }, |x| x * c)
    }

    pub fn add_const(&mut self, a: TensorId, c: f32) -> TensorId {
        self.ew1(a, Op::AddConst { a }, |x| x + c)
    }

    /// Rectified linear unit; the derivative at exactly zero is defined as 0.
    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.ew1(a, Op::Relu { a }, |x| x.max(0.0))
    }

    /// Elementwise square root. Inputs must be positive for a finite
    /// gradient; callers add an epsilon when the argument can reach zero.
    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        self.ew1(a, Op::Sqrt { a }, f32::sqrt)
    }

    pub fn recip(&mut self, a: TensorId) -> TensorId {
        self.ew1(a, Op::Recip { a }, f32::recip)
    }

    pub fn sin(&mut self, a: TensorId) -> TensorId {
        self.ew1(a, Op::Sin { a }, f32::sin)
    }

    pub fn cos(&mut self, a: TensorId) -> TensorId {
        self.ew1(a, Op::Cos { a }, f32::cos)
    }

    /// min(x, c); gradient passes only where x < c.
    pub fn min_const(&mut self, a: TensorId, c: f32) -> TensorId {
        self.ew1(a, Op::MinConst { a, c }, |x| x.min(c))
    }

    /// max(x, c); gradient passes only where x > c.
    pub fn max_const(&mut self, a: TensorId, c: f32) -> TensorId {
        self.ew1(a, Op::MaxConst { a, c }, |x| x.max(c))
    }

    /// Multiply every element of `a` by the 1x1 tensor `s`.
    pub fn mul_scalar(&mut self, a: TensorId, s: TensorId) -> TensorId {
        assert_eq!(
            (self.rows(s), self.cols(s)),
            (1, 1),
            "mul_scalar: scale must be 1x1"
        );
        let sv = self.node(s).value[0];
        self.ew1(a, Op::MulScalar { a, s }, |x| x * sv)
    }

    // ---- structure ---------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let r = self.rows(parts[0]);
        let total: usize = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.rows(p), r, "concat_cols: row mismatch");
                self.cols(p)
            })
            .sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.cols(p);
                out.extend_from_slice(&self.node(p).value[i * c..(i + 1) * c]);
            }
        }
        self.push(
            r,
            total,
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let c = self.cols(parts[0]);
        let total: usize = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.cols(p), c, "concat_rows: col mismatch");
                self.rows(p)
            })
            .sum();
        let mut out = Vec::with_capacity(total * c);
        for &p in parts {
            out.extend_from_slice(&self.node(p).value);
        }
        self.push(
            total,
            c,
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, a: TensorId, c0: usize, c1: usize) -> TensorId {
        let (r, c) = (self.rows(a), self.cols(a));
        assert!(c0 < c1 && c1 <= c, "slice_cols: bad range {c0}..{c1} of {c}");
        let w = c1 - c0;
        let mut out = Vec::with_capacity(r * w);
        for row in self.node(a).value.chunks_exact(c) {
            out.extend_from_slice(&row[c0..c1]);
        }
        self.push(r, w, out, Op::SliceCols { a, c0 })
    }

    pub fn slice_rows(&mut self, a: TensorId, r0: usize, r1: usize) -> TensorId {
        let (r, c) = (self.rows(a), self.cols(a));
        assert!(r0 < r1 && r1 <= r, "slice_rows: bad range {r0}..{r1} of {r}");
        let out = self.node(a).value[r0 * c..r1 * c].to_vec();
        self.push(r1 - r0, c, out, Op::SliceRows { a, r0 })
    }

    pub fn gather_rows(&mut self, a: TensorId, idx: Rc<Vec<u32>>) -> TensorId {
        let (r, c) = (self.rows(a), self.cols(a));
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            let i = i as usize;
            assert!(i < r, "gather_rows: index {i} out of {r}");
            out.extend_from_slice(&self.node(a).value[i * c..(i + 1) * c]);
        }
        self.push(idx.len(), c, out, Op::GatherRows { a, idx })
    }

    /// out[idx[j], :] += a[j, :] over a fresh zero tensor with `out_rows`
    /// rows. Accumulation runs in input-row order, so the result is
    /// deterministic for a given edge ordering.
    pub fn scatter_add_rows(&mut self, a: TensorId, idx: Rc<Vec<u32>>, out_rows: usize) -> TensorId {
        let (r, c) = (self.rows(a), self.cols(a));
        assert_eq!(r, idx.len(), "scatter_add_rows: index len {} vs rows {r}", idx.len());
        let mut out = vec![0.0f32; out_rows * c];
        for (j, &i) in idx.iter().enumerate() {
            let i = i as usize;
            assert!(i < out_rows, "scatter_add_rows: index {i} out of {out_rows}");
            let src = &self.node(a).value[j * c..(j + 1) * c];
            let dst = &mut out[i * c..(i + 1) * c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        self.push(out_rows, c, out, Op::ScatterAddRows { a, idx })
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f32 = self.node(a).value.iter().sum();
        self.push(1, 1, vec![s], Op::SumAll { a })
    }

    /// Column means: [m,n] -> [1,n].
    pub fn mean_rows(&mut self, a: TensorId) -> TensorId {
        let (r, c) = (self.rows(a), self.cols(a));
        assert!(r > 0, "mean_rows: empty tensor");
        let mut out = vec![0.0f32; c];
        for row in self.node(a).value.chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / r as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(1, c, out, Op::MeanRows { a })
    }

    /// Row sums: [m,n] -> [m,1].
    pub fn sum_cols(&mut self, a: TensorId) -> TensorId {
        let (r, c) = (self.rows(a), self.cols(a));
        let out = self
            .node(a)
            .value
            .chunks_exact(c)
            .map(|row| row.iter().sum())
            .collect();
        self.push(r, 1, out, Op::SumCols { a })
    }

    /// Multiply row i by the constant `f[i]`.
    pub fn scale_rows(&mut self, a: TensorId, f: Rc<Vec<f32>>) -> TensorId {
        let (r, c) = (self.rows(a), self.cols(a));
        assert_eq!(f.len(), r, "scale_rows: factor len {} vs rows {r}", f.len());
        let mut out = Vec::with_capacity(r * c);
        for (row, &s) in self.node(a).value.chunks_exact(c).zip(f.iter()) {
            out.extend(row.iter().map(|v| v * s));
        }
        self.push(r, c, out, Op::ScaleRows { a, f })
    }

    pub fn reshape(&mut self, a: TensorId, rows: usize, cols: usize) -> TensorId {
        let n = self.rows(a) * self.cols(a);
        assert_eq!(rows * cols, n, "reshape: {rows}x{cols} != {n} values");
        let out = self.node(a).value.clone();
        self.push(rows, cols, out, Op::Reshape { a })
    }

    // ---- backward ----------------------------------------------------------

    /// Run reverse-mode accumulation from `loss`, which must be 1x1.
    ///
    /// Gradients from a previous `backward` on the same tape are cleared.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let n = self.node(loss);
        if n.rows * n.cols != 1 {
            return Err(Error::Contract(format!(
                "backward target must be a scalar, got {}x{}",
                n.rows, n.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.idx()] = Some(vec![1.0]);

        for i in (0..self.ops.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_op(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_op(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let cols_of = |id: TensorId| self.node(id).cols;
        // Allocate-on-demand accumulation buffer for an input.
        macro_rules! gbuf {
            ($id:expr) => {{
                let n = self.node($id);
                grads[$id.idx()].get_or_insert_with(|| vec![0.0f32; n.rows * n.cols])
            }};
        }
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.node(*a).rows, self.node(*a).cols);
                let n = self.node(*b).cols;
                let (av, bv) = (&self.node(*a).value, &self.node(*b).value);
                // dA += G * B^T
                {
                    let ga = gbuf!(*a);
                    gemm_strided(m, n, k, 1.0, g, n as isize, 1, bv, 1, n as isize, 1.0, ga, k as isize, 1);
                }
                // dB += A^T * G
                {
                    let gb = gbuf!(*b);
                    gemm_strided(k, m, n, 1.0, av, 1, k as isize, g, n as isize, 1, 1.0, gb, n as isize, 1);
                }
            }
            Op::Add { a, b } => {
                axpy(gbuf!(*a), g, 1.0);
                axpy(gbuf!(*b), g, 1.0);
            }
            Op::Sub { a, b } => {
                axpy(gbuf!(*a), g, 1.0);
                axpy(gbuf!(*b), g, -1.0);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.node(*a).value, &self.node(*b).value);
                {
                    let ga = gbuf!(*a);
                    for ((d, gv), s) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gv * s;
                    }
                }
                let gb = gbuf!(*b);
                for ((d, gv), s) in gb.iter_mut().zip(g).zip(av) {
                    *d += gv * s;
                }
            }
            Op::AddRow { a, b } => {
                axpy(gbuf!(*a), g, 1.0);
                let c = cols_of(*b);
                let gb = gbuf!(*b);
                for row in g.chunks_exact(c) {
                    axpy(gb, row, 1.0);
                }
            }
            Op::SubRow { a, b } => {
                axpy(gbuf!(*a), g, 1.0);
                let c = cols_of(*b);
                let gb = gbuf!(*b);
                for row in g.chunks_exact(c) {
                    axpy(gb, row, -1.0);
                }
            }
            Op::MulRow { a, b } => {
                let c = cols_of(*b);
                let (av, bv) = (&self.node(*a).value, &self.node(*b).value);
                {
                    let ga = gbuf!(*a);
                    for (grow, garow) in g.chunks_exact(c).zip(ga.chunks_exact_mut(c)) {
                        for ((d, gv), s) in garow.iter_mut().zip(grow).zip(bv) {
                            *d += gv * s;
                        }
                    }
                }
                let gb = gbuf!(*b);
                for (grow, arow) in g.chunks_exact(c).zip(av.chunks_exact(c)) {
                    for ((d, gv), s) in gb.iter_mut().zip(grow).zip(arow) {
                        *d += gv * s;
                    }
                }
            }
            Op::Scale { a, c } => axpy(gbuf!(*a), g, *c),
            Op::AddConst { a, .. } => axpy(gbuf!(*a), g, 1.0),
            Op::Relu { a } => {
                let av = &self.node(*a).value;
                let ga = gbuf!(*a);
                for ((d, gv), x) in ga.iter_mut().zip(g).zip(av) {
                    if *x > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Sqrt { a } => {
                let out = &self.node(TensorId(i as u32)).value;
                let ga = gbuf!(*a);
                for ((d, gv), o) in ga.iter_mut().zip(g).zip(out) {
                    *d += gv * 0.5 / o;
                }
            }
            Op::Recip { a } => {
                let out = &self.node(TensorId(i as u32)).value;
                let ga = gbuf!(*a);
                for ((d, gv), o) in ga.iter_mut().zip(g).zip(out) {
                    *d -= gv * o * o;
                }
            }
            Op::Sin { a } => {
                let av = &self.node(*a).value;
                let ga = gbuf!(*a);
                for ((d, gv), x) in ga.iter_mut().zip(g).zip(av) {
                    *d += gv * x.cos();
                }
            }
            Op::Cos { a } => {
                let av = &self.node(*a).value;
                let ga = gbuf!(*a);
                for ((d, gv), x) in ga.iter_mut().zip(g).zip(av) {
                    *d -= gv * x.sin();
                }
            }
            Op::MinConst { a, c } => {
                let av = &self.node(*a).value;
                let ga = gbuf!(*a);
                for ((d, gv), x) in ga.iter_mut().zip(g).zip(av) {
                    if *x < *c {
                        *d += gv;
                    }
                }
            }
            Op::MaxConst { a, c } => {
                let av = &self.node(*a).value;
                let ga = gbuf!(*a);
                for ((d, gv), x) in ga.iter_mut().zip(g).zip(av) {
                    if *x > *c {
                        *d += gv;
                    }
                }
            }
            Op::MulScalar { a, s } => {
                let sv = self.node(*s).value[0];
                let av = &self.node(*a).value;
                axpy(gbuf!(*a), g, sv);
                let gs = gbuf!(*s);
                gs[0] += g.iter().zip(av).map(|(gv, x)| gv * x).sum::<f32>();
            }
            Op::ConcatCols { parts } => {
                let r = self.node(TensorId(i as u32)).rows;
                let total = self.node(TensorId(i as u32)).cols;
                let mut off = 0;
                for &p in parts {
                    let c = cols_of(p);
                    let gp = gbuf!(p);
                    for row in 0..r {
                        let src = &g[row * total + off..row * total + off + c];
                        axpy(&mut gp[row * c..(row + 1) * c], src, 1.0);
                    }
                    off += c;
                }
            }
            Op::ConcatRows { parts } => {
                let c = self.node(TensorId(i as u32)).cols;
                let mut off = 0;
                for &p in parts {
                    let r = self.node(*&p).rows;
                    let gp = gbuf!(p);
                    axpy(gp, &g[off * c..(off + r) * c], 1.0);
                    off += r;
                }
            }
            Op::SliceCols { a, c0 } => {
                let w = self.node(TensorId(i as u32)).cols;
                let c = cols_of(*a);
                let ga = gbuf!(*a);
                for (row, grow) in g.chunks_exact(w).enumerate() {
                    axpy(&mut ga[row * c + c0..row * c + c0 + w], grow, 1.0);
                }
            }
            Op::SliceRows { a, r0 } => {
                let c = cols_of(*a);
                let ga = gbuf!(*a);
                axpy(&mut ga[r0 * c..r0 * c + g.len()], g, 1.0);
            }
            Op::GatherRows { a, idx } => {
                let c = cols_of(*a);
                let ga = gbuf!(*a);
                for (j, &src) in idx.iter().enumerate() {
                    let s = src as usize;
                    axpy(&mut ga[s * c..(s + 1) * c], &g[j * c..(j + 1) * c], 1.0);
                }
            }
            Op::ScatterAddRows { a, idx } => {
                let c = cols_of(*a);
                let ga = gbuf!(*a);
                for (j, &dst) in idx.iter().enumerate() {
                    let d = dst as usize;
                    axpy(&mut ga[j * c..(j + 1) * c], &g[d * c..(d + 1) * c], 1.0);
                }
            }
            Op::SumAll { a } => {
                let ga = gbuf!(*a);
                let gv = g[0];
                ga.iter_mut().for_each(|d| *d += gv);
            }
            Op::MeanRows { a } => {
                let r = self.node(*a).rows;
                let inv = 1.0 / r as f32;
                let ga = gbuf!(*a);
                for garow in ga.chunks_exact_mut(g.len()) {
                    axpy(garow, g, inv);
                }
            }
            Op::SumCols { a } => {
                let c = cols_of(*a);
                let ga = gbuf!(*a);
                for (garow, gv) in ga.chunks_exact_mut(c).zip(g) {
                    garow.iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::ScaleRows { a, f } => {
                let c = cols_of(*a);
                let ga = gbuf!(*a);
                for ((garow, grow), s) in ga.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(f.iter())
                {
                    axpy(garow, grow, *s);
                }
            }
            Op::Reshape { a } => axpy(gbuf!(*a), g, 1.0),
        }
    }
}

fn axpy(dst: &mut [f32], src: &[f32], alpha: f32) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// C[m,n] = alpha * A[m,k] * B[k,n] + beta * C, all row-major contiguous.
fn gemm_nn(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    gemm_strided(m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1);
}

#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let max_idx = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize
    };
    assert!(a.len() > max_idx(m, k, rsa, csa), "gemm: A too short");
    assert!(b.len() > max_idx(k, n, rsb, csb), "gemm: B too short");
    assert!(c.len() > max_idx(m, n, rsc, csc), "gemm: C too short");
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_is_two_x() {
        // d/dx (x*x) at x=3 is 6.
        let mut t = Tape::new();
        let x = t.scalar(3.0);
        let y = t.mul(x, x);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn relu_gradient_masks_negative_and_zero() {
        let mut t = Tape::new();
        let x = t.leaf(1, 3, vec![-1.0, 0.0, 2.0]);
        let r = t.relu(x);
        let s = t.sum_all(r);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_target() {
        let mut t = Tape::new();
        let x = t.leaf(1, 2, vec![1.0, 2.0]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let mut t = Tape::new();
        let a = t.leaf(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t.leaf(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = t.matmul(a, b);
        assert_eq!(t.value(c), &[58.0, 64.0, 139.0, 154.0]);
        let s = t.sum_all(c);
        t.backward(s).unwrap();
        // dC/dA = 1 * B^T summed over output cols.
        assert_eq!(t.grad(a).unwrap(), &[15.0, 19.0, 23.0, 15.0, 19.0, 23.0]);
        assert_eq!(t.grad(b).unwrap(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn gather_scatter_roundtrip_gradients() {
        let mut t = Tape::new();
        let a = t.leaf(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let idx = Rc::new(vec![2u32, 0, 2]);
        let g = t.gather_rows(a, idx.clone());
        assert_eq!(t.value(g), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let sc = t.scatter_add_rows(g, Rc::new(vec![0u32, 1, 0]), 2);
        assert_eq!(t.value(sc), &[10.0, 12.0, 1.0, 2.0]);
        let s = t.sum_all(sc);
        t.backward(s).unwrap();
        // Row 2 of `a` was gathered twice, row 0 once, row 1 never.
        assert_eq!(t.grad(a).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_slice_gradients_land_in_place() {
        let mut t = Tape::new();
        let a = t.leaf(2, 1, vec![1.0, 2.0]);
        let b = t.leaf(2, 2, vec![3.0, 4.0, 5.0, 6.0]);
        let cat = t.concat_cols(&[a, b]);
        let sl = t.slice_cols(cat, 1, 3);
        let s = t.sum_all(sl);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0, 0.0]);
        assert_eq!(t.grad(b).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn second_backward_replaces_gradients() {
        let mut t = Tape::new();
        let x = t.scalar(2.0);
        let y = t.mul(x, x);
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0]);
    }
}
