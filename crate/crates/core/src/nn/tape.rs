//! Reverse-mode automatic differentiation on a tape of primitive ops.
//!
//! A [`Tape`] records every primitive applied during a forward pass; each
//! recorded node keeps the forward value and a backward rule. Calling
//! [`Tape::backward`] replays the rules in reverse order exactly once and
//! accumulates gradients for every node. A tape is single-threaded and
//! single-shot: build, run backward, read gradients, drop.
//!
//! Shape mismatches are hard errors (panics) that report both shapes.

use super::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::rc::Rc;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn FnOnce(&[Tensor], &Tensor, &mut dyn FnMut(usize, Tensor))>;

/// Per-graph segment index used by the segmented pooling primitives:
/// `lists[g]` holds the node rows belonging to graph `g`.
pub type Segments = Rc<Vec<Vec<usize>>>;

#[derive(Default)]
struct TapeInner {
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    backs: Vec<Option<BackFn>>,
}

/// The recording tape.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, back: Option<BackFn>) -> Var {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.values.len();
        inner.values.push(value);
        inner.grads.push(None);
        inner.backs.push(back);
        Var(idx)
    }

    /// Records a differentiable leaf (parameters, inputs).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, None)
    }

    /// Records a constant; gradients flowing into it are discarded the same
    /// way as for a leaf, so this is an alias kept for readability.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.inner.borrow().values[v.0].clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().values[v.0].shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.inner.borrow().values[v.0].item()
    }

    /// Propagates gradients backward from a scalar root.
    pub fn backward(&self, root: Var) {
        let inner = &mut *self.inner.borrow_mut();
        assert_eq!(
            inner.values[root.0].numel(),
            1,
            "backward root must be scalar, got shape {:?}",
            inner.values[root.0].shape()
        );
        let seed = Tensor::new(inner.values[root.0].shape().to_vec(), vec![1.0]);
        inner.grads[root.0] = Some(seed);

        // Parents are always recorded before children, so a reverse sweep
        // visits each node after all of its consumers.
        for i in (0..=root.0).rev() {
            let Some(g) = inner.grads[i].take() else { continue };
            if let Some(back) = inner.backs[i].take() {
                let values = &inner.values;
                let grads = &mut inner.grads;
                back(values, &g, &mut |pid: usize, contrib: Tensor| {
                    debug_assert!(pid < i, "backward rule fed a non-parent node");
                    match &mut grads[pid] {
                        Some(acc) => acc.add_assign(&contrib),
                        slot => *slot = Some(contrib),
                    }
                });
            }
            inner.grads[i] = Some(g);
        }
    }

    /// Accumulated gradient of `v` after [`Tape::backward`]; zeros if no
    /// path reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let inner = self.inner.borrow();
        match &inner.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(inner.values[v.0].shape()),
        }
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            inner.values[a.0].zip(&inner.values[b.0], |x, y| x + y)
        };
        self.push(
            out,
            Some(Box::new(move |_vals, g, sink| {
                sink(a.0, g.clone());
                sink(b.0, g.clone());
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            inner.values[a.0].zip(&inner.values[b.0], |x, y| x - y)
        };
        self.push(
            out,
            Some(Box::new(move |_vals, g, sink| {
                sink(a.0, g.clone());
                sink(b.0, g.map(|v| -v));
            })),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            inner.values[a.0].zip(&inner.values[b.0], |x, y| x * y)
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                sink(a.0, g.zip(&vals[b.0], |gv, bv| gv * bv));
                sink(b.0, g.zip(&vals[a.0], |gv, av| gv * av));
            })),
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            inner.values[a.0].zip(&inner.values[b.0], |x, y| x / y)
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let bv = &vals[b.0];
                sink(a.0, g.zip(bv, |gv, b| gv / b));
                let av = &vals[a.0];
                let mut db = g.zip(av, |gv, a| gv * a);
                db = db.zip(bv, |x, b| -x / (b * b));
                sink(b.0, db);
            })),
        )
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.inner.borrow().values[a.0].map(|v| v * c);
        self.push(
            out,
            Some(Box::new(move |_vals, g, sink| {
                sink(a.0, g.map(|v| v * c));
            })),
        )
    }

    pub fn add_const(&self, a: Var, c: f64) -> Var {
        let out = self.inner.borrow().values[a.0].map(|v| v + c);
        self.push(
            out,
            Some(Box::new(move |_vals, g, sink| {
                sink(a.0, g.clone());
            })),
        )
    }

    /// `x (N x d) + broadcast bias (1 x d)`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let xv = &inner.values[x.0];
            let bv = &inner.values[bias.0];
            let d = xv.cols();
            assert_eq!(
                bv.shape(),
                &[1, d],
                "add_bias shape mismatch: {:?} + {:?}",
                xv.shape(),
                bv.shape()
            );
            let mut data = xv.data().to_vec();
            for r in 0..xv.rows() {
                for c in 0..d {
                    data[r * d + c] += bv.data()[c];
                }
            }
            Tensor::new(xv.shape().to_vec(), data)
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                sink(x.0, g.clone());
                let d = vals[bias.0].cols();
                let mut db = vec![0.0; d];
                for r in 0..g.rows() {
                    for c in 0..d {
                        db[c] += g.at2(r, c);
                    }
                }
                sink(bias.0, Tensor::row(&db));
            })),
        )
    }

    /// `x (N x d) * broadcast column (N x 1)`, differentiable in both.
    pub fn mul_col(&self, x: Var, col: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let xv = &inner.values[x.0];
            let cv = &inner.values[col.0];
            assert_eq!(
                cv.shape(),
                &[xv.rows(), 1],
                "mul_col shape mismatch: {:?} * {:?}",
                xv.shape(),
                cv.shape()
            );
            let d = xv.cols();
            let mut data = xv.data().to_vec();
            for r in 0..xv.rows() {
                let w = cv.data()[r];
                for c in 0..d {
                    data[r * d + c] *= w;
                }
            }
            Tensor::new(xv.shape().to_vec(), data)
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let xv = &vals[x.0];
                let cv = &vals[col.0];
                let d = xv.cols();
                let mut dx = g.data().to_vec();
                let mut dc = vec![0.0; xv.rows()];
                for r in 0..xv.rows() {
                    let w = cv.data()[r];
                    for c in 0..d {
                        let gi = g.at2(r, c);
                        dx[r * d + c] = gi * w;
                        dc[r] += gi * xv.at2(r, c);
                    }
                }
                sink(x.0, Tensor::new(xv.shape().to_vec(), dx));
                sink(col.0, Tensor::col(&dc));
            })),
        )
    }

    /// `x - broadcast scalar (1 x 1)`.
    pub fn sub_scalar_b(&self, x: Var, s: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let sv = inner.values[s.0].item();
            inner.values[x.0].map(|v| v - sv)
        };
        self.push(
            out,
            Some(Box::new(move |_vals, g, sink| {
                sink(x.0, g.clone());
                sink(s.0, Tensor::scalar(-g.data().iter().sum::<f64>()));
            })),
        )
    }

    /// Scales row `r` of `x` by the fixed coefficient `coefs[r]`
    /// (not differentiable with respect to the coefficients).
    pub fn scale_rows(&self, x: Var, coefs: Rc<Vec<f64>>) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let xv = &inner.values[x.0];
            assert_eq!(xv.rows(), coefs.len(), "scale_rows: {} rows vs {} coefs", xv.rows(), coefs.len());
            let d = xv.cols();
            let mut data = xv.data().to_vec();
            for r in 0..xv.rows() {
                for c in 0..d {
                    data[r * d + c] *= coefs[r];
                }
            }
            Tensor::new(xv.shape().to_vec(), data)
        };
        let coefs_b = coefs.clone();
        self.push(
            out,
            Some(Box::new(move |_vals, g, sink| {
                let d = g.cols();
                let mut dx = g.data().to_vec();
                for r in 0..g.rows() {
                    for c in 0..d {
                        dx[r * d + c] *= coefs_b[r];
                    }
                }
                sink(x.0, Tensor::new(g.shape().to_vec(), dx));
            })),
        )
    }

    // -- nonlinearities -------------------------------------------------------

    /// ReLU with the convention `relu'(0) = 0`.
    pub fn relu(&self, a: Var) -> Var {
        let out = self.inner.borrow().values[a.0].map(|v| v.max(0.0));
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                sink(a.0, g.zip(&vals[a.0], |gv, x| if x > 0.0 { gv } else { 0.0 }));
            })),
        )
    }

    /// ELU with the convention `elu'(0) = 1`.
    pub fn elu(&self, a: Var) -> Var {
        let out = self.inner.borrow().values[a.0].map(|v| if v > 0.0 { v } else { v.exp_m1() });
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                sink(
                    a.0,
                    g.zip(&vals[a.0], |gv, x| if x >= 0.0 { gv } else { gv * x.exp() }),
                );
            })),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.inner.borrow().values[a.0].map(f64::exp);
        let out_idx_probe = self.len();
        let v = self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                sink(a.0, g.zip(&vals[out_idx_probe], |gv, y| gv * y));
            })),
        );
        debug_assert_eq!(v.0, out_idx_probe);
        v
    }

    pub fn log(&self, a: Var) -> Var {
        let out = self.inner.borrow().values[a.0].map(f64::ln);
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                sink(a.0, g.zip(&vals[a.0], |gv, x| gv / x));
            })),
        )
    }

    /// Square root; the subgradient at exactly 0 is defined as 0 so a
    /// perfectly balanced coefficient-of-variation term does not explode.
    pub fn sqrt(&self, a: Var) -> Var {
        let out = self.inner.borrow().values[a.0].map(f64::sqrt);
        let out_idx_probe = self.len();
        let v = self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                sink(
                    a.0,
                    g.zip(&vals[out_idx_probe], |gv, y| if y == 0.0 { 0.0 } else { gv / (2.0 * y) }),
                );
            })),
        );
        debug_assert_eq!(v.0, out_idx_probe);
        v
    }

    /// Row-wise softmax with max-shift stabilization.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let xv = &inner.values[a.0];
            let (r, c) = (xv.rows(), xv.cols());
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                let row = &xv.data()[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..c {
                    let e = (row[j] - m).exp();
                    data[i * c + j] = e;
                    z += e;
                }
                for j in 0..c {
                    data[i * c + j] /= z;
                }
            }
            Tensor::new(vec![r, c], data)
        };
        let out_idx_probe = self.len();
        let v = self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let y = &vals[out_idx_probe];
                let (r, c) = (y.rows(), y.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g.at2(i, j) * y.at2(i, j);
                    }
                    for j in 0..c {
                        dx[i * c + j] = y.at2(i, j) * (g.at2(i, j) - dot);
                    }
                }
                sink(a.0, Tensor::new(vec![r, c], dx));
            })),
        );
        debug_assert_eq!(v.0, out_idx_probe);
        v
    }

    // -- matrix ops -----------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            inner.values[a.0].matmul(&inner.values[b.0])
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                sink(a.0, g.matmul(&vals[b.0].transposed()));
                sink(b.0, vals[a.0].transposed().matmul(g));
            })),
        )
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.inner.borrow().values[a.0].transposed();
        self.push(
            out,
            Some(Box::new(move |_vals, g, sink| {
                sink(a.0, g.transposed());
            })),
        )
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Var {
        let out = self.inner.borrow().values[a.0].reshaped(shape);
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                sink(a.0, g.reshaped(vals[a.0].shape().to_vec()));
            })),
        )
    }

    // -- reductions ------------------------------------------------------------

    pub fn sum_all(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.inner.borrow().values[a.0].data().iter().sum());
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let gv = g.item();
                sink(a.0, vals[a.0].map(|_| gv));
            })),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let (sum, n) = {
            let inner = self.inner.borrow();
            let t = &inner.values[a.0];
            (t.data().iter().sum::<f64>(), t.numel() as f64)
        };
        self.push(
            Tensor::scalar(sum / n),
            Some(Box::new(move |vals, g, sink| {
                let gv = g.item() / n;
                sink(a.0, vals[a.0].map(|_| gv));
            })),
        )
    }

    /// Sum over rows: `(r x c) -> (1 x c)`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.values[a.0];
            let (r, c) = (t.rows(), t.cols());
            let mut data = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    data[j] += t.at2(i, j);
                }
            }
            Tensor::row(&data)
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let t = &vals[a.0];
                let (r, c) = (t.rows(), t.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g.data()[j];
                    }
                }
                sink(a.0, Tensor::new(vec![r, c], dx));
            })),
        )
    }

    /// Mean over rows: `(r x c) -> (1 x c)`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let r = self.inner.borrow().values[a.0].rows();
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / r as f64)
    }

    /// Sum over columns: `(r x c) -> (r x 1)`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.values[a.0];
            let (r, c) = (t.rows(), t.cols());
            let mut data = vec![0.0; r];
            for i in 0..r {
                for j in 0..c {
                    data[i] += t.at2(i, j);
                }
            }
            Tensor::col(&data)
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let t = &vals[a.0];
                let (r, c) = (t.rows(), t.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g.data()[i];
                    }
                }
                sink(a.0, Tensor::new(vec![r, c], dx));
            })),
        )
    }

    // -- structure ops ----------------------------------------------------------

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of zero tensors");
        let (out, widths) = {
            let inner = self.inner.borrow();
            let r = inner.values[parts[0].0].rows();
            let widths: Vec<usize> = parts.iter().map(|p| inner.values[p.0].cols()).collect();
            let total: usize = widths.iter().sum();
            let mut data = vec![0.0; r * total];
            let mut off = 0;
            for (p, w) in parts.iter().zip(&widths) {
                let t = &inner.values[p.0];
                assert_eq!(t.rows(), r, "concat_cols row mismatch: {} vs {}", t.rows(), r);
                for i in 0..r {
                    data[i * total + off..i * total + off + w]
                        .copy_from_slice(&t.data()[i * w..(i + 1) * w]);
                }
                off += w;
            }
            (Tensor::new(vec![r, total], data), widths)
        };
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            out,
            Some(Box::new(move |_vals, g, sink| {
                let r = g.rows();
                let total = g.cols();
                let mut off = 0;
                for (p, w) in parts.iter().zip(&widths) {
                    let mut dp = vec![0.0; r * w];
                    for i in 0..r {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&g.data()[i * total + off..i * total + off + w]);
                    }
                    sink(p.0, Tensor::new(vec![r, *w], dp));
                    off += w;
                }
            })),
        )
    }

    /// Extracts column `j` as an `(r x 1)` tensor.
    pub fn slice_col(&self, a: Var, j: usize) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.values[a.0];
            assert!(j < t.cols(), "slice_col {} out of {} columns", j, t.cols());
            Tensor::col(&(0..t.rows()).map(|i| t.at2(i, j)).collect::<Vec<_>>())
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let t = &vals[a.0];
                let mut dx = Tensor::zeros(t.shape());
                for i in 0..t.rows() {
                    dx.set2(i, j, g.data()[i]);
                }
                sink(a.0, dx);
            })),
        )
    }

    /// Gathers rows of `x` at `idx` (duplicates allowed).
    pub fn gather_rows(&self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.values[x.0];
            let d = t.cols();
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in idx.iter() {
                data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
            Tensor::new(vec![idx.len(), d], data)
        };
        let idx_b = idx.clone();
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let t = &vals[x.0];
                let d = t.cols();
                let mut dx = Tensor::zeros(t.shape());
                for (r, &i) in idx_b.iter().enumerate() {
                    for c in 0..d {
                        dx.data_mut()[i * d + c] += g.at2(r, c);
                    }
                }
                sink(x.0, dx);
            })),
        )
    }

    /// Scatter-adds the rows of `x` into an `(n_rows x d)` output at `idx`
    /// (duplicates accumulate, in row order).
    pub fn scatter_add_rows(&self, x: Var, idx: Rc<Vec<usize>>, n_rows: usize) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.values[x.0];
            assert_eq!(t.rows(), idx.len(), "scatter_add: {} rows vs {} indices", t.rows(), idx.len());
            let d = t.cols();
            let mut data = vec![0.0; n_rows * d];
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..d {
                    data[i * d + c] += t.at2(r, c);
                }
            }
            Tensor::new(vec![n_rows, d], data)
        };
        let idx_b = idx.clone();
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let d = vals[x.0].cols();
                let mut dx = Vec::with_capacity(idx_b.len() * d);
                for &i in idx_b.iter() {
                    dx.extend_from_slice(&g.data()[i * d..(i + 1) * d]);
                }
                sink(x.0, Tensor::new(vec![idx_b.len(), d], dx));
            })),
        )
    }

    /// Copy of `base` with row `idx[i]` replaced by row `i` of `rows`.
    /// Indices must be unique.
    pub fn replace_rows(&self, base: Var, rows: Var, idx: Rc<Vec<usize>>) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let b = &inner.values[base.0];
            let r = &inner.values[rows.0];
            assert_eq!(r.rows(), idx.len(), "replace_rows: {} rows vs {} indices", r.rows(), idx.len());
            assert_eq!(b.cols(), r.cols(), "replace_rows width mismatch: {} vs {}", b.cols(), r.cols());
            let d = b.cols();
            let mut data = b.data().to_vec();
            for (i, &at) in idx.iter().enumerate() {
                data[at * d..(at + 1) * d].copy_from_slice(&r.data()[i * d..(i + 1) * d]);
            }
            Tensor::new(b.shape().to_vec(), data)
        };
        let idx_b = idx.clone();
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let d = g.cols();
                let mut dbase = g.data().to_vec();
                let mut drows = Vec::with_capacity(idx_b.len() * d);
                for &at in idx_b.iter() {
                    drows.extend_from_slice(&g.data()[at * d..(at + 1) * d]);
                    dbase[at * d..(at + 1) * d].fill(0.0);
                }
                sink(base.0, Tensor::new(vals[base.0].shape().to_vec(), dbase));
                sink(rows.0, Tensor::new(vec![idx_b.len(), d], drows));
            })),
        )
    }

    // -- segmented pooling -------------------------------------------------------

    /// Softmax of a score column within each segment: rows outside any
    /// segment get 0, rows of segment `g` are softmax-normalized among
    /// themselves.
    pub fn segment_softmax(&self, scores: Var, segments: Segments) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let s = &inner.values[scores.0];
            assert_eq!(s.cols(), 1, "segment_softmax wants a column, got {:?}", s.shape());
            let mut data = vec![0.0; s.rows()];
            for seg in segments.iter() {
                let m = seg.iter().map(|&i| s.data()[i]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for &i in seg {
                    let e = (s.data()[i] - m).exp();
                    data[i] = e;
                    z += e;
                }
                for &i in seg {
                    data[i] /= z;
                }
            }
            Tensor::col(&data)
        };
        let segs = segments.clone();
        let out_idx_probe = self.len();
        let v = self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let y = &vals[out_idx_probe];
                let mut dx = vec![0.0; y.rows()];
                for seg in segs.iter() {
                    let dot: f64 = seg.iter().map(|&i| g.data()[i] * y.data()[i]).sum();
                    for &i in seg {
                        dx[i] = y.data()[i] * (g.data()[i] - dot);
                    }
                }
                sink(scores.0, Tensor::col(&dx));
            })),
        );
        debug_assert_eq!(v.0, out_idx_probe);
        v
    }

    /// Weighted sum of the rows of `x` within each segment:
    /// `out[g] = sum_{i in segment g} w[i] * x[i]`, shape `(n_segments x d)`.
    pub fn segment_weighted_sum(&self, x: Var, w: Var, segments: Segments) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let xv = &inner.values[x.0];
            let wv = &inner.values[w.0];
            assert_eq!(wv.shape(), &[xv.rows(), 1], "segment_weighted_sum: weights {:?} for {:?}", wv.shape(), xv.shape());
            let d = xv.cols();
            let mut data = vec![0.0; segments.len() * d];
            for (gid, seg) in segments.iter().enumerate() {
                for &i in seg {
                    let wi = wv.data()[i];
                    for c in 0..d {
                        data[gid * d + c] += wi * xv.at2(i, c);
                    }
                }
            }
            Tensor::new(vec![segments.len(), d], data)
        };
        let segs = segments.clone();
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let xv = &vals[x.0];
                let wv = &vals[w.0];
                let d = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dw = vec![0.0; xv.rows()];
                for (gid, seg) in segs.iter().enumerate() {
                    for &i in seg {
                        let wi = wv.data()[i];
                        let mut dot = 0.0;
                        for c in 0..d {
                            let gc = g.at2(gid, c);
                            dx.data_mut()[i * d + c] += wi * gc;
                            dot += gc * xv.at2(i, c);
                        }
                        dw[i] += dot;
                    }
                }
                sink(x.0, dx);
                sink(w.0, Tensor::col(&dw));
            })),
        )
    }

    // -- stochastic / losses -------------------------------------------------------

    /// Inverted dropout: at train time keeps each element with probability
    /// `1 - p` and scales by `1/(1-p)`; identity in eval mode.
    pub fn dropout(&self, x: Var, p: f64, train: bool, rng: &mut ChaCha8Rng) -> Var {
        if !train || p == 0.0 {
            return x;
        }
        assert!((0.0..1.0).contains(&p), "dropout p={p} outside [0,1)");
        let keep = 1.0 - p;
        let mask: Rc<Vec<f64>> = {
            let inner = self.inner.borrow();
            let n = inner.values[x.0].numel();
            Rc::new(
                (0..n)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect(),
            )
        };
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.values[x.0];
            let data = t.data().iter().zip(mask.iter()).map(|(&v, &m)| v * m).collect();
            Tensor::new(t.shape().to_vec(), data)
        };
        let mask_b = mask.clone();
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let data = g.data().iter().zip(mask_b.iter()).map(|(&v, &m)| v * m).collect();
                sink(x.0, Tensor::new(vals[x.0].shape().to_vec(), data));
            })),
        )
    }

    /// Mean cross-entropy of row logits against integer class labels.
    pub fn cross_entropy_mean(&self, logits: Var, classes: Rc<Vec<usize>>) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.values[logits.0];
            assert_eq!(t.rows(), classes.len(), "cross_entropy: {} rows vs {} labels", t.rows(), classes.len());
            let c = t.cols();
            let mut total = 0.0;
            for (i, &y) in classes.iter().enumerate() {
                let row = &t.data()[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
            Tensor::scalar(total / classes.len() as f64)
        };
        let classes_b = classes.clone();
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let t = &vals[logits.0];
                let (r, c) = (t.rows(), t.cols());
                let gv = g.item() / r as f64;
                let mut dx = vec![0.0; r * c];
                for (i, &y) in classes_b.iter().enumerate() {
                    let row = &t.data()[i * c..(i + 1) * c];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - m).exp() / z;
                        dx[i * c + j] = gv * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
                sink(logits.0, Tensor::new(vec![r, c], dx));
            })),
        )
    }

    /// Total mean-squared error against a constant target: the per-target
    /// MSE is a mean over rows, and per-target MSEs are summed over columns.
    pub fn total_mse(&self, pred: Var, target: &Tensor) -> Var {
        let t = self.constant(target.clone());
        let diff = self.sub(pred, t);
        let sq = self.mul(diff, diff);
        let per_target = self.mean_rows(sq);
        self.sum_all(per_target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    /// Central finite differences on a scalar-valued closure of one tensor.
    fn fd_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() / denom < tol,
                "gradient mismatch: {x} vs {y} (tol {tol})"
            );
        }
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[0.0, 0.0, 0.0]));
        let y = tape.softmax_rows(x);
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance_and_row_sums() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![0.3, -1.2, 2.0, 5.0, 5.0, 5.5]));
        let shifted = tape.add_const(x, 123.456);
        let y0 = tape.value(tape.softmax_rows(x));
        let y1 = tape.value(tape.softmax_rows(shifted));
        for (a, b) in y0.data().iter().zip(y1.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        for r in 0..2 {
            let s: f64 = (0..3).map(|c| y0.at2(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn elu_value_and_joint_derivative() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[0.0]));
        let y = tape.elu(x);
        assert_eq!(tape.value(y).data()[0], 0.0);
        let s = tape.sum_all(y);
        tape.backward(s);
        assert_eq!(tape.grad(x).data()[0], 1.0);
    }

    #[test]
    fn mean_of_square_gradient_matches_hand_value() {
        // d/dx mean(x^2) at x=[1,2,3] is [2/3, 4/3, 2]
        let tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0, 3.0]));
        let y = tape.mean_all(tape.mul(x, x));
        tape.backward(y);
        let g = tape.grad(x);
        let expect = [2.0 / 3.0, 4.0 / 3.0, 2.0];
        for (a, b) in g.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        // and against central differences with h = 1e-6
        let fd = fd_grad(
            &|t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>() / 3.0,
            &Tensor::row(&[1.0, 2.0, 3.0]),
            1e-6,
        );
        assert_close(&g, &fd, 1e-6);
    }

    #[test]
    fn cross_entropy_matches_ln2() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]));
        let loss = tape.cross_entropy_mean(logits, Rc::new(vec![0]));
        assert!((tape.item(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn total_mse_sums_over_targets() {
        let tape = Tape::new();
        let pred = tape.leaf(Tensor::matrix(2, 5, vec![0.0; 10]));
        // each target column has MSE 0.1 -> total 0.5
        let mut target = Tensor::zeros(&[2, 5]);
        for c in 0..5 {
            target.set2(0, c, (0.1f64).sqrt());
            target.set2(1, c, -(0.1f64).sqrt());
        }
        let loss = tape.total_mse(pred, &target);
        assert!((tape.item(loss) - 0.5).abs() < 1e-12);
        // mse(x, x) = 0
        let same = tape.leaf(target.clone());
        let zero = tape.total_mse(same, &target);
        assert_eq!(tape.item(zero), 0.0);
    }

    /// One randomized gradient check per primitive that has a nontrivial
    /// backward rule.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut r = rng();
        let x0 = Tensor::randn(&[3, 4], 1.0, &mut r);
        let y0 = Tensor::randn(&[3, 4], 1.0, &mut r);
        let w0 = Tensor::randn(&[4, 2], 1.0, &mut r);

        type Builder = Box<dyn Fn(&Tape, Var, Var, Var) -> Var>;
        let segments: Segments = Rc::new(vec![vec![0, 2], vec![1]]);
        let idx = Rc::new(vec![2usize, 0, 0]);

        let cases: Vec<(&str, Builder)> = vec![
            ("add", Box::new(|t, a, b, _| { let s = t.add(a, b); t.sum_all(t.mul(s, s)) })),
            ("sub", Box::new(|t, a, b, _| { let s = t.sub(a, b); t.sum_all(t.mul(s, s)) })),
            ("div", Box::new(|t, a, b, _| { let s = t.div(a, t.add_const(t.mul(b, b), 1.0)); t.sum_all(t.mul(s, s)) })),
            ("matmul", Box::new(|t, a, _, w| { let m = t.matmul(a, w); t.sum_all(t.mul(m, m)) })),
            ("relu", Box::new(|t, a, _, _| { let m = t.relu(a); t.sum_all(t.mul(m, m)) })),
            ("elu", Box::new(|t, a, _, _| { let m = t.elu(a); t.sum_all(t.mul(m, m)) })),
            ("exp", Box::new(|t, a, _, _| { let m = t.exp(a); t.sum_all(m) })),
            ("log", Box::new(|t, a, _, _| { let m = t.log(t.add_const(t.mul(a, a), 1.0)); t.sum_all(m) })),
            ("sqrt", Box::new(|t, a, _, _| { let m = t.sqrt(t.add_const(t.mul(a, a), 0.5)); t.sum_all(m) })),
            ("softmax", Box::new(|t, a, _, _| { let m = t.softmax_rows(a); t.sum_all(t.mul(m, m)) })),
            ("mean_rows", Box::new(|t, a, _, _| { let m = t.mean_rows(a); t.sum_all(t.mul(m, m)) })),
            ("sum_cols", Box::new(|t, a, _, _| { let m = t.sum_cols(a); t.sum_all(t.mul(m, m)) })),
            ("transpose", Box::new(|t, a, _, _| { let m = t.transpose(a); t.sum_all(t.mul(m, m)) })),
            ("concat", Box::new(|t, a, b, _| { let m = t.concat_cols(&[a, b]); t.sum_all(t.mul(m, m)) })),
            ("slice_col", Box::new(|t, a, _, _| { let m = t.slice_col(a, 1); t.sum_all(t.mul(m, m)) })),
            ("mul_col", Box::new(move |t, a, _, _| {
                let c = t.sum_cols(a);
                let m = t.mul_col(a, c);
                t.sum_all(t.mul(m, m))
            })),
            ("sub_scalar_b", Box::new(|t, a, _, _| {
                let s = t.mean_all(a);
                let m = t.sub_scalar_b(a, s);
                t.sum_all(t.mul(m, m))
            })),
            ("gather", Box::new({
                let idx = idx.clone();
                move |t, a, _, _| {
                    let m = t.gather_rows(a, idx.clone());
                    t.sum_all(t.mul(m, m))
                }
            })),
            ("scatter", Box::new({
                let idx = idx.clone();
                move |t, a, _, _| {
                    let m = t.scatter_add_rows(a, idx.clone(), 5);
                    t.sum_all(t.mul(m, m))
                }
            })),
            ("replace_rows", Box::new(|t, a, b, _| {
                let rows = t.gather_rows(b, Rc::new(vec![0, 1]));
                let m = t.replace_rows(a, rows, Rc::new(vec![2, 0]));
                t.sum_all(t.mul(m, m))
            })),
            ("segment_softmax", Box::new({
                let segments = segments.clone();
                move |t, a, _, _| {
                    let col = t.sum_cols(a);
                    let sm = t.segment_softmax(col, segments.clone());
                    t.sum_all(t.mul(sm, sm))
                }
            })),
            ("segment_weighted_sum", Box::new({
                let segments = segments.clone();
                move |t, a, b, _| {
                    let w = t.sum_cols(b);
                    let m = t.segment_weighted_sum(a, w, segments.clone());
                    t.sum_all(t.mul(m, m))
                }
            })),
            ("cross_entropy", Box::new(|t, a, _, _| {
                t.cross_entropy_mean(a, Rc::new(vec![0, 2, 1]))
            })),
        ];

        for (name, build) in &cases {
            let tape = Tape::new();
            let a = tape.leaf(x0.clone());
            let b = tape.leaf(y0.clone());
            let w = tape.leaf(w0.clone());
            let loss = build(&tape, a, b, w);
            tape.backward(loss);
            let analytic = tape.grad(a);

            let fd = fd_grad(
                &|xp: &Tensor| {
                    let t2 = Tape::new();
                    let a2 = t2.leaf(xp.clone());
                    let b2 = t2.leaf(y0.clone());
                    let w2 = t2.leaf(w0.clone());
                    t2.item(build(&t2, a2, b2, w2))
                },
                &x0,
                1e-6,
            );
            assert_eq!(analytic.shape(), fd.shape(), "{name}");
            for (i, (x, y)) in analytic.data().iter().zip(fd.data()).enumerate() {
                let denom = x.abs().max(y.abs()).max(1.0);
                assert!(
                    (x - y).abs() / denom < 1e-6,
                    "{name}: grad[{i}] analytic {x} vs fd {y}"
                );
            }
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut r = rng();
            let tape = Tape::new();
            let x = tape.leaf(Tensor::randn(&[4, 3], 1.0, &mut r));
            let w = tape.leaf(Tensor::randn(&[3, 3], 1.0, &mut r));
            let h = tape.relu(tape.matmul(x, w));
            let h = tape.dropout(h, 0.3, true, &mut r);
            let loss = tape.mean_all(tape.mul(h, h));
            tape.backward(loss);
            (tape.item(loss), tape.grad(w).into_data())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(
            g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn dropout_eval_is_identity() {
        let tape = Tape::new();
        let mut r = rng();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0, 3.0]));
        let y = tape.dropout(x, 0.5, false, &mut r);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
    }
}
