//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared, immutable value node in a dynamically built
//! graph; every op records its parents and a closure that maps the output
//! gradient to parent gradients. [`Tensor::backward`] walks the graph in
//! reverse topological order and accumulates gradients into every
//! `requires_grad` ancestor. The graph is rebuilt on each forward pass;
//! values are never mutated once written, so backward cannot disturb forward
//! activations.
//!
//! Reductions that feed losses accumulate in `f64` regardless of the scalar
//! type to reduce summation-order sensitivity.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackFn<F> = Box<dyn Fn(&[F]) -> Vec<Option<Vec<F>>>>;

struct Node<F: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<F>>>,
    parents: Vec<Tensor<F>>,
    backward: Option<BackFn<F>>,
}

/// Shared handle to a graph node. Cloning is cheap.
pub struct Tensor<F: Scalar>(Rc<Node<F>>);

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<F: Scalar> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

// ---------------------------------------------------------------------------
// raw kernels
// ---------------------------------------------------------------------------

/// `c[m×n] = a[m×k] · b[k×n]`, ikj loop order so the inner loop runs over
/// contiguous rows of `b` and `c`.
pub(crate) fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + av * bj;
            }
        }
    }
    c
}

pub(crate) fn transpose_raw<F: Scalar>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut t = vec![F::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn sum_f64<F: Scalar>(xs: &[F]) -> f64 {
    xs.iter().map(|x| x.as_f64()).sum()
}

// ---------------------------------------------------------------------------
// construction
// ---------------------------------------------------------------------------

impl<F: Scalar> Tensor<F> {
    fn make(
        shape: Vec<usize>,
        data: Vec<F>,
        requires_grad: bool,
        parents: Vec<Tensor<F>>,
        backward: Option<BackFn<F>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Node {
            id: fresh_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward,
        }))
    }

    fn unary(
        &self,
        shape: Vec<usize>,
        data: Vec<F>,
        backward: impl Fn(&[F]) -> Vec<F> + 'static,
    ) -> Self {
        if self.requires_grad() {
            let back: BackFn<F> = Box::new(move |g| vec![Some(backward(g))]);
            Tensor::make(shape, data, true, vec![self.clone()], Some(back))
        } else {
            Tensor::make(shape, data, false, vec![], None)
        }
    }

    /// Leaf holding values, with or without gradient participation.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<F>, requires_grad: bool) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} expects {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor::make(shape, data, requires_grad, vec![], None))
    }

    /// Constant leaf (no gradient).
    pub fn constant(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        Tensor::from_vec(shape, data, false)
    }

    pub fn scalar(value: F) -> Self {
        Tensor::make(vec![1], vec![value], false, vec![], None)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor::make(shape, vec![F::zero(); numel], false, vec![], None)
    }

    // -- accessors ----------------------------------------------------------

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Populated gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<F>> {
        self.0.grad.borrow().clone()
    }

    pub fn take_grad(&self) -> Option<Vec<F>> {
        self.0.grad.borrow_mut().take()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.0.data[0]
    }

    fn dims2(&self, op: &str) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected 2-d tensor, got shape {:?}", s))),
        }
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.0.shape != other.0.shape {
            return Err(Error::shape(
                op,
                format!("shape {:?} vs {:?}", self.0.shape, other.0.shape),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

impl<F: Scalar> Tensor<F> {
    /// Matrix product `[m×k]·[k×n] -> [m×n]`.
    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions disagree: [{m}×{k}] · [{k2}×{n}]"),
            ));
        }
        let out = matmul_raw(&self.0.data, &rhs.0.data, m, k, n);
        let rg = self.requires_grad() || rhs.requires_grad();
        if !rg {
            return Tensor::constant(vec![m, n], out);
        }
        let a = self.clone();
        let b = rhs.clone();
        let back: BackFn<F> = Box::new(move |g| {
            let da = a.requires_grad().then(|| {
                let bt = transpose_raw(&b.0.data, k, n);
                matmul_raw(g, &bt, m, n, k)
            });
            let db = b.requires_grad().then(|| {
                let at = transpose_raw(&a.0.data, m, k);
                matmul_raw(&at, g, k, m, n)
            });
            vec![da, db]
        });
        Ok(Tensor::make(
            vec![m, n],
            out,
            true,
            vec![self.clone(), rhs.clone()],
            Some(back),
        ))
    }

    /// Affine map `y = x·Wᵀ (+ bias)`, with `x: [rows×k]`, `W: [d×k]`,
    /// `bias: [d]`.
    pub fn linear(&self, w: &Tensor<F>, bias: Option<&Tensor<F>>) -> Result<Tensor<F>> {
        let (rows, k) = self.dims2("linear")?;
        let (d, k2) = w.dims2("linear")?;
        if k != k2 {
            return Err(Error::shape(
                "linear",
                format!("input [{rows}×{k}] incompatible with weight [{d}×{k2}]"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [d] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {:?} does not match output dim {d}", b.shape()),
                ));
            }
        }
        let wt = transpose_raw(&w.0.data, d, k);
        let mut out = matmul_raw(&self.0.data, &wt, rows, k, d);
        if let Some(b) = bias {
            for r in 0..rows {
                for (o, &bv) in out[r * d..(r + 1) * d].iter_mut().zip(&b.0.data) {
                    *o = *o + bv;
                }
            }
        }
        let rg = self.requires_grad()
            || w.requires_grad()
            || bias.map(|b| b.requires_grad()).unwrap_or(false);
        if !rg {
            return Tensor::constant(vec![rows, d], out);
        }
        let x = self.clone();
        let wc = w.clone();
        let has_bias = bias.is_some();
        let bias_rg = bias.map(|b| b.requires_grad()).unwrap_or(false);
        let back: BackFn<F> = Box::new(move |g| {
            let dx = x
                .requires_grad()
                .then(|| matmul_raw(g, &wc.0.data, rows, d, k));
            let dw = wc.requires_grad().then(|| {
                let gt = transpose_raw(g, rows, d);
                matmul_raw(&gt, &x.0.data, d, rows, k)
            });
            let db = bias_rg.then(|| {
                let mut db = vec![F::zero(); d];
                for r in 0..rows {
                    for (acc, &gv) in db.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *acc += gv;
                    }
                }
                db
            });
            if has_bias {
                vec![dx, dw, db]
            } else {
                vec![dx, dw]
            }
        });
        let mut parents = vec![self.clone(), w.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::make(vec![rows, d], out, true, parents, Some(back)))
    }

    pub fn transpose(&self) -> Result<Tensor<F>> {
        let (r, c) = self.dims2("transpose")?;
        let out = transpose_raw(&self.0.data, r, c);
        Ok(self.unary(vec![c, r], out, move |g| transpose_raw(g, c, r)))
    }

    pub fn add(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.same_shape(rhs, "add")?;
        let out = self
            .0
            .data
            .iter()
            .zip(&rhs.0.data)
            .map(|(&a, &b)| a + b)
            .collect();
        self.binary_elementwise(rhs, out, |g, _, _| g.to_vec(), |g, _, _| g.to_vec())
    }

    pub fn sub(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.same_shape(rhs, "sub")?;
        let out = self
            .0
            .data
            .iter()
            .zip(&rhs.0.data)
            .map(|(&a, &b)| a - b)
            .collect();
        self.binary_elementwise(
            rhs,
            out,
            |g, _, _| g.to_vec(),
            |g, _, _| g.iter().map(|&v| -v).collect(),
        )
    }

    pub fn mul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.same_shape(rhs, "mul")?;
        let out = self
            .0
            .data
            .iter()
            .zip(&rhs.0.data)
            .map(|(&a, &b)| a * b)
            .collect();
        self.binary_elementwise(
            rhs,
            out,
            |g, _, b| g.iter().zip(b).map(|(&gv, &bv)| gv * bv).collect(),
            |g, a, _| g.iter().zip(a).map(|(&gv, &av)| gv * av).collect(),
        )
    }

    pub fn div(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.same_shape(rhs, "div")?;
        let out = self
            .0
            .data
            .iter()
            .zip(&rhs.0.data)
            .map(|(&a, &b)| a / b)
            .collect();
        self.binary_elementwise(
            rhs,
            out,
            |g, _, b| g.iter().zip(b).map(|(&gv, &bv)| gv / bv).collect(),
            |g, a, b| {
                g.iter()
                    .zip(a.iter().zip(b))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect()
            },
        )
    }

    fn binary_elementwise(
        &self,
        rhs: &Tensor<F>,
        out: Vec<F>,
        da: impl Fn(&[F], &[F], &[F]) -> Vec<F> + 'static,
        db: impl Fn(&[F], &[F], &[F]) -> Vec<F> + 'static,
    ) -> Result<Tensor<F>> {
        let shape = self.0.shape.clone();
        let rg = self.requires_grad() || rhs.requires_grad();
        if !rg {
            return Tensor::constant(shape, out);
        }
        let a = self.clone();
        let b = rhs.clone();
        let back: BackFn<F> = Box::new(move |g| {
            let ga = a.requires_grad().then(|| da(g, &a.0.data, &b.0.data));
            let gb = b.requires_grad().then(|| db(g, &a.0.data, &b.0.data));
            vec![ga, gb]
        });
        Ok(Tensor::make(
            shape,
            out,
            true,
            vec![self.clone(), rhs.clone()],
            Some(back),
        ))
    }

    pub fn scale(&self, c: F) -> Tensor<F> {
        let out = self.0.data.iter().map(|&x| x * c).collect();
        self.unary(self.0.shape.clone(), out, move |g| {
            g.iter().map(|&v| v * c).collect()
        })
    }

    pub fn add_scalar(&self, c: F) -> Tensor<F> {
        let out = self.0.data.iter().map(|&x| x + c).collect();
        self.unary(self.0.shape.clone(), out, |g| g.to_vec())
    }

    /// GELU in the tanh approximation.
    pub fn gelu(&self) -> Tensor<F> {
        let c = lit::<F>(0.7978845608028654); // sqrt(2/pi)
        let a = lit::<F>(0.044715);
        let half = lit::<F>(0.5);
        let one = F::one();
        let three = lit::<F>(3.0);
        let xs = self.0.data.clone();
        let out: Vec<F> = xs
            .iter()
            .map(|&x| {
                let u = c * (x + a * x * x * x);
                half * x * (one + u.tanh())
            })
            .collect();
        self.unary(self.0.shape.clone(), out, move |g| {
            g.iter()
                .zip(&xs)
                .map(|(&gv, &x)| {
                    let u = c * (x + a * x * x * x);
                    let t = u.tanh();
                    let sech2 = one - t * t;
                    let du = c * (one + three * a * x * x);
                    gv * (half * (one + t) + half * x * sech2 * du)
                })
                .collect()
        })
    }

    /// Row-wise layer normalization with learnable scale and offset.
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
        let (rows, w) = self.dims2("layer_norm")?;
        if gamma.shape() != [w] || beta.shape() != [w] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must be [{w}]",
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let epsf = lit::<F>(eps);
        let inv_w = lit::<F>(1.0 / w as f64);
        let mut out = vec![F::zero(); rows * w];
        let mut xhat = vec![F::zero(); rows * w];
        let mut inv_std = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &self.0.data[r * w..(r + 1) * w];
            let mut mu = F::zero();
            for &v in row {
                mu += v;
            }
            mu = mu * inv_w;
            let mut var = F::zero();
            for &v in row {
                let d = v - mu;
                var += d * d;
            }
            var = var * inv_w;
            let s = (var + epsf).sqrt().recip();
            inv_std[r] = s;
            for j in 0..w {
                let xh = (row[j] - mu) * s;
                xhat[r * w + j] = xh;
                out[r * w + j] = gamma.0.data[j] * xh + beta.0.data[j];
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        if !rg {
            return Tensor::constant(vec![rows, w], out);
        }
        let x = self.clone();
        let gm = gamma.clone();
        let bt = beta.clone();
        let back: BackFn<F> = Box::new(move |g| {
            let dx = x.requires_grad().then(|| {
                let mut dx = vec![F::zero(); rows * w];
                for r in 0..rows {
                    let grow = &g[r * w..(r + 1) * w];
                    let xrow = &xhat[r * w..(r + 1) * w];
                    let s = inv_std[r];
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..w {
                        let gg = grow[j] * gm.0.data[j];
                        m1 += gg;
                        m2 += gg * xrow[j];
                    }
                    m1 = m1 * inv_w;
                    m2 = m2 * inv_w;
                    for j in 0..w {
                        let gg = grow[j] * gm.0.data[j];
                        dx[r * w + j] = (gg - m1 - xrow[j] * m2) * s;
                    }
                }
                dx
            });
            let dgamma = gm.requires_grad().then(|| {
                let mut dg = vec![F::zero(); w];
                for r in 0..rows {
                    for j in 0..w {
                        dg[j] += g[r * w + j] * xhat[r * w + j];
                    }
                }
                dg
            });
            let dbeta = bt.requires_grad().then(|| {
                let mut db = vec![F::zero(); w];
                for r in 0..rows {
                    for j in 0..w {
                        db[j] += g[r * w + j];
                    }
                }
                db
            });
            vec![dx, dgamma, dbeta]
        });
        Ok(Tensor::make(
            vec![rows, w],
            out,
            true,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Some(back),
        ))
    }

    /// Row-wise softmax (max-shifted for stability).
    pub fn softmax_rows(&self) -> Result<Tensor<F>> {
        let (rows, w) = self.dims2("softmax_rows")?;
        let mut out = vec![F::zero(); rows * w];
        for r in 0..rows {
            let row = &self.0.data[r * w..(r + 1) * w];
            let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for j in 0..w {
                let e = (row[j] - mx).exp();
                out[r * w + j] = e;
                z += e;
            }
            let inv = z.recip();
            for j in 0..w {
                out[r * w + j] = out[r * w + j] * inv;
            }
        }
        let probs = out.clone();
        Ok(self.unary(vec![rows, w], out, move |g| {
            let mut dx = vec![F::zero(); rows * w];
            for r in 0..rows {
                let p = &probs[r * w..(r + 1) * w];
                let grow = &g[r * w..(r + 1) * w];
                let mut dot = F::zero();
                for j in 0..w {
                    dot += grow[j] * p[j];
                }
                for j in 0..w {
                    dx[r * w + j] = p[j] * (grow[j] - dot);
                }
            }
            dx
        }))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&self) -> Result<Tensor<F>> {
        let (rows, w) = self.dims2("log_softmax_rows")?;
        let mut out = vec![F::zero(); rows * w];
        let mut probs = vec![F::zero(); rows * w];
        for r in 0..rows {
            let row = &self.0.data[r * w..(r + 1) * w];
            let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for j in 0..w {
                z += (row[j] - mx).exp();
            }
            let lse = mx + z.ln();
            for j in 0..w {
                out[r * w + j] = row[j] - lse;
                probs[r * w + j] = (row[j] - lse).exp();
            }
        }
        Ok(self.unary(vec![rows, w], out, move |g| {
            let mut dx = vec![F::zero(); rows * w];
            for r in 0..rows {
                let grow = &g[r * w..(r + 1) * w];
                let mut gsum = F::zero();
                for j in 0..w {
                    gsum += grow[j];
                }
                for j in 0..w {
                    dx[r * w + j] = grow[j] - probs[r * w + j] * gsum;
                }
            }
            dx
        }))
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum_all(&self) -> Tensor<F> {
        let total = lit::<F>(sum_f64(&self.0.data));
        let n = self.numel();
        self.unary(vec![1], vec![total], move |g| vec![g[0]; n])
    }

    /// Mean of all elements, accumulated in `f64`.
    pub fn mean_all(&self) -> Tensor<F> {
        let n = self.numel();
        let total = lit::<F>(sum_f64(&self.0.data) / n as f64);
        let inv = lit::<F>(1.0 / n as f64);
        self.unary(vec![1], vec![total], move |g| vec![g[0] * inv; n])
    }

    /// Replace masked rows with a learnable row vector.
    pub fn replace_rows(&self, mask: &[bool], row: &Tensor<F>) -> Result<Tensor<F>> {
        let (rows, w) = self.dims2("replace_rows")?;
        if mask.len() != rows {
            return Err(Error::shape(
                "replace_rows",
                format!("mask length {} does not match {} rows", mask.len(), rows),
            ));
        }
        if row.shape() != [w] {
            return Err(Error::shape(
                "replace_rows",
                format!("row shape {:?} must be [{w}]", row.shape()),
            ));
        }
        let mut out = self.0.data.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out[r * w..(r + 1) * w].copy_from_slice(&row.0.data);
            }
        }
        let rg = self.requires_grad() || row.requires_grad();
        if !rg {
            return Tensor::constant(vec![rows, w], out);
        }
        let x = self.clone();
        let rv = row.clone();
        let mask_owned: Vec<bool> = mask.to_vec();
        let back: BackFn<F> = Box::new(move |g| {
            let dx = x.requires_grad().then(|| {
                let mut dx = g.to_vec();
                for (r, &m) in mask_owned.iter().enumerate() {
                    if m {
                        for v in &mut dx[r * w..(r + 1) * w] {
                            *v = F::zero();
                        }
                    }
                }
                dx
            });
            let drow = rv.requires_grad().then(|| {
                let mut dr = vec![F::zero(); w];
                for (r, &m) in mask_owned.iter().enumerate() {
                    if m {
                        for (acc, &gv) in dr.iter_mut().zip(&g[r * w..(r + 1) * w]) {
                            *acc += gv;
                        }
                    }
                }
                dr
            });
            vec![dx, drow]
        });
        Ok(Tensor::make(
            vec![rows, w],
            out,
            true,
            vec![self.clone(), row.clone()],
            Some(back),
        ))
    }

    /// Rearrange elements by an index map: `out[j] = self[map[j]]`.
    /// The map must cover the new shape; repeated sources accumulate in the
    /// backward scatter.
    pub fn reindex(&self, new_shape: impl Into<Vec<usize>>, map: Vec<usize>) -> Result<Tensor<F>> {
        let new_shape = new_shape.into();
        let numel: usize = new_shape.iter().product();
        if map.len() != numel {
            return Err(Error::shape(
                "reindex",
                format!("map length {} does not match shape {:?}", map.len(), new_shape),
            ));
        }
        let src_len = self.numel();
        if let Some(&bad) = map.iter().find(|&&s| s >= src_len) {
            return Err(Error::shape(
                "reindex",
                format!("map index {bad} out of bounds for {src_len} elements"),
            ));
        }
        let out: Vec<F> = map.iter().map(|&s| self.0.data[s]).collect();
        let map_owned = map;
        Ok(self.unary(new_shape, out, move |g| {
            let mut dx = vec![F::zero(); src_len];
            for (j, &s) in map_owned.iter().enumerate() {
                dx[s] += g[j];
            }
            dx
        }))
    }
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

fn accumulate<F: Scalar>(node: &Node<F>, contribution: &[F]) {
    let mut slot = node.grad.borrow_mut();
    match slot.as_mut() {
        Some(g) => {
            for (a, &c) in g.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution.to_vec()),
    }
}

impl<F: Scalar> Tensor<F> {
    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// reachable `requires_grad` tensor; calling backward again without
    /// clearing adds on top.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward on a tensor that does not require grad".into(),
            ));
        }
        // Iterative post-order DFS: parents precede children in `order`.
        let mut order: Vec<Tensor<F>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<F>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.0.id) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.0.parents {
                if p.requires_grad() && !visited.contains(&p.0.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        // Per-sweep gradient flow; persisted into the nodes only once at the
        // end so repeated backward calls accumulate instead of compounding.
        let mut flow: std::collections::HashMap<u64, Vec<F>> = std::collections::HashMap::new();
        flow.insert(self.0.id, vec![F::one()]);
        for t in order.iter().rev() {
            let Some(gout) = flow.get(&t.0.id).cloned() else { continue };
            let Some(back) = &t.0.backward else { continue };
            let parent_grads = back(&gout);
            debug_assert_eq!(parent_grads.len(), t.0.parents.len());
            for (p, pg) in t.0.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    debug_assert_eq!(pg.len(), p.numel());
                    match flow.get_mut(&p.0.id) {
                        Some(acc) => {
                            for (a, &c) in acc.iter_mut().zip(&pg) {
                                *a += c;
                            }
                        }
                        None => {
                            flow.insert(p.0.id, pg);
                        }
                    }
                }
            }
        }
        for t in &order {
            if let Some(g) = flow.get(&t.0.id) {
                accumulate(&t.0, g);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// host parameters and graph binding
// ---------------------------------------------------------------------------

/// Plain host-side value buffer backing a named model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct HostTensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> HostTensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Self {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), data.len());
        HostTensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        HostTensor {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Binds named host parameters to graph leaves for one forward/backward pass.
///
/// Each parameter name resolves to a single leaf per pass, so a parameter
/// used twice shares one gradient accumulator. Frozen bindings produce
/// constant leaves and are excluded from [`Binder::grads`].
pub struct Binder<F: Scalar> {
    leaves: RefCell<BTreeMap<String, Tensor<F>>>,
    trainable: bool,
}

impl<F: Scalar> Binder<F> {
    /// Binder whose bindings participate in gradients.
    pub fn trainable() -> Self {
        Binder {
            leaves: RefCell::new(BTreeMap::new()),
            trainable: true,
        }
    }

    /// Binder for frozen evaluation; every leaf is a constant.
    pub fn frozen() -> Self {
        Binder {
            leaves: RefCell::new(BTreeMap::new()),
            trainable: false,
        }
    }

    pub fn bind(&self, name: &str, p: &HostTensor<F>) -> Tensor<F> {
        if let Some(t) = self.leaves.borrow().get(name) {
            return t.clone();
        }
        let t = Tensor::from_vec(p.shape.clone(), p.data.clone(), self.trainable)
            .expect("host tensor shape is consistent");
        self.leaves.borrow_mut().insert(name.to_string(), t.clone());
        t
    }

    /// Drain accumulated gradients, keyed by parameter name. Parameters whose
    /// leaves never received gradient are absent.
    pub fn grads(&self) -> BTreeMap<String, Vec<F>> {
        let mut out = BTreeMap::new();
        for (name, leaf) in self.leaves.borrow().iter() {
            if let Some(g) = leaf.take_grad() {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64], rg: bool) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec(), rg).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_oracle() {
        let ident = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0], false);
        let x = t(&[2, 2], &[3.0, -1.0, 2.5, 4.0], false);
        let y = ident.matmul(&x).unwrap();
        assert_eq!(y.data(), x.data());

        // Hand matrix-multiply oracle: B[2x1] · A[1x2].
        let b = t(&[2, 1], &[3.0, 4.0], false);
        let a = t(&[1, 2], &[1.0, 2.0], false);
        let ba = b.matmul(&a).unwrap();
        assert_eq!(ba.data(), &[3.0, 6.0, 4.0, 8.0]);

        let zeros = Tensor::<f64>::zeros(vec![2, 3]);
        let x34 = t(&[3, 4], &(0..12).map(|i| i as f64).collect::<Vec<_>>(), false);
        let z = zeros.matmul(&x34).unwrap();
        assert_eq!(z.shape(), &[2, 4]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2×3") && err.contains("4×2"), "{err}");
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let x = t(&[3], &[1.0, 2.0, 3.0], true);
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);

        let x = t(&[2], &[1.0, 2.0], true);
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = t(&[2], &[1.0, 2.0], true);
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = t(&[2], &[1.0, 2.0], true);
        let loss = x.sum_all();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_does_not_mutate_activations() {
        let x = t(&[2, 2], &[0.3, -0.7, 1.2, 0.05], true);
        let h = x.gelu();
        let before = h.data().to_vec();
        h.mul(&h).unwrap().sum_all().backward().unwrap();
        assert_eq!(h.data(), &before[..]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[2, 3], &[0.1, 2.0, -1.0, 5.0, 5.0, 5.0], false);
        let p = x.softmax_rows().unwrap();
        for r in 0..2 {
            let s: f64 = p.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    /// Central finite differences on a small composite expression.
    #[test]
    fn finite_difference_two_layer_net() {
        let w1v = [0.2, -0.4, 0.7, 0.1, -0.3, 0.5];
        let w2v = [0.6, -0.2, 0.3];
        let xv = [0.9, -1.1];
        let eval = |w1: &[f64], w2: &[f64]| -> f64 {
            let x = t(&[1, 2], &xv, false);
            let w1 = t(&[3, 2], w1, true);
            let w2 = t(&[1, 3], w2, true);
            let h = x.linear(&w1, None).unwrap().gelu();
            let y = h.linear(&w2, None).unwrap();
            y.sum_all().item()
        };
        // analytic
        let x = t(&[1, 2], &xv, false);
        let w1 = t(&[3, 2], &w1v, true);
        let w2 = t(&[1, 3], &w2v, true);
        let h = x.linear(&w1, None).unwrap().gelu();
        let y = h.linear(&w2, None).unwrap();
        y.sum_all().backward().unwrap();
        let g1 = w1.grad().unwrap();
        let g2 = w2.grad().unwrap();
        let h_step = 1e-3;
        for i in 0..6 {
            let mut plus = w1v;
            plus[i] += h_step;
            let mut minus = w1v;
            minus[i] -= h_step;
            let fd = (eval(&plus, &w2v) - eval(&minus, &w2v)) / (2.0 * h_step);
            let denom = fd.abs().max(g1[i].abs()).max(1e-3);
            assert!((fd - g1[i]).abs() / denom < 1e-3, "w1[{i}]: fd={fd} ad={}", g1[i]);
        }
        for i in 0..3 {
            let mut plus = w2v;
            plus[i] += h_step;
            let mut minus = w2v;
            minus[i] -= h_step;
            let fd = (eval(&w1v, &plus) - eval(&w1v, &minus)) / (2.0 * h_step);
            let denom = fd.abs().max(g2[i].abs()).max(1e-3);
            assert!((fd - g2[i]).abs() / denom < 1e-3, "w2[{i}]: fd={fd} ad={}", g2[i]);
        }
    }

    #[test]
    fn reindex_round_trip_gradient() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0], true);
        let y = x.reindex(vec![4], vec![3, 2, 1, 0]).unwrap();
        assert_eq!(y.data(), &[4.0, 3.0, 2.0, 1.0]);
        let w = t(&[4], &[1.0, 10.0, 100.0, 1000.0], false);
        y.mul(&w).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1000.0, 100.0, 10.0, 1.0]);
    }

    #[test]
    fn replace_rows_masks_gradient_flow() {
        let x = t(&[3, 2], &[1.0; 6], true);
        let row = t(&[2], &[5.0, 6.0], true);
        let y = x.replace_rows(&[false, true, false], &row).unwrap();
        assert_eq!(&y.data()[2..4], &[5.0, 6.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(row.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn binder_reuses_leaves_and_reports_grads() {
        let p = HostTensor::new(vec![2], vec![1.5f64, -0.5]);
        let binder = Binder::trainable();
        let a = binder.bind("w", &p);
        let b = binder.bind("w", &p);
        assert_eq!(a.0.id, b.0.id);
        a.mul(&b).unwrap().sum_all().backward().unwrap();
        let grads = binder.grads();
        // d/dw of sum(w*w) with shared leaf = 2w.
        assert_eq!(grads["w"], vec![3.0, -1.0]);
    }
}
