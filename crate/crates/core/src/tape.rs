//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding the
//! computed value plus, per input, a closure mapping the output gradient to
//! that input's gradient contribution. [`Tape::backward`] walks the node list
//! in reverse and accumulates gradients for every node, so callers can read
//! gradients for any leaf they kept a [`Var`] handle to.
//!
//! All values are `f64`: the gradient suite compares analytic gradients
//! against central finite differences at tolerances that single precision
//! cannot meet. The tape is intended for one forward/backward round and is
//! dropped afterwards; it is not `Sync` and each thread builds its own.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{concatenate, Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&ArrayD<f64>) -> ArrayD<f64>>;

struct Node {
    value: Rc<ArrayD<f64>>,
    deps: Vec<(usize, BackFn)>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape if `v` never received one.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: ArrayD<f64>, deps: Vec<(usize, BackFn)>) -> Var {
        self.push_rc(Rc::new(value), deps)
    }

    fn push_rc(&self, value: Rc<ArrayD<f64>>, deps: Vec<(usize, BackFn)>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, deps });
        Var(nodes.len() - 1)
    }

    fn rc(&self, v: Var) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    /// Current value of a node (cheap; shares the underlying buffer).
    pub fn value(&self, v: Var) -> Rc<ArrayD<f64>> {
        self.rc(v)
    }

    /// Value of a scalar (single-element) node.
    pub fn scalar_of(&self, v: Var) -> f64 {
        let val = self.rc(v);
        debug_assert_eq!(val.len(), 1, "scalar_of on non-scalar node");
        val.iter().next().copied().unwrap()
    }

    // ---- leaves ------------------------------------------------------------

    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![])
    }

    pub fn leaf1(&self, value: Array1<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf2(&self, value: Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = &*va + &*vb;
        self.push(
            out,
            vec![
                (a.0, Box::new(|g: &ArrayD<f64>| g.clone())),
                (b.0, Box::new(|g: &ArrayD<f64>| g.clone())),
            ],
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = &*va - &*vb;
        self.push(
            out,
            vec![
                (a.0, Box::new(|g: &ArrayD<f64>| g.clone())),
                (b.0, Box::new(|g: &ArrayD<f64>| -g)),
            ],
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = &*va * &*vb;
        let (ca, cb) = (Rc::clone(&va), Rc::clone(&vb));
        self.push(
            out,
            vec![
                (a.0, Box::new(move |g: &ArrayD<f64>| g * &*cb)),
                (b.0, Box::new(move |g: &ArrayD<f64>| g * &*ca)),
            ],
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        assert_eq!(va.shape(), vb.shape(), "div: shape mismatch");
        let out = &*va / &*vb;
        let (ca, cb) = (Rc::clone(&va), Rc::clone(&vb));
        let cb2 = Rc::clone(&vb);
        self.push(
            out,
            vec![
                (a.0, Box::new(move |g: &ArrayD<f64>| g / &*cb)),
                (
                    b.0,
                    Box::new(move |g: &ArrayD<f64>| -(g * &*ca) / (&*cb2 * &*cb2)),
                ),
            ],
        )
    }

    /// Elementwise `k*x + c` with scalar constants.
    pub fn affine(&self, x: Var, k: f64, c: f64) -> Var {
        let vx = self.rc(x);
        let out = vx.mapv(|v| k * v + c);
        self.push(out, vec![(x.0, Box::new(move |g: &ArrayD<f64>| g * k))])
    }

    pub fn neg(&self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    /// Elementwise multiplication by a constant array (no gradient to the mask).
    pub fn mul_constv(&self, x: Var, mask: &ArrayD<f64>) -> Var {
        let vx = self.rc(x);
        assert_eq!(vx.shape(), mask.shape(), "mul_constv: shape mismatch");
        let out = &*vx * mask;
        let m = mask.clone();
        self.push(out, vec![(x.0, Box::new(move |g: &ArrayD<f64>| g * &m))])
    }

    pub fn relu(&self, x: Var) -> Var {
        let vx = self.rc(x);
        let out = vx.mapv(|v| v.max(0.0));
        let c = Rc::clone(&vx);
        self.push(
            out,
            vec![(
                x.0,
                // Subgradient 0 at the kink.
                Box::new(move |g: &ArrayD<f64>| {
                    let mut dg = g.clone();
                    dg.zip_mut_with(&c, |gi, &xi| {
                        if xi <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                    dg
                }),
            )],
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let vx = self.rc(x);
        let out = Rc::new(vx.mapv(stable_sigmoid));
        let c = Rc::clone(&out);
        self.push_rc(
            out,
            vec![(
                x.0,
                Box::new(move |g: &ArrayD<f64>| {
                    let mut dg = g.clone();
                    dg.zip_mut_with(&c, |gi, &s| *gi *= s * (1.0 - s));
                    dg
                }),
            )],
        )
    }

    pub fn tanh(&self, x: Var) -> Var {
        let vx = self.rc(x);
        let out = Rc::new(vx.mapv(f64::tanh));
        let c = Rc::clone(&out);
        self.push_rc(
            out,
            vec![(
                x.0,
                Box::new(move |g: &ArrayD<f64>| {
                    let mut dg = g.clone();
                    dg.zip_mut_with(&c, |gi, &t| *gi *= 1.0 - t * t);
                    dg
                }),
            )],
        )
    }

    pub fn exp(&self, x: Var) -> Var {
        let vx = self.rc(x);
        let out = Rc::new(vx.mapv(f64::exp));
        let c = Rc::clone(&out);
        self.push_rc(out, vec![(x.0, Box::new(move |g: &ArrayD<f64>| g * &*c))])
    }

    pub fn sqrt(&self, x: Var) -> Var {
        let vx = self.rc(x);
        let out = Rc::new(vx.mapv(f64::sqrt));
        let c = Rc::clone(&out);
        self.push_rc(
            out,
            vec![(
                x.0,
                Box::new(move |g: &ArrayD<f64>| {
                    let mut dg = g.clone();
                    dg.zip_mut_with(&c, |gi, &s| *gi *= 0.5 / s);
                    dg
                }),
            )],
        )
    }

    pub fn square(&self, x: Var) -> Var {
        let vx = self.rc(x);
        let out = vx.mapv(|v| v * v);
        let c = Rc::clone(&vx);
        self.push(
            out,
            vec![(
                x.0,
                Box::new(move |g: &ArrayD<f64>| {
                    let mut dg = g.clone();
                    dg.zip_mut_with(&c, |gi, &xi| *gi *= 2.0 * xi);
                    dg
                }),
            )],
        )
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum(&self, x: Var) -> Var {
        let vx = self.rc(x);
        let out = ArrayD::from_elem(IxDyn(&[]), vx.sum());
        let shape: Vec<usize> = vx.shape().to_vec();
        self.push(
            out,
            vec![(
                x.0,
                Box::new(move |g: &ArrayD<f64>| {
                    ArrayD::from_elem(IxDyn(&shape), g.iter().next().copied().unwrap())
                }),
            )],
        )
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.rc(x).len();
        let s = self.sum(x);
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    /// Column means of a 2-D node (output is 1-D of length `k`).
    pub fn mean_axis0(&self, x: Var) -> Var {
        let vx = self.rc(x);
        let m2 = as2(&vx);
        let n = m2.nrows();
        assert!(n > 0, "mean_axis0: empty input");
        let out = m2.mean_axis(Axis(0)).unwrap().into_dyn();
        self.push(
            out,
            vec![(
                x.0,
                Box::new(move |g: &ArrayD<f64>| {
                    let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                    let mut dg = Array2::zeros((n, g1.len()));
                    for mut row in dg.rows_mut() {
                        row.assign(&(&g1 / n as f64));
                    }
                    dg.into_dyn()
                }),
            )],
        )
    }

    // ---- linear algebra ------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.rc(a), self.rc(b));
        let (ma, mb) = (as2(&va), as2(&vb));
        assert_eq!(ma.ncols(), mb.nrows(), "matmul: inner dim mismatch");
        let out = ma.dot(&mb).into_dyn();
        let (ca, cb) = (Rc::clone(&va), Rc::clone(&vb));
        self.push(
            out,
            vec![
                (
                    a.0,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                        g2.dot(&as2(&cb).t()).into_dyn()
                    }),
                ),
                (
                    b.0,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                        as2(&ca).t().dot(&g2).into_dyn()
                    }),
                ),
            ],
        )
    }

    /// `m · v` for a 2-D `m` (L×d) and 1-D `v` (d); output is 1-D (L).
    pub fn matvec(&self, m: Var, v: Var) -> Var {
        let (vm, vv) = (self.rc(m), self.rc(v));
        let (m2, v1) = (as2(&vm), as1(&vv));
        assert_eq!(m2.ncols(), v1.len(), "matvec: dim mismatch");
        let out = m2.dot(&v1).into_dyn();
        let (cm, cv) = (Rc::clone(&vm), Rc::clone(&vv));
        self.push(
            out,
            vec![
                (
                    m.0,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g1 = as1(g);
                        let v1 = as1(&cv);
                        let mut dm = Array2::zeros((g1.len(), v1.len()));
                        for (i, gi) in g1.iter().enumerate() {
                            dm.row_mut(i).assign(&(&v1 * *gi));
                        }
                        dm.into_dyn()
                    }),
                ),
                (
                    v.0,
                    Box::new(move |g: &ArrayD<f64>| as2(&cm).t().dot(&as1(g)).into_dyn()),
                ),
            ],
        )
    }

    pub fn transpose2(&self, x: Var) -> Var {
        let vx = self.rc(x);
        let out = as2(&vx).t().to_owned().into_dyn();
        self.push(
            out,
            vec![(
                x.0,
                Box::new(|g: &ArrayD<f64>| {
                    g.view()
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .t()
                        .to_owned()
                        .into_dyn()
                }),
            )],
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let vx = self.rc(x);
        assert_eq!(
            vx.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let out = vx
            .as_standard_layout()
            .to_owned()
            .into_shape(IxDyn(shape))
            .unwrap();
        let orig: Vec<usize> = vx.shape().to_vec();
        self.push(
            out,
            vec![(
                x.0,
                Box::new(move |g: &ArrayD<f64>| {
                    g.as_standard_layout()
                        .to_owned()
                        .into_shape(IxDyn(&orig))
                        .unwrap()
                }),
            )],
        )
    }

    /// Broadcast a 1-D vector to `n` identical rows.
    pub fn broadcast_row(&self, v: Var, n: usize) -> Var {
        let vv = self.rc(v);
        let v1 = as1(&vv);
        let k = v1.len();
        let mut out = Array2::zeros((n, k));
        for mut row in out.rows_mut() {
            row.assign(&v1);
        }
        self.push(
            out.into_dyn(),
            vec![(
                v.0,
                Box::new(|g: &ArrayD<f64>| {
                    g.view()
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .sum_axis(Axis(0))
                        .into_dyn()
                }),
            )],
        )
    }

    /// Add a 1-D bias vector to every row of a 2-D node.
    pub fn add_row(&self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.rc(x), self.rc(bias));
        let m2 = as2(&vx);
        let b1 = as1(&vb);
        assert_eq!(m2.ncols(), b1.len(), "add_row: dim mismatch");
        let out = (&m2 + &b1).into_dyn();
        self.push(
            out,
            vec![
                (x.0, Box::new(|g: &ArrayD<f64>| g.clone())),
                (
                    bias.0,
                    Box::new(|g: &ArrayD<f64>| {
                        g.view()
                            .into_dimensionality::<Ix2>()
                            .unwrap()
                            .sum_axis(Axis(0))
                            .into_dyn()
                    }),
                ),
            ],
        )
    }

    /// 2-D × 2-D affine layer: `x·w + b` broadcast over rows.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    // ---- structure -----------------------------------------------------------

    /// Concatenate 2-D nodes along rows.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Rc<ArrayD<f64>>> = parts.iter().map(|p| self.rc(*p)).collect();
        let views: Vec<_> = vals
            .iter()
            .map(|v| v.view().into_dimensionality::<Ix2>().unwrap())
            .collect();
        let out = concatenate(Axis(0), &views).unwrap().into_dyn();
        let mut deps: Vec<(usize, BackFn)> = Vec::with_capacity(parts.len());
        let mut offset = 0usize;
        for (p, v) in parts.iter().zip(&vals) {
            let rows = as2(v).nrows();
            let start = offset;
            deps.push((
                p.0,
                Box::new(move |g: &ArrayD<f64>| {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    g2.slice(ndarray::s![start..start + rows, ..])
                        .to_owned()
                        .into_dyn()
                }),
            ));
            offset += rows;
        }
        self.push(out, deps)
    }

    /// Concatenate 2-D nodes along columns (all must share the row count).
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Rc<ArrayD<f64>>> = parts.iter().map(|p| self.rc(*p)).collect();
        let views: Vec<_> = vals
            .iter()
            .map(|v| v.view().into_dimensionality::<Ix2>().unwrap())
            .collect();
        let out = concatenate(Axis(1), &views).unwrap().into_dyn();
        let mut deps: Vec<(usize, BackFn)> = Vec::with_capacity(parts.len());
        let mut offset = 0usize;
        for (p, v) in parts.iter().zip(&vals) {
            let cols = as2(v).ncols();
            let start = offset;
            deps.push((
                p.0,
                Box::new(move |g: &ArrayD<f64>| {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    g2.slice(ndarray::s![.., start..start + cols])
                        .to_owned()
                        .into_dyn()
                }),
            ));
            offset += cols;
        }
        self.push(out, deps)
    }

    /// Concatenate 1-D nodes into one 1-D node.
    pub fn concat1(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Rc<ArrayD<f64>>> = parts.iter().map(|p| self.rc(*p)).collect();
        let views: Vec<_> = vals
            .iter()
            .map(|v| v.view().into_dimensionality::<Ix1>().unwrap())
            .collect();
        let out = concatenate(Axis(0), &views).unwrap().into_dyn();
        let mut deps: Vec<(usize, BackFn)> = Vec::with_capacity(parts.len());
        let mut offset = 0usize;
        for (p, v) in parts.iter().zip(&vals) {
            let len = v.len();
            let start = offset;
            deps.push((
                p.0,
                Box::new(move |g: &ArrayD<f64>| {
                    as1(g).slice(ndarray::s![start..start + len]).to_owned().into_dyn()
                }),
            ));
            offset += len;
        }
        self.push(out, deps)
    }

    /// Stack 1-D nodes of equal length into a 2-D node, one row each.
    pub fn stack_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Rc<ArrayD<f64>>> = parts.iter().map(|p| self.rc(*p)).collect();
        let k = vals[0].len();
        let mut out = Array2::zeros((parts.len(), k));
        for (i, v) in vals.iter().enumerate() {
            out.row_mut(i).assign(&as1(v));
        }
        let deps: Vec<(usize, BackFn)> = parts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let row = i;
                (
                    p.0,
                    Box::new(move |g: &ArrayD<f64>| {
                        g.view()
                            .into_dimensionality::<Ix2>()
                            .unwrap()
                            .row(row)
                            .to_owned()
                            .into_dyn()
                    }) as BackFn,
                )
            })
            .collect();
        self.push(out.into_dyn(), deps)
    }

    /// Gather rows of a 2-D node by index (repeats allowed).
    pub fn select_rows(&self, x: Var, idx: &[usize]) -> Var {
        let vx = self.rc(x);
        let m2 = as2(&vx);
        let (n, k) = (m2.nrows(), m2.ncols());
        let mut out = Array2::zeros((idx.len(), k));
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < n, "select_rows: index out of range");
            out.row_mut(r).assign(&m2.row(i));
        }
        let idx = idx.to_vec();
        self.push(
            out.into_dyn(),
            vec![(
                x.0,
                Box::new(move |g: &ArrayD<f64>| {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dx = Array2::zeros((n, k));
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = dx.row_mut(i);
                        row += &g2.row(r);
                    }
                    dx.into_dyn()
                }),
            )],
        )
    }

    /// Single row of a 2-D node as a 1-D node.
    pub fn row1(&self, x: Var, i: usize) -> Var {
        let vx = self.rc(x);
        let m2 = as2(&vx);
        let (n, k) = (m2.nrows(), m2.ncols());
        assert!(i < n, "row1: index out of range");
        let out = m2.row(i).to_owned().into_dyn();
        self.push(
            out,
            vec![(
                x.0,
                Box::new(move |g: &ArrayD<f64>| {
                    let mut dx = Array2::zeros((n, k));
                    dx.row_mut(i).assign(&as1(g));
                    dx.into_dyn()
                }),
            )],
        )
    }

    /// Contiguous row slice `[start, end)` of a 2-D node.
    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Var {
        let vx = self.rc(x);
        let m2 = as2(&vx);
        let (n, k) = (m2.nrows(), m2.ncols());
        assert!(start <= end && end <= n, "slice_rows: bad range");
        let out = m2.slice(ndarray::s![start..end, ..]).to_owned().into_dyn();
        self.push(
            out,
            vec![(
                x.0,
                Box::new(move |g: &ArrayD<f64>| {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dx = Array2::zeros((n, k));
                    dx.slice_mut(ndarray::s![start..end, ..]).assign(&g2);
                    dx.into_dyn()
                }),
            )],
        )
    }

    // ---- activations over distributions ---------------------------------------

    /// Softmax of a 1-D node.
    pub fn softmax1(&self, x: Var) -> Var {
        let vx = self.rc(x);
        let x1 = as1(&vx);
        let max = x1.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps = x1.mapv(|v| (v - max).exp());
        let z = exps.sum();
        let out = Rc::new((exps / z).into_dyn());
        let c = Rc::clone(&out);
        self.push_rc(
            out,
            vec![(
                x.0,
                Box::new(move |g: &ArrayD<f64>| {
                    let s = as1(&c);
                    let g1 = as1(g);
                    let dot = s.dot(&g1);
                    ((&g1 - dot) * &s).into_dyn()
                }),
            )],
        )
    }

    // ---- loss heads -----------------------------------------------------------

    /// Mean softmax cross entropy over rows of `logits` against target indices.
    pub fn softmax_ce_rows(&self, logits: Var, targets: &[usize]) -> Var {
        let vx = self.rc(logits);
        let m2 = as2(&vx);
        let b = m2.nrows();
        assert_eq!(b, targets.len(), "softmax_ce_rows: target count mismatch");
        let mut probs = Array2::zeros((b, m2.ncols()));
        let mut loss = 0.0;
        for (i, row) in m2.rows().into_iter().enumerate() {
            assert!(targets[i] < m2.ncols(), "softmax_ce_rows: target out of range");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps = row.mapv(|v| (v - max).exp());
            let z = exps.sum();
            loss += z.ln() + max - row[targets[i]];
            probs.row_mut(i).assign(&(exps / z));
        }
        let out = ArrayD::from_elem(IxDyn(&[]), loss / b as f64);
        let targets = targets.to_vec();
        self.push(
            out,
            vec![(
                logits.0,
                Box::new(move |g: &ArrayD<f64>| {
                    let gs = g.iter().next().copied().unwrap() / b as f64;
                    let mut dx = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        dx[(i, t)] -= 1.0;
                    }
                    (dx * gs).into_dyn()
                }),
            )],
        )
    }

    /// Masked binary cross entropy with logits, averaged over the mask support.
    /// Positive targets are weighted by `pos_weight`.
    pub fn bce_logits(&self, logits: Var, targets: &ArrayD<f64>, mask: &ArrayD<f64>, pos_weight: f64) -> Var {
        let vx = self.rc(logits);
        assert_eq!(vx.shape(), targets.shape(), "bce_logits: target shape mismatch");
        assert_eq!(vx.shape(), mask.shape(), "bce_logits: mask shape mismatch");
        let denom = mask.sum().max(1.0);
        let mut loss = 0.0;
        for ((&x, &t), &m) in vx.iter().zip(targets.iter()).zip(mask.iter()) {
            if m != 0.0 {
                // -[w·t·ln σ(x) + (1-t)·ln(1-σ(x))], written in softplus form.
                loss += m * ((1.0 - t) * x + (pos_weight * t + 1.0 - t) * softplus(-x));
            }
        }
        let out = ArrayD::from_elem(IxDyn(&[]), loss / denom);
        let (t, m) = (targets.clone(), mask.clone());
        let c = Rc::clone(&vx);
        self.push(
            out,
            vec![(
                logits.0,
                Box::new(move |g: &ArrayD<f64>| {
                    let gs = g.iter().next().copied().unwrap() / denom;
                    let mut dx = ArrayD::zeros(c.raw_dim());
                    for (((d, &x), &t), &m) in
                        dx.iter_mut().zip(c.iter()).zip(t.iter()).zip(m.iter())
                    {
                        if m != 0.0 {
                            let w = pos_weight * t + 1.0 - t;
                            *d = gs * m * ((1.0 - t) - w * stable_sigmoid(-x));
                        }
                    }
                    dx
                }),
            )],
        )
    }

    /// Masked mean absolute error against a constant target.
    /// Subgradient 0 where the difference is exactly zero.
    pub fn l1_masked(&self, pred: Var, target: &ArrayD<f64>, mask: &ArrayD<f64>) -> Var {
        let vx = self.rc(pred);
        assert_eq!(vx.shape(), target.shape(), "l1_masked: target shape mismatch");
        assert_eq!(vx.shape(), mask.shape(), "l1_masked: mask shape mismatch");
        let denom = mask.sum().max(1.0);
        let mut loss = 0.0;
        for ((&x, &t), &m) in vx.iter().zip(target.iter()).zip(mask.iter()) {
            loss += m * (x - t).abs();
        }
        let out = ArrayD::from_elem(IxDyn(&[]), loss / denom);
        let (t, m) = (target.clone(), mask.clone());
        let c = Rc::clone(&vx);
        self.push(
            out,
            vec![(
                pred.0,
                Box::new(move |g: &ArrayD<f64>| {
                    let gs = g.iter().next().copied().unwrap() / denom;
                    let mut dx = ArrayD::zeros(c.raw_dim());
                    for (((d, &x), &t), &m) in
                        dx.iter_mut().zip(c.iter()).zip(t.iter()).zip(m.iter())
                    {
                        let diff = x - t;
                        *d = gs * m * if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
                    }
                    dx
                }),
            )],
        )
    }

    // ---- domain-specific nodes --------------------------------------------------

    /// Length-normalized Gram matrix of a T×d feature sequence: `FᵀF / T`.
    pub fn gram(&self, f: Var) -> Var {
        let vf = self.rc(f);
        let m2 = as2(&vf);
        let t = m2.nrows();
        assert!(t >= 1, "gram: empty input");
        let out = (m2.t().dot(&m2) / t as f64).into_dyn();
        let c = Rc::clone(&vf);
        self.push(
            out,
            vec![(
                f.0,
                Box::new(move |g: &ArrayD<f64>| {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let f2 = as2(&c);
                    let sym = &g2 + &g2.t();
                    (f2.dot(&sym) / t as f64).into_dyn()
                }),
            )],
        )
    }

    /// Gradient reversal: identity forward, gradient multiplied by `-scale`.
    pub fn grl(&self, x: Var, scale: f64) -> Var {
        let vx = self.rc(x);
        self.push_rc(
            vx,
            vec![(x.0, Box::new(move |g: &ArrayD<f64>| g * (-scale)))],
        )
    }

    /// Straight-through estimator: the forward value is `replacement`, the
    /// backward pass copies the output gradient to `x` unchanged.
    pub fn straight_through(&self, x: Var, replacement: ArrayD<f64>) -> Var {
        let vx = self.rc(x);
        assert_eq!(vx.shape(), replacement.shape(), "straight_through: shape mismatch");
        self.push(replacement, vec![(x.0, Box::new(|g: &ArrayD<f64>| g.clone()))])
    }

    /// Re-enter a value as a constant leaf (stop-gradient).
    pub fn stop_gradient(&self, x: Var) -> Var {
        let vx = self.rc(x);
        self.push_rc(vx, vec![])
    }

    // ---- stacked 2-D convolution -------------------------------------------------

    /// 2-D convolution of a C_in×H×W input with C_out×C_in×kh×kw weights,
    /// zero padding and per-output-channel bias.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Var {
        let (vx, vw, vb) = (self.rc(x), self.rc(w), self.rc(b));
        let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
        let w4 = vw.view().into_dimensionality::<Ix4>().unwrap();
        let b1 = as1(&vb);
        let (c_in, h, wd) = x3.dim();
        let (c_out, c_in_w, kh, kw) = w4.dim();
        assert_eq!(c_in, c_in_w, "conv2d: channel mismatch");
        assert_eq!(c_out, b1.len(), "conv2d: bias mismatch");
        let (sh, sw) = stride;
        let (ph, pw) = pad;
        let oh = (h + 2 * ph).saturating_sub(kh) / sh + 1;
        let ow = (wd + 2 * pw).saturating_sub(kw) / sw + 1;

        let mut out = ndarray::Array3::<f64>::zeros((c_out, oh, ow));
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b1[co];
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix < 0 || ix as usize >= wd {
                                    continue;
                                }
                                acc += x3[(ci, iy as usize, ix as usize)] * w4[(co, ci, ky, kx)];
                            }
                        }
                    }
                    out[(co, oy, ox)] = acc;
                }
            }
        }

        let (cx, cw) = (Rc::clone(&vx), Rc::clone(&vw));
        self.push(
            out.into_dyn(),
            vec![
                (
                    x.0,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                        let w4 = cw.view().into_dimensionality::<Ix4>().unwrap();
                        let mut dx = ndarray::Array3::<f64>::zeros((c_in, h, wd));
                        for co in 0..c_out {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let go = g3[(co, oy, ox)];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c_in {
                                        for ky in 0..kh {
                                            let iy = (oy * sh + ky) as isize - ph as isize;
                                            if iy < 0 || iy as usize >= h {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix = (ox * sw + kx) as isize - pw as isize;
                                                if ix < 0 || ix as usize >= wd {
                                                    continue;
                                                }
                                                dx[(ci, iy as usize, ix as usize)] +=
                                                    go * w4[(co, ci, ky, kx)];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        dx.into_dyn()
                    }),
                ),
                (
                    w.0,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                        let x3 = cx.view().into_dimensionality::<Ix3>().unwrap();
                        let mut dw = ndarray::Array4::<f64>::zeros((c_out, c_in, kh, kw));
                        for co in 0..c_out {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let go = g3[(co, oy, ox)];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c_in {
                                        for ky in 0..kh {
                                            let iy = (oy * sh + ky) as isize - ph as isize;
                                            if iy < 0 || iy as usize >= h {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix = (ox * sw + kx) as isize - pw as isize;
                                                if ix < 0 || ix as usize >= wd {
                                                    continue;
                                                }
                                                dw[(co, ci, ky, kx)] +=
                                                    go * x3[(ci, iy as usize, ix as usize)];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        dw.into_dyn()
                    }),
                ),
                (
                    b.0,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                        let mut db = Array1::<f64>::zeros(c_out);
                        for co in 0..c_out {
                            db[co] = g3.index_axis(Axis(0), co).sum();
                        }
                        db.into_dyn()
                    }),
                ),
            ],
        )
    }

    /// Global average pool of a C×H×W node over H and W; output is 1-D (C).
    pub fn mean_hw(&self, x: Var) -> Var {
        let vx = self.rc(x);
        let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = x3.dim();
        let mut out = Array1::<f64>::zeros(c);
        for ci in 0..c {
            out[ci] = x3.index_axis(Axis(0), ci).mean().unwrap();
        }
        self.push(
            out.into_dyn(),
            vec![(
                x.0,
                Box::new(move |g: &ArrayD<f64>| {
                    let g1 = as1(g);
                    let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                    let denom = (h * w) as f64;
                    for ci in 0..c {
                        dx.index_axis_mut(Axis(0), ci).fill(g1[ci] / denom);
                    }
                    dx.into_dyn()
                }),
            )],
        )
    }

    /// Scale each channel of a C×H×W node by a 1-D gate (C).
    pub fn mul_channels(&self, x: Var, gate: Var) -> Var {
        let (vx, vg) = (self.rc(x), self.rc(gate));
        let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
        let g1 = as1(&vg);
        let c = x3.dim().0;
        assert_eq!(c, g1.len(), "mul_channels: gate mismatch");
        let mut out = x3.to_owned();
        for ci in 0..c {
            out.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v * g1[ci]);
        }
        let (cx, cg) = (Rc::clone(&vx), Rc::clone(&vg));
        self.push(
            out.into_dyn(),
            vec![
                (
                    x.0,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                        let gate = as1(&cg);
                        let mut dx = g3.to_owned();
                        for ci in 0..c {
                            dx.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v * gate[ci]);
                        }
                        dx.into_dyn()
                    }),
                ),
                (
                    gate.0,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                        let x3 = cx.view().into_dimensionality::<Ix3>().unwrap();
                        let mut dg = Array1::<f64>::zeros(c);
                        for ci in 0..c {
                            dg[ci] = (&g3.index_axis(Axis(0), ci) * &x3.index_axis(Axis(0), ci)).sum();
                        }
                        dg.into_dyn()
                    }),
                ),
            ],
        )
    }

    /// Rearrange a C×T×F node into a T×(C·F) matrix (one row per time frame).
    pub fn time_major(&self, x: Var) -> Var {
        let vx = self.rc(x);
        let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
        let (c, t, f) = x3.dim();
        let out = x3
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .to_owned()
            .into_shape((t, c * f))
            .unwrap()
            .into_dyn();
        self.push(
            out,
            vec![(
                x.0,
                Box::new(move |g: &ArrayD<f64>| {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let g3 = g2.to_owned().into_shape((t, c, f)).unwrap();
                    g3.permuted_axes([1, 0, 2])
                        .as_standard_layout()
                        .to_owned()
                        .into_dyn()
                }),
            )],
        )
    }

    // ---- backward --------------------------------------------------------------

    /// Accumulate gradients of a scalar node with respect to every node on the
    /// tape created before it.
    pub fn backward(&self, loss: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert!(
            nodes[loss.0].value.len() == 1,
            "backward: loss must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(nodes[loss.0].value.raw_dim(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            for (parent, back) in &nodes[i].deps {
                let contrib = back(&g);
                match &mut grads[*parent] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }
}

fn as1(v: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    v.view().into_dimensionality::<Ix1>().unwrap()
}

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().unwrap()
}
