//! Reverse-mode automatic differentiation over dynamically shaped f64 arrays.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s; `backward`
//! replays the recording in reverse to produce gradients. Values are stored
//! in `Rc` so that backward closures can capture inputs without copying.
//!
//! The op set is exactly what the networks and losses in this crate need:
//! elementwise arithmetic, dense matmul, 3x3/1x1 convolution, nearest
//! upsampling, group normalization, SiLU, embedding lookup and a fused
//! weighted softmax cross-entropy over label maps.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

pub type Arr = ArrayD<f64>;

type GradFn = Box<dyn Fn(&Arr) -> Arr>;

struct Node {
    value: Rc<Arr>,
    parents: Vec<(usize, GradFn)>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    pub id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// A tape that stores values but no backward closures. Use for inference.
    pub fn no_grad() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Arr) -> Var<'_> {
        self.push(value, Vec::new())
    }

    fn push(&self, value: Arr, parents: Vec<(usize, GradFn)>) -> Var<'_> {
        let parents = if self.grad_enabled { parents } else { Vec::new() };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), parents });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Arr> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Gradients of a scalar-valued `root` with respect to every node.
    /// Entries are `None` for nodes the root does not depend on.
    pub fn backward(&self, root: Var<'_>) -> Vec<Option<Arr>> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward root must be a scalar, got shape {:?}",
            nodes[root.id].value.shape()
        );
        let mut grads: Vec<Option<Arr>> = vec![None; nodes.len()];
        grads[root.id] = Some(Arr::ones(nodes[root.id].value.raw_dim()));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            for (pid, f) in &nodes[id].parents {
                let pg = f(&g);
                match &mut grads[*pid] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
            // keep the grad available to callers
            grads[id] = Some(g);
        }
        grads
    }
}

fn to4(a: &Arr) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("expected 4-d array")
}

fn to2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d array")
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Arr> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on non-scalar var");
        *v.iter().next().unwrap()
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = a.as_ref() + b.as_ref();
        self.tape.push(
            out,
            vec![
                (self.id, Box::new(|g: &Arr| g.clone()) as GradFn),
                (rhs.id, Box::new(|g: &Arr| g.clone())),
            ],
        )
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = a.as_ref() - b.as_ref();
        self.tape.push(
            out,
            vec![
                (self.id, Box::new(|g: &Arr| g.clone()) as GradFn),
                (rhs.id, Box::new(|g: &Arr| g.mapv(|v| -v))),
            ],
        )
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = a.as_ref() * b.as_ref();
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        self.tape.push(
            out,
            vec![
                (self.id, Box::new(move |g: &Arr| g * bc.as_ref()) as GradFn),
                (rhs.id, Box::new(move |g: &Arr| g * ac.as_ref())),
            ],
        )
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let a = self.value();
        let out = a.mapv(|v| v * c);
        self.tape
            .push(out, vec![(self.id, Box::new(move |g: &Arr| g.mapv(|v| v * c)) as GradFn)])
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let a = self.value();
        assert_eq!(
            a.len(),
            shape.iter().product::<usize>(),
            "reshape element count mismatch"
        );
        let dim = a.raw_dim();
        let out = a
            .as_ref()
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape of contiguous array");
        self.tape.push(
            out,
            vec![(
                self.id,
                Box::new(move |g: &Arr| {
                    g.clone().into_shape(dim.clone()).expect("reshape gradient")
                }) as GradFn,
            )],
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let a = self.value();
        let out = a.mapv(|v| v + c);
        self.tape.push(out, vec![(self.id, Box::new(|g: &Arr| g.clone()) as GradFn)])
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self)
    }

    pub fn mean_all(self) -> Var<'t> {
        let a = self.value();
        let n = a.len() as f64;
        let out = Arr::from_elem(IxDyn(&[]), a.sum() / n);
        let dim = a.raw_dim();
        self.tape.push(
            out,
            vec![(
                self.id,
                Box::new(move |g: &Arr| {
                    let gv = *g.iter().next().unwrap();
                    Arr::from_elem(dim.clone(), gv / n)
                }) as GradFn,
            )],
        )
    }

    pub fn silu(self) -> Var<'t> {
        let a = self.value();
        let out = a.mapv(|v| v * sigmoid(v));
        let ac = Rc::clone(&a);
        self.tape.push(
            out,
            vec![(
                self.id,
                Box::new(move |g: &Arr| {
                    let d = ac.mapv(|v| {
                        let s = sigmoid(v);
                        s * (1.0 + v * (1.0 - s))
                    });
                    g * &d
                }) as GradFn,
            )],
        )
    }

    pub fn relu(self) -> Var<'t> {
        let a = self.value();
        let out = a.mapv(|v| v.max(0.0));
        let ac = Rc::clone(&a);
        self.tape.push(
            out,
            vec![(
                self.id,
                Box::new(move |g: &Arr| {
                    let d = ac.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    g * &d
                }) as GradFn,
            )],
        )
    }

    /// Dense matrix product of two rank-2 vars.
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        let a2 = to2(&a);
        let b2 = to2(&b);
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dim mismatch");
        let out = a2.dot(&b2).into_dyn();
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        self.tape.push(
            out,
            vec![
                (
                    self.id,
                    Box::new(move |g: &Arr| to2(g).dot(&to2(&bc).t()).into_dyn()) as GradFn,
                ),
                (rhs.id, Box::new(move |g: &Arr| to2(&ac).t().dot(&to2(g)).into_dyn())),
            ],
        )
    }

    /// Add a per-row bias: (M,N) + (N,) broadcast over rows.
    pub fn add_bias_row(self, bias: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = bias.value();
        let a2 = to2(&a);
        let b1 = b.view().into_dimensionality::<ndarray::Ix1>().expect("bias must be 1-d");
        assert_eq!(a2.ncols(), b1.len(), "bias length mismatch");
        let out = (&a2 + &b1).into_dyn();
        self.tape.push(
            out,
            vec![
                (self.id, Box::new(|g: &Arr| g.clone()) as GradFn),
                (bias.id, Box::new(|g: &Arr| to2(g).sum_axis(Axis(0)).into_dyn())),
            ],
        )
    }

    /// Add a per-channel bias: (B,C,H,W) + (C,).
    pub fn add_bias_chan(self, bias: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = bias.value();
        let a4 = to4(&a);
        let (bs, c, h, w) = a4.dim();
        assert_eq!(b.len(), c, "channel bias length mismatch");
        let mut out = a4.to_owned();
        let b1 = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for bi in 0..bs {
            for ci in 0..c {
                out.slice_mut(ndarray::s![bi, ci, .., ..]).mapv_inplace(|v| v + b1[ci]);
            }
        }
        let _ = (h, w);
        self.tape.push(
            out.into_dyn(),
            vec![
                (self.id, Box::new(|g: &Arr| g.clone()) as GradFn),
                (
                    bias.id,
                    Box::new(move |g: &Arr| {
                        let g4 = to4(g);
                        let mut gb = Array1::<f64>::zeros(c);
                        for ci in 0..c {
                            gb[ci] = g4.slice(ndarray::s![.., ci, .., ..]).sum();
                        }
                        gb.into_dyn()
                    }),
                ),
            ],
        )
    }

    /// Broadcast-add a (B,C) embedding over the spatial dims of (B,C,H,W).
    pub fn add_embed(self, emb: Var<'t>) -> Var<'t> {
        let a = self.value();
        let e = emb.value();
        let a4 = to4(&a);
        let e2 = to2(&e);
        let (bs, c, _, _) = a4.dim();
        assert_eq!((bs, c), e2.dim(), "embedding shape mismatch");
        let mut out = a4.to_owned();
        for bi in 0..bs {
            for ci in 0..c {
                let v = e2[[bi, ci]];
                out.slice_mut(ndarray::s![bi, ci, .., ..]).mapv_inplace(|x| x + v);
            }
        }
        self.tape.push(
            out.into_dyn(),
            vec![
                (self.id, Box::new(|g: &Arr| g.clone()) as GradFn),
                (
                    emb.id,
                    Box::new(move |g: &Arr| {
                        let g4 = to4(g);
                        let mut ge = Array2::<f64>::zeros((bs, c));
                        for bi in 0..bs {
                            for ci in 0..c {
                                ge[[bi, ci]] = g4.slice(ndarray::s![bi, ci, .., ..]).sum();
                            }
                        }
                        ge.into_dyn()
                    }),
                ),
            ],
        )
    }

    /// Multiply each channel of (B,C,H,W) by a learned (C,) scale.
    pub fn mul_chan(self, scale: Var<'t>) -> Var<'t> {
        let a = self.value();
        let s = scale.value();
        let a4 = to4(&a);
        let (bs, c, _, _) = a4.dim();
        assert_eq!(s.len(), c, "channel scale length mismatch");
        let s1 = s.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let mut out = a4.to_owned();
        for bi in 0..bs {
            for ci in 0..c {
                out.slice_mut(ndarray::s![bi, ci, .., ..]).mapv_inplace(|v| v * s1[ci]);
            }
        }
        let ac = Rc::clone(&a);
        let s1b = s1.clone();
        self.tape.push(
            out.into_dyn(),
            vec![
                (
                    self.id,
                    Box::new(move |g: &Arr| {
                        let g4 = to4(g);
                        let mut gx = g4.to_owned();
                        for bi in 0..gx.dim().0 {
                            for ci in 0..c {
                                gx.slice_mut(ndarray::s![bi, ci, .., ..])
                                    .mapv_inplace(|v| v * s1b[ci]);
                            }
                        }
                        gx.into_dyn()
                    }) as GradFn,
                ),
                (
                    scale.id,
                    Box::new(move |g: &Arr| {
                        let g4 = to4(g);
                        let x4 = to4(&ac);
                        let mut gs = Array1::<f64>::zeros(c);
                        for ci in 0..c {
                            gs[ci] = (&g4.slice(ndarray::s![.., ci, .., ..])
                                * &x4.slice(ndarray::s![.., ci, .., ..]))
                                .sum();
                        }
                        gs.into_dyn()
                    }),
                ),
            ],
        )
    }

    /// 2-d convolution, NCHW x (Cout,Cin,kh,kw), zero padding.
    pub fn conv2d(self, weight: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let x4 = to4(&x).to_owned();
        let w4 = to4(&w).to_owned();
        let out = conv2d_forward(&x4, &w4, stride, pad);
        let xc = Rc::clone(&x);
        let wc = Rc::clone(&w);
        let xc2 = Rc::clone(&x);
        let wc2 = Rc::clone(&w);
        self.tape.push(
            out.into_dyn(),
            vec![
                (
                    self.id,
                    Box::new(move |g: &Arr| {
                        conv2d_backward_input(
                            &to4(g).to_owned(),
                            &to4(&wc).to_owned(),
                            to4(&xc).dim(),
                            stride,
                            pad,
                        )
                        .into_dyn()
                    }) as GradFn,
                ),
                (
                    weight.id,
                    Box::new(move |g: &Arr| {
                        conv2d_backward_weight(
                            &to4(g).to_owned(),
                            &to4(&xc2).to_owned(),
                            to4(&wc2).dim(),
                            stride,
                            pad,
                        )
                        .into_dyn()
                    }),
                ),
            ],
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(self) -> Var<'t> {
        let x = self.value();
        let x4 = to4(&x);
        let (b, c, h, w) = x4.dim();
        let mut out = Array4::<f64>::zeros((b, c, h * 2, w * 2));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = x4[[bi, ci, i, j]];
                        out[[bi, ci, 2 * i, 2 * j]] = v;
                        out[[bi, ci, 2 * i + 1, 2 * j]] = v;
                        out[[bi, ci, 2 * i, 2 * j + 1]] = v;
                        out[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
        }
        self.tape.push(
            out.into_dyn(),
            vec![(
                self.id,
                Box::new(move |g: &Arr| {
                    let g4 = to4(g);
                    let mut gx = Array4::<f64>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            for i in 0..h {
                                for j in 0..w {
                                    gx[[bi, ci, i, j]] = g4[[bi, ci, 2 * i, 2 * j]]
                                        + g4[[bi, ci, 2 * i + 1, 2 * j]]
                                        + g4[[bi, ci, 2 * i, 2 * j + 1]]
                                        + g4[[bi, ci, 2 * i + 1, 2 * j + 1]];
                                }
                            }
                        }
                    }
                    gx.into_dyn()
                }) as GradFn,
            )],
        )
    }

    /// Concatenate two NCHW vars along the channel axis.
    pub fn concat_chan(self, rhs: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        let a4 = to4(&a);
        let b4 = to4(&b);
        let (ba, ca, h, w) = a4.dim();
        let (bb, cb, hb, wb) = b4.dim();
        assert_eq!((ba, h, w), (bb, hb, wb), "concat spatial/batch mismatch");
        let out = ndarray::concatenate(Axis(1), &[a4.view(), b4.view()]).unwrap();
        self.tape.push(
            out.into_dyn(),
            vec![
                (
                    self.id,
                    Box::new(move |g: &Arr| {
                        to4(g).slice(ndarray::s![.., ..ca, .., ..]).to_owned().into_dyn()
                    }) as GradFn,
                ),
                (
                    rhs.id,
                    Box::new(move |g: &Arr| {
                        to4(g).slice(ndarray::s![.., ca..ca + cb, .., ..]).to_owned().into_dyn()
                    }),
                ),
            ],
        )
    }

    /// Group normalization without affine parameters.
    pub fn group_norm(self, groups: usize, eps: f64) -> Var<'t> {
        let x = self.value();
        let x4 = to4(&x);
        let (b, c, h, w) = x4.dim();
        assert!(c % groups == 0, "channels not divisible by groups");
        let gs = c / groups;
        let m = (gs * h * w) as f64;
        let mut out = Array4::<f64>::zeros((b, c, h, w));
        let mut inv_std = Array2::<f64>::zeros((b, groups));
        for bi in 0..b {
            for gi in 0..groups {
                let sl = x4.slice(ndarray::s![bi, gi * gs..(gi + 1) * gs, .., ..]);
                let mu = sl.sum() / m;
                let var = sl.mapv(|v| (v - mu) * (v - mu)).sum() / m;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[[bi, gi]] = is;
                let mut o = out.slice_mut(ndarray::s![bi, gi * gs..(gi + 1) * gs, .., ..]);
                o.assign(&sl.mapv(|v| (v - mu) * is));
            }
        }
        let yc = Rc::new(out.clone());
        self.tape.push(
            out.into_dyn(),
            vec![(
                self.id,
                Box::new(move |g: &Arr| {
                    let g4 = to4(g);
                    let mut gx = Array4::<f64>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for gi in 0..groups {
                            let gy = g4.slice(ndarray::s![bi, gi * gs..(gi + 1) * gs, .., ..]);
                            let y = yc.slice(ndarray::s![bi, gi * gs..(gi + 1) * gs, .., ..]);
                            let mean_g = gy.sum() / m;
                            let mean_gy = (&gy * &y).sum() / m;
                            let is = inv_std[[bi, gi]];
                            let mut o =
                                gx.slice_mut(ndarray::s![bi, gi * gs..(gi + 1) * gs, .., ..]);
                            ndarray::Zip::from(&mut o).and(&gy).and(&y).for_each(|o, &gv, &yv| {
                                *o = is * (gv - mean_g - yv * mean_gy);
                            });
                        }
                    }
                    gx.into_dyn()
                }) as GradFn,
            )],
        )
    }

    /// Row lookup into a (S,E) table; gradients scatter-add back into the table.
    pub fn gather_rows(self, indices: &[usize]) -> Var<'t> {
        let t = self.value();
        let t2 = to2(&t);
        let (s, e) = t2.dim();
        for &i in indices {
            assert!(i < s, "gather index {i} out of range {s}");
        }
        let mut out = Array2::<f64>::zeros((indices.len(), e));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).assign(&t2.row(i));
        }
        let idx: Vec<usize> = indices.to_vec();
        self.tape.push(
            out.into_dyn(),
            vec![(
                self.id,
                Box::new(move |g: &Arr| {
                    let g2 = to2(g);
                    let mut gt = Array2::<f64>::zeros((s, e));
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = gt.row_mut(i);
                        row += &g2.row(r);
                    }
                    gt.into_dyn()
                }) as GradFn,
            )],
        )
    }

    /// Weighted per-pixel softmax cross-entropy against integer label maps.
    ///
    /// `logits` is (B,C,H,W); `targets` and `weights` are (B,H,W). The
    /// returned scalar is `sum_{b,i,j} w * (-log softmax(logits)[target]) / norm`.
    /// Pixels with weight zero contribute nothing (including to gradients).
    pub fn softmax_ce_map(
        self,
        targets: &ndarray::Array3<usize>,
        weights: &ndarray::Array3<f64>,
        norm: f64,
    ) -> Var<'t> {
        let x = self.value();
        let x4 = to4(&x);
        let (b, c, h, w) = x4.dim();
        assert_eq!(targets.dim(), (b, h, w), "target shape mismatch");
        assert_eq!(weights.dim(), (b, h, w), "weight shape mismatch");
        let mut probs = Array4::<f64>::zeros((b, c, h, w));
        let mut loss = 0.0;
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let mut mx = f64::NEG_INFINITY;
                    for ci in 0..c {
                        mx = mx.max(x4[[bi, ci, i, j]]);
                    }
                    let mut z = 0.0;
                    for ci in 0..c {
                        z += (x4[[bi, ci, i, j]] - mx).exp();
                    }
                    let logz = z.ln() + mx;
                    for ci in 0..c {
                        probs[[bi, ci, i, j]] = (x4[[bi, ci, i, j]] - logz).exp();
                    }
                    let t = targets[[bi, i, j]];
                    assert!(t < c, "target class {t} out of range {c}");
                    loss += weights[[bi, i, j]] * (logz - x4[[bi, t, i, j]]);
                }
            }
        }
        let out = Arr::from_elem(IxDyn(&[]), loss / norm);
        let probs = Rc::new(probs);
        let tg = targets.clone();
        let wt = weights.clone();
        self.tape.push(
            out,
            vec![(
                self.id,
                Box::new(move |g: &Arr| {
                    let gv = *g.iter().next().unwrap();
                    let mut gx = Array4::<f64>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for i in 0..h {
                            for j in 0..w {
                                let wv = wt[[bi, i, j]];
                                if wv == 0.0 {
                                    continue;
                                }
                                let t = tg[[bi, i, j]];
                                for ci in 0..c {
                                    let p = probs[[bi, ci, i, j]];
                                    let ind = if ci == t { 1.0 } else { 0.0 };
                                    gx[[bi, ci, i, j]] = gv * wv * (p - ind) / norm;
                                }
                            }
                        }
                    }
                    gx.into_dyn()
                }) as GradFn,
            )],
        )
    }

    /// Global average pool: (B,C,H,W) -> (B,C).
    pub fn mean_spatial(self) -> Var<'t> {
        let a = self.value();
        let a4 = to4(&a);
        let (b, c, h, w) = a4.dim();
        let m = (h * w) as f64;
        let mut out = Array2::<f64>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                out[[bi, ci]] = a4.slice(ndarray::s![bi, ci, .., ..]).sum() / m;
            }
        }
        self.tape.push(
            out.into_dyn(),
            vec![(
                self.id,
                Box::new(move |g: &Arr| {
                    let g2 = to2(g);
                    let mut gx = Array4::<f64>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            gx.slice_mut(ndarray::s![bi, ci, .., ..]).fill(g2[[bi, ci]] / m);
                        }
                    }
                    gx.into_dyn()
                }) as GradFn,
            )],
        )
    }

    /// Multiply each item of a (B,...) var by its own scalar factor.
    pub fn scale_per_batch(self, factors: &[f64]) -> Var<'t> {
        let a = self.value();
        let b = a.shape()[0];
        assert_eq!(b, factors.len(), "per-batch factor count mismatch");
        let mut out = a.as_ref().clone();
        for (bi, &f) in factors.iter().enumerate() {
            out.index_axis_mut(Axis(0), bi).mapv_inplace(|v| v * f);
        }
        let fs: Vec<f64> = factors.to_vec();
        self.tape.push(
            out,
            vec![(
                self.id,
                Box::new(move |g: &Arr| {
                    let mut gx = g.clone();
                    for (bi, &f) in fs.iter().enumerate() {
                        gx.index_axis_mut(Axis(0), bi).mapv_inplace(|v| v * f);
                    }
                    gx
                }) as GradFn,
            )],
        )
    }

    /// Cut the value out of the graph: a fresh leaf with the same value.
    pub fn detach(self) -> Var<'t> {
        let v = self.value();
        self.tape.leaf(v.as_ref().clone())
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &ndarray::ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = out_size(h, kh, stride, pad);
    let ow = out_size(w, kw, stride, pad);
    let mut col = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        col[[row, oi * ow + oj]] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im_add(
    col: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<f64> {
    let oh = out_size(h, kh, stride, pad);
    let ow = out_size(w, kw, stride, pad);
    let mut x = ndarray::Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        x[[ci, ii as usize, jj as usize]] += col[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv2d_forward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b, cin, h, wd) = x.dim();
    let (cout, cin_w, kh, kw) = w.dim();
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    let oh = out_size(h, kh, stride, pad);
    let ow = out_size(wd, kw, stride, pad);
    let w2 = w.view().into_shape((cout, cin * kh * kw)).unwrap();
    let mut out = Array4::<f64>::zeros((b, cout, oh, ow));
    for bi in 0..b {
        let col = im2col(&x.index_axis(Axis(0), bi), kh, kw, stride, pad);
        let o = w2.dot(&col);
        out.index_axis_mut(Axis(0), bi)
            .assign(&o.into_shape((cout, oh, ow)).unwrap());
    }
    out
}

fn conv2d_backward_input(
    go: &Array4<f64>,
    w: &Array4<f64>,
    xdim: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b, cin, h, wd) = xdim;
    let (cout, _, kh, kw) = w.dim();
    let (_, _, oh, ow) = go.dim();
    let w2 = w.view().into_shape((cout, cin * kh * kw)).unwrap();
    let mut gx = Array4::<f64>::zeros((b, cin, h, wd));
    for bi in 0..b {
        let g2 = go
            .index_axis(Axis(0), bi)
            .into_shape((cout, oh * ow))
            .unwrap()
            .to_owned();
        let colg = w2.t().dot(&g2);
        let gxi = col2im_add(&colg, cin, h, wd, kh, kw, stride, pad);
        gx.index_axis_mut(Axis(0), bi).assign(&gxi);
    }
    gx
}

fn conv2d_backward_weight(
    go: &Array4<f64>,
    x: &Array4<f64>,
    wdim: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (cout, cin, kh, kw) = wdim;
    let (b, _, _, _) = x.dim();
    let (_, _, oh, ow) = go.dim();
    let mut gw2 = Array2::<f64>::zeros((cout, cin * kh * kw));
    for bi in 0..b {
        let col = im2col(&x.index_axis(Axis(0), bi), kh, kw, stride, pad);
        let g2 = go
            .index_axis(Axis(0), bi)
            .into_shape((cout, oh * ow))
            .unwrap()
            .to_owned();
        gw2 += &g2.dot(&col.t());
    }
    gw2.into_shape((cout, cin, kh, kw)).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        Array::from_shape_fn(IxDyn(shape), |_| {
            rand_distr_sample(rng)
        })
    }

    fn rand_distr_sample(rng: &mut ChaCha8Rng) -> f64 {
        // Box-Muller, deterministic per rng state
        let u1: f64 = rng.gen_range(1e-10..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Central finite-difference check of a scalar function of one input var.
    fn grad_check<F>(shape: &[usize], f: F, tol: f64)
    where
        F: Fn(Var<'_>) -> Var<'_>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = randn(&mut rng, shape);
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = f(x);
        let grads = tape.backward(y);
        let gx = grads[x.id].clone().expect("no gradient for input");
        let eps = 1e-5;
        for idx in 0..x0.len().min(64) {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let tp = Tape::new();
            let fp = f(tp.leaf(xp)).scalar();
            let tm = Tape::new();
            let fm = f(tm.leaf(xm)).scalar();
            let fd = (fp - fm) / (2.0 * eps);
            let ad = gx.as_slice().unwrap()[idx];
            let denom = fd.abs().max(ad.abs()).max(1e-6);
            assert!(
                (fd - ad).abs() / denom < tol,
                "grad mismatch at {idx}: fd={fd} ad={ad}"
            );
        }
    }

    #[test]
    fn add_mul_grads() {
        grad_check(&[3, 4], |x| x.mul(x.add_scalar(2.0)).mean_all(), 1e-6);
    }

    #[test]
    fn silu_grad() {
        grad_check(&[2, 5], |x| x.silu().square().mean_all(), 1e-5);
    }

    #[test]
    fn relu_grad() {
        grad_check(&[4, 4], |x| x.relu().mean_all(), 1e-5);
    }

    #[test]
    fn reshape_grad() {
        grad_check(&[2, 6], |x| x.reshape(&[3, 4]).square().mean_all(), 1e-6);
        let tape = Tape::new();
        let x = tape.leaf(Arr::zeros(IxDyn(&[2, 3])));
        assert_eq!(x.reshape(&[6, 1]).shape(), vec![6, 1]);
    }

    #[test]
    fn matmul_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b0 = randn(&mut rng, &[4, 3]);
        grad_check(&[5, 4], move |x| {
            let t = x.matmul(x.tape_leaf_of(&b0));
            t.square().mean_all()
        }, 1e-5);
    }

    #[test]
    fn conv2d_grad_input_and_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w0 = randn(&mut rng, &[3, 2, 3, 3]);
        // input gradient
        let w1 = w0.clone();
        grad_check(&[1, 2, 5, 5], move |x| {
            x.conv2d(x.tape_leaf_of(&w1), 1, 1).square().mean_all()
        }, 1e-4);
        // weight gradient
        let mut rng2 = ChaCha8Rng::seed_from_u64(6);
        let x0 = randn(&mut rng2, &[2, 2, 6, 6]);
        grad_check(&[3, 2, 3, 3], move |w| {
            let t = w.tape_leaf_of(&x0);
            t.conv2d(w, 2, 1).square().mean_all()
        }, 1e-4);
    }

    #[test]
    fn group_norm_grad() {
        grad_check(&[2, 4, 3, 3], |x| {
            x.group_norm(2, 1e-5).square().mean_all()
        }, 1e-4);
    }

    #[test]
    fn upsample_concat_grad() {
        grad_check(&[1, 2, 3, 3], |x| {
            x.upsample2().concat_chan(x.upsample2()).mean_all()
        }, 1e-6);
    }

    #[test]
    fn softmax_ce_grad() {
        let targets = ndarray::Array3::from_shape_fn((1, 2, 2), |(_, i, j)| (i + j) % 3);
        let weights = ndarray::Array3::from_elem((1, 2, 2), 1.5);
        grad_check(&[1, 3, 2, 2], move |x| {
            x.softmax_ce_map(&targets, &weights, 4.0)
        }, 1e-5);
    }

    #[test]
    fn embed_ops_grad() {
        let idx = vec![1usize, 0, 1];
        grad_check(&[2, 4], move |t| {
            t.gather_rows(&idx).square().mean_all()
        }, 1e-6);
    }

    #[test]
    fn detach_stops_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(arr2(&[[1.0, 2.0]]).into_dyn());
        let y = x.detach().square().mean_all();
        let grads = tape.backward(y);
        assert!(grads[x.id].is_none());
    }

    #[test]
    fn no_grad_tape_stores_no_parents() {
        let tape = Tape::no_grad();
        let x = tape.leaf(arr2(&[[1.0, 2.0]]).into_dyn());
        let y = x.square().mean_all();
        let grads = tape.backward(y);
        assert!(grads[x.id].is_none());
    }
}

impl<'t> Var<'t> {
    /// Helper for tests and internal code: create a leaf on this var's tape.
    pub fn tape_leaf_of(&self, v: &Arr) -> Var<'t> {
        self.tape.leaf(v.clone())
    }
}
