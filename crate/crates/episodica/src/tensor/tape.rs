//! Define-by-run reverse-mode autodiff.
//!
//! Each operation records its output value and, per input, a closure mapping
//! the upstream gradient to the gradient contribution for that input.
//! [`Tape::backward`] walks the record in reverse, summing contributions, so
//! shared subexpressions accumulate correctly. A tape lives for one training
//! step and is rebuilt for the next.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_raw, matmul_raw, Tensor};

type GradFn = Box<dyn Fn(&Tensor) -> Tensor>;

struct Node {
    value: Tensor,
    parents: Vec<(usize, GradFn)>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Operation record for one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`]. Leaves the loss never reached
/// report zero.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => prev.zip(&g, |a, b| a + b).expect("gradient shape mismatch"),
    });
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, parents: Vec<(usize, GradFn)>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents });
        Var(nodes.len() - 1)
    }

    /// Record a leaf value (parameter or input).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, vec![])
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    // ---- elementwise -----------------------------------------------------

    fn binary_elementwise(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        da: impl Fn(f32, f32) -> f32 + 'static,
        db: impl Fn(f32, f32) -> f32 + 'static,
        name: &str,
    ) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        // Scalar-with-tensor broadcast only; no general broadcasting.
        if av.is_scalar() && !bv.is_scalar() {
            let s = av.item();
            let out = bv.map(|y| f(s, y));
            let (bv1, bv2) = (bv.clone(), bv);
            let ga: GradFn = Box::new(move |g| {
                let total: f64 = g
                    .data()
                    .iter()
                    .zip(bv1.data())
                    .map(|(&gi, &y)| gi as f64 * da(s, y) as f64)
                    .sum();
                Tensor::scalar(total as f32)
            });
            let gb: GradFn =
                Box::new(move |g| g.zip(&bv2.map(|y| db(s, y)), |x, y| x * y).unwrap());
            return Ok(self.push(out, vec![(a.0, ga), (b.0, gb)]));
        }
        if bv.is_scalar() && !av.is_scalar() {
            let s = bv.item();
            let out = av.map(|x| f(x, s));
            let (av1, av2) = (av.clone(), av);
            let ga: GradFn =
                Box::new(move |g| g.zip(&av1.map(|x| da(x, s)), |x, y| x * y).unwrap());
            let gb: GradFn = Box::new(move |g| {
                let total: f64 = g
                    .data()
                    .iter()
                    .zip(av2.data())
                    .map(|(&gi, &x)| gi as f64 * db(x, s) as f64)
                    .sum();
                Tensor::scalar(total as f32)
            });
            return Ok(self.push(out, vec![(a.0, ga), (b.0, gb)]));
        }
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "{name}: operand shapes {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = av.zip(&bv, &f)?;
        let (av1, bv1) = (av.clone(), bv.clone());
        let (av2, bv2) = (av, bv);
        let ga: GradFn = Box::new(move |g| {
            g.zip(&av1.zip(&bv1, |x, y| da(x, y)).unwrap(), |x, y| x * y).unwrap()
        });
        let gb: GradFn = Box::new(move |g| {
            g.zip(&av2.zip(&bv2, |x, y| db(x, y)).unwrap(), |x, y| x * y).unwrap()
        });
        Ok(self.push(out, vec![(a.0, ga), (b.0, gb)]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0, "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0, "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, |x, y| x * y, |_, y| y, |x, _| x, "mul")
    }

    pub fn scale(&self, a: Var, c: f32) -> Var {
        let av = self.value(a);
        let out = av.map(|x| c * x);
        let ga: GradFn = Box::new(move |g| g.map(|x| c * x));
        self.push(out, vec![(a.0, ga)])
    }

    /// relu with gradient defined as 0 at exactly 0.
    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.map(|x| x.max(0.0));
        let ga: GradFn =
            Box::new(move |g| g.zip(&av.map(|x| if x > 0.0 { 1.0 } else { 0.0 }), |x, y| x * y).unwrap());
        self.push(out, vec![(a.0, ga)])
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).map(f32::exp);
        let y = out.clone();
        let ga: GradFn = Box::new(move |g| g.zip(&y, |x, e| x * e).unwrap());
        self.push(out, vec![(a.0, ga)])
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numeric("log of non-positive value".into()));
        }
        let out = av.map(f32::ln);
        let ga: GradFn = Box::new(move |g| g.zip(&av, |x, v| x / v).unwrap());
        Ok(self.push(out, vec![(a.0, ga)]))
    }

    /// Elementwise product with a constant tensor (no gradient into the mask).
    pub fn mul_const(&self, a: Var, m: &Tensor) -> Result<Var> {
        let av = self.value(a);
        let out = av.zip(m, |x, y| x * y)?;
        let m1 = m.clone();
        let ga: GradFn = Box::new(move |g| g.zip(&m1, |x, y| x * y).unwrap());
        Ok(self.push(out, vec![(a.0, ga)]))
    }

    /// Elementwise sum with a constant tensor.
    pub fn add_const(&self, a: Var, m: &Tensor) -> Result<Var> {
        let out = self.value(a).zip(m, |x, y| x + y)?;
        let ga: GradFn = Box::new(|g| g.clone());
        Ok(self.push(out, vec![(a.0, ga)]))
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let out = matmul_raw(&av, &bv)?;
        let bv1 = bv.clone();
        let av1 = av.clone();
        let ga: GradFn = Box::new(move |g| matmul_nt_raw(g, &bv1).unwrap());
        let gb: GradFn = Box::new(move |g| {
            // Aᵀ·G computed as (Gᵀ·A)ᵀ-free double loop via transpose of A
            matmul_raw(&transpose_raw(&av1), g).unwrap()
        });
        Ok(self.push(out, vec![(a.0, ga), (b.0, gb)]))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::Shape(format!("transpose expects 2-D, got {:?}", av.shape())));
        }
        let out = transpose_raw(&av);
        let ga: GradFn = Box::new(|g| transpose_raw(g));
        Ok(self.push(out, vec![(a.0, ga)]))
    }

    /// `a · kᵀ` against a constant key matrix; no gradient flows into `k`.
    pub fn matmul_nt_const(&self, a: Var, k: &Tensor) -> Result<Var> {
        let av = self.value(a);
        let out = matmul_nt_raw(&av, k)?;
        let k1 = k.clone();
        let ga: GradFn = Box::new(move |g| matmul_raw(g, &k1).unwrap());
        Ok(self.push(out, vec![(a.0, ga)]))
    }

    /// Per-row dot product of an `n x d` variable with a constant `n x d`
    /// tensor, yielding shape `[n]`. No gradient into the constant.
    pub fn rowwise_dot_const(&self, a: Var, k: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || av.shape() != k.shape() {
            return Err(Error::Shape(format!(
                "rowwise_dot: shapes {:?} vs {:?}",
                av.shape(),
                k.shape()
            )));
        }
        let (n, d) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![0.0f32; n];
        for i in 0..n {
            let mut acc = 0.0f64;
            for j in 0..d {
                acc += av.data()[i * d + j] as f64 * k.data()[i * d + j] as f64;
            }
            out[i] = acc as f32;
        }
        let k1 = k.clone();
        let ga: GradFn = Box::new(move |g| {
            let mut dx = vec![0.0f32; n * d];
            for i in 0..n {
                for j in 0..d {
                    dx[i * d + j] = g.data()[i] * k1.data()[i * d + j];
                }
            }
            Tensor::from_shape_data(vec![n, d], dx)
        });
        Ok(self.push(Tensor::from_shape_data(vec![n], out), vec![(a.0, ga)]))
    }

    /// Broadcast-add a `[d]` bias to every row of an `n x d` matrix.
    pub fn add_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(bias);
        if av.rank() != 2 || bv.rank() != 1 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Shape(format!(
                "add_bias: shapes {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (n, d) = (av.shape()[0], av.shape()[1]);
        let mut out = av.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += bv.data()[j];
            }
        }
        let ga: GradFn = Box::new(|g| g.clone());
        let gb: GradFn = Box::new(move |g| {
            let mut db = vec![0.0f64; d];
            for i in 0..n {
                for j in 0..d {
                    db[j] += g.data()[i * d + j] as f64;
                }
            }
            Tensor::from_shape_data(vec![d], db.into_iter().map(|x| x as f32).collect())
        });
        Ok(self.push(Tensor::from_shape_data(vec![n, d], out), vec![(a.0, ga), (bias.0, gb)]))
    }

    /// Column-prepend a `[n]` vector to an `n x z` matrix.
    pub fn prepend_col(&self, v: Var, m: Var) -> Result<Var> {
        let vv = self.value(v);
        let mv = self.value(m);
        if vv.rank() != 1 || mv.rank() != 2 || vv.shape()[0] != mv.shape()[0] {
            return Err(Error::Shape(format!(
                "prepend_col: shapes {:?} vs {:?}",
                vv.shape(),
                mv.shape()
            )));
        }
        let (n, z) = (mv.shape()[0], mv.shape()[1]);
        let mut out = vec![0.0f32; n * (z + 1)];
        for i in 0..n {
            out[i * (z + 1)] = vv.data()[i];
            out[i * (z + 1) + 1..(i + 1) * (z + 1)]
                .copy_from_slice(&mv.data()[i * z..(i + 1) * z]);
        }
        let gv: GradFn = Box::new(move |g| {
            let col: Vec<f32> = (0..n).map(|i| g.data()[i * (z + 1)]).collect();
            Tensor::from_shape_data(vec![n], col)
        });
        let gm: GradFn = Box::new(move |g| {
            let mut dm = vec![0.0f32; n * z];
            for i in 0..n {
                dm[i * z..(i + 1) * z].copy_from_slice(&g.data()[i * (z + 1) + 1..(i + 1) * (z + 1)]);
            }
            Tensor::from_shape_data(vec![n, z], dm)
        });
        Ok(self.push(Tensor::from_shape_data(vec![n, z + 1], out), vec![(v.0, gv), (m.0, gm)]))
    }

    // ---- row normalizations ----------------------------------------------

    /// Row-wise L2 normalization of an `n x d` matrix. Rows with norm below
    /// 1e-12 are rejected as degenerate.
    pub fn l2_normalize(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::Shape(format!("l2_normalize expects 2-D, got {:?}", av.shape())));
        }
        let (n, d) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![0.0f32; n * d];
        let mut norms = vec![0.0f32; n];
        for i in 0..n {
            let row = &av.data()[i * d..(i + 1) * d];
            let norm = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                return Err(Error::Numeric(format!("l2_normalize: row {i} has near-zero norm")));
            }
            norms[i] = norm as f32;
            for j in 0..d {
                out[i * d + j] = (row[j] as f64 / norm) as f32;
            }
        }
        let y = Tensor::from_shape_data(vec![n, d], out);
        let y1 = y.clone();
        let ga: GradFn = Box::new(move |g| {
            // dx = (g - y (g·y)) / norm, per row
            let mut dx = vec![0.0f32; n * d];
            for i in 0..n {
                let gr = &g.data()[i * d..(i + 1) * d];
                let yr = &y1.data()[i * d..(i + 1) * d];
                let dot: f64 = gr.iter().zip(yr).map(|(&gi, &yi)| gi as f64 * yi as f64).sum();
                for j in 0..d {
                    dx[i * d + j] =
                        ((gr[j] as f64 - yr[j] as f64 * dot) / norms[i] as f64) as f32;
                }
            }
            Tensor::from_shape_data(vec![n, d], dx)
        });
        Ok(self.push(y, vec![(a.0, ga)]))
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::Shape(format!("softmax_rows expects 2-D, got {:?}", av.shape())));
        }
        let y = softmax_rows_raw(&av);
        let (n, d) = (av.shape()[0], av.shape()[1]);
        let y1 = y.clone();
        let ga: GradFn = Box::new(move |g| {
            let mut dx = vec![0.0f32; n * d];
            for i in 0..n {
                let gr = &g.data()[i * d..(i + 1) * d];
                let yr = &y1.data()[i * d..(i + 1) * d];
                let dot: f64 = gr.iter().zip(yr).map(|(&gi, &yi)| gi as f64 * yi as f64).sum();
                for j in 0..d {
                    dx[i * d + j] = (yr[j] as f64 * (gr[j] as f64 - dot)) as f32;
                }
            }
            Tensor::from_shape_data(vec![n, d], dx)
        });
        Ok(self.push(y, vec![(a.0, ga)]))
    }

    /// Row-wise log-sum-exp of an `n x d` matrix, shape `[n]`, max-subtracted.
    pub fn logsumexp_rows(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::Shape(format!("logsumexp_rows expects 2-D, got {:?}", av.shape())));
        }
        let (n, d) = (av.shape()[0], av.shape()[1]);
        let soft = softmax_rows_raw(&av);
        let mut out = vec![0.0f32; n];
        for i in 0..n {
            let row = &av.data()[i * d..(i + 1) * d];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let s: f64 = row.iter().map(|&x| ((x - m) as f64).exp()).sum();
            out[i] = (m as f64 + s.ln()) as f32;
        }
        let ga: GradFn = Box::new(move |g| {
            let mut dx = vec![0.0f32; n * d];
            for i in 0..n {
                for j in 0..d {
                    dx[i * d + j] = g.data()[i] * soft.data()[i * d + j];
                }
            }
            Tensor::from_shape_data(vec![n, d], dx)
        });
        Ok(self.push(Tensor::from_shape_data(vec![n], out), vec![(a.0, ga)]))
    }

    /// Sum along each row of an `n x d` matrix, shape `[n]`.
    pub fn row_sum(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::Shape(format!("row_sum expects 2-D, got {:?}", av.shape())));
        }
        let (n, d) = (av.shape()[0], av.shape()[1]);
        let out: Vec<f32> = (0..n)
            .map(|i| av.data()[i * d..(i + 1) * d].iter().map(|&x| x as f64).sum::<f64>() as f32)
            .collect();
        let ga: GradFn = Box::new(move |g| {
            let mut dx = vec![0.0f32; n * d];
            for i in 0..n {
                for j in 0..d {
                    dx[i * d + j] = g.data()[i];
                }
            }
            Tensor::from_shape_data(vec![n, d], dx)
        });
        Ok(self.push(Tensor::from_shape_data(vec![n], out), vec![(a.0, ga)]))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::scalar(av.sum_f64() as f32);
        let shape = av.shape().to_vec();
        let ga: GradFn = Box::new(move |g| {
            let v = g.item();
            Tensor::zeros(&shape).map(|_| v)
        });
        self.push(out, vec![(a.0, ga)])
    }

    pub fn mean(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len() as f64;
        let out = Tensor::scalar((av.sum_f64() / n) as f32);
        let shape = av.shape().to_vec();
        let ga: GradFn = Box::new(move |g| {
            let v = (g.item() as f64 / n) as f32;
            Tensor::zeros(&shape).map(|_| v)
        });
        self.push(out, vec![(a.0, ga)])
    }

    // ---- conv / pooling / reshape ----------------------------------------

    /// 3x3 convolution with zero padding 1 and the given stride.
    /// `input` is `n x cin x h x w`, `weight` is `cout x cin x 3 x 3`,
    /// `bias` is `[cout]`.
    pub fn conv3x3(&self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        if x.rank() != 4 || w.rank() != 4 || b.rank() != 1 {
            return Err(Error::Shape(format!(
                "conv3x3: ranks {:?} / {:?} / {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, cin2, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if cin != cin2 || kh != 3 || kw != 3 || b.shape()[0] != cout {
            return Err(Error::Shape(format!(
                "conv3x3: input {:?} incompatible with weight {:?} bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv3x3: stride must be positive".into()));
        }
        let oh = (h + 2 - 3) / stride + 1;
        let ow = (wd + 2 - 3) / stride + 1;
        let mut out = vec![0.0f32; n * cout * oh * ow];
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[co] as f64;
                        for ci in 0..cin {
                            for ky in 0..3 {
                                let iy = (oy * stride + ky) as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((ni * cin + ci) * h + iy as usize) * wd + ix as usize;
                                    let wi = ((co * cin + ci) * 3 + ky) * 3 + kx;
                                    acc += x.data()[xi] as f64 * w.data()[wi] as f64;
                                }
                            }
                        }
                        out[((ni * cout + co) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        let x1 = x.clone();
        let w1 = w.clone();
        let gx: GradFn = Box::new(move |g| {
            let mut dx = vec![0.0f32; n * cin * h * wd];
            for ni in 0..n {
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g.data()[((ni * cout + co) * oh + oy) * ow + ox];
                            if go == 0.0 {
                                continue;
                            }
                            for ci in 0..cin {
                                for ky in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3 {
                                        let ix = (ox * stride + kx) as isize - 1;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = ((ni * cin + ci) * h + iy as usize) * wd
                                            + ix as usize;
                                        let wi = ((co * cin + ci) * 3 + ky) * 3 + kx;
                                        dx[xi] += go * w1.data()[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Tensor::from_shape_data(vec![n, cin, h, wd], dx)
        });
        let gw: GradFn = Box::new(move |g| {
            let mut dw = vec![0.0f64; cout * cin * 9];
            for ni in 0..n {
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g.data()[((ni * cout + co) * oh + oy) * ow + ox] as f64;
                            if go == 0.0 {
                                continue;
                            }
                            for ci in 0..cin {
                                for ky in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3 {
                                        let ix = (ox * stride + kx) as isize - 1;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = ((ni * cin + ci) * h + iy as usize) * wd
                                            + ix as usize;
                                        let wi = ((co * cin + ci) * 3 + ky) * 3 + kx;
                                        dw[wi] += go * x1.data()[xi] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Tensor::from_shape_data(
                vec![cout, cin, 3, 3],
                dw.into_iter().map(|v| v as f32).collect(),
            )
        });
        let gb: GradFn = Box::new(move |g| {
            let mut db = vec![0.0f64; cout];
            for ni in 0..n {
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            db[co] += g.data()[((ni * cout + co) * oh + oy) * ow + ox] as f64;
                        }
                    }
                }
            }
            Tensor::from_shape_data(vec![cout], db.into_iter().map(|v| v as f32).collect())
        });
        Ok(self.push(
            Tensor::from_shape_data(vec![n, cout, oh, ow], out),
            vec![(input.0, gx), (weight.0, gw), (bias.0, gb)],
        ))
    }

    /// Mean over the spatial dimensions: `n x c x h x w` -> `n x c`.
    pub fn global_avg_pool(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 4 {
            return Err(Error::Shape(format!("global_avg_pool expects 4-D, got {:?}", x.shape())));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let hw = (h * w) as f64;
        let mut out = vec![0.0f32; n * c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let s: f64 = x.data()[base..base + h * w].iter().map(|&v| v as f64).sum();
                out[ni * c + ci] = (s / hw) as f32;
            }
        }
        let ga: GradFn = Box::new(move |g| {
            let mut dx = vec![0.0f32; n * c * h * w];
            for ni in 0..n {
                for ci in 0..c {
                    let v = (g.data()[ni * c + ci] as f64 / hw) as f32;
                    let base = (ni * c + ci) * h * w;
                    for s in &mut dx[base..base + h * w] {
                        *s = v;
                    }
                }
            }
            Tensor::from_shape_data(vec![n, c, h, w], dx)
        });
        Ok(self.push(Tensor::from_shape_data(vec![n, c], out), vec![(a.0, ga)]))
    }

    /// Collapse a rank-4 batch to `n x (c*h*w)`.
    pub fn flatten(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 4 {
            return Err(Error::Shape(format!("flatten expects 4-D, got {:?}", x.shape())));
        }
        let n = x.shape()[0];
        let d = x.len() / n;
        let shape = x.shape().to_vec();
        let out = Tensor::from_shape_data(vec![n, d], x.data().to_vec());
        let ga: GradFn =
            Box::new(move |g| Tensor::from_shape_data(shape.clone(), g.data().to_vec()));
        Ok(self.push(out, vec![(a.0, ga)]))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Every node at or before the loss is
    /// visited once; gradients of shared subexpressions sum.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let seed_shape = nodes[loss.0].value.shape().to_vec();
        grads[loss.0] = Some(Tensor::ones(&seed_shape));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].clone() else { continue };
            for (pid, gradfn) in &nodes[id].parents {
                let contrib = gradfn(&g);
                accumulate(&mut grads[*pid], contrib);
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

pub(crate) fn transpose_raw(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::from_shape_data(vec![n, m], out)
}

pub(crate) fn softmax_rows_raw(a: &Tensor) -> Tensor {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0f32; n * d];
    for i in 0..n {
        let row = &a.data()[i * d..(i + 1) * d];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&x| ((x - m) as f64).exp()).collect();
        let s: f64 = exps.iter().sum();
        for j in 0..d {
            out[i * d + j] = (exps[j] / s) as f32;
        }
    }
    Tensor::from_shape_data(vec![n, d], out)
}
