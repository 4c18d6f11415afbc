//! Primitive forward evaluations and their vector-Jacobian products.

use super::tape::{Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Splits `shape` around `axis` into (outer, n, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Border-clamped bilinear interpolation of a `C × H × W` map at normalized
/// `(u, v)`. Texel `(x, y)` is centred at `((x + ½)/W, (y + ½)/H)`.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
    /// Whether each coordinate was clamped (zero gradient along it).
    pub clamped: [bool; 2],
}

impl BilinearTap {
    pub fn new(u: f64, v: f64, h: usize, w: usize) -> Self {
        let (x0, x1, fx, cx) = Self::axis(u * w as f64 - 0.5, w);
        let (y0, y1, fy, cy) = Self::axis(v * h as f64 - 0.5, h);
        Self {
            x0,
            x1,
            y0,
            y1,
            fx,
            fy,
            clamped: [cx, cy],
        }
    }

    fn axis(p: f64, n: usize) -> (usize, usize, f64, bool) {
        let hi = (n - 1) as f64;
        let clamped = !(0.0..=hi).contains(&p);
        let p = p.clamp(0.0, hi);
        if n == 1 {
            return (0, 0, 0.0, true);
        }
        let i0 = (p.floor() as usize).min(n - 2);
        (i0, i0 + 1, p - i0 as f64, clamped)
    }

    /// Interpolated value of one `H × W` channel plane.
    #[inline]
    pub fn sample(&self, plane: &[f64], w: usize) -> f64 {
        let a = plane[self.y0 * w + self.x0];
        let b = plane[self.y0 * w + self.x1];
        let c = plane[self.y1 * w + self.x0];
        let d = plane[self.y1 * w + self.x1];
        (1.0 - self.fy) * ((1.0 - self.fx) * a + self.fx * b) + self.fy * ((1.0 - self.fx) * c + self.fx * d)
    }

    /// Derivatives of the sample w.r.t. normalized `(u, v)`.
    #[inline]
    pub fn sample_grad_uv(&self, plane: &[f64], h: usize, w: usize) -> [f64; 2] {
        let a = plane[self.y0 * w + self.x0];
        let b = plane[self.y0 * w + self.x1];
        let c = plane[self.y1 * w + self.x0];
        let d = plane[self.y1 * w + self.x1];
        let du = if self.clamped[0] {
            0.0
        } else {
            ((1.0 - self.fy) * (b - a) + self.fy * (d - c)) * w as f64
        };
        let dv = if self.clamped[1] {
            0.0
        } else {
            ((1.0 - self.fx) * (c - a) + self.fx * (d - b)) * h as f64
        };
        [du, dv]
    }

    /// Scatters `g` into a gradient plane with the interpolation weights.
    #[inline]
    pub fn scatter(&self, plane: &mut [f64], w: usize, g: f64) {
        plane[self.y0 * w + self.x0] += g * (1.0 - self.fy) * (1.0 - self.fx);
        plane[self.y0 * w + self.x1] += g * (1.0 - self.fy) * self.fx;
        plane[self.y1 * w + self.x0] += g * self.fy * (1.0 - self.fx);
        plane[self.y1 * w + self.x1] += g * self.fy * self.fx;
    }
}

impl Tape {
    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).map(f);
        self.push(out, op, vec![x])
    }

    /// `[n, k] · [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let out = matmul_raw(ta.data(), tb.data(), ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = Tensor::new(vec![ta.shape()[0], tb.shape()[1]], out)?;
        Ok(self.push(out, Op::MatMul, vec![a, b]))
    }

    /// Element-wise `a + b`; `b` may be broadcast when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_suffix(ta.shape(), tb.shape()) {
            return Err(Error::shape(name, format!("{:?} and {:?} do not broadcast", ta.shape(), tb.shape())));
        }
        let nb = tb.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % nb]))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, op, vec![a, b]))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(c), |v| v * c)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let n = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat { axis }, xs.to_vec()))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape("slice", format!("{start}..{end} on axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = axis_split(shape, axis);
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * n * inner;
            data.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = width;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Slice { axis, start }, vec![x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape, vec![x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu, |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid, sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh, f64::tanh)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus, softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp, f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log, f64::ln)
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} for shape {:?}", t.shape())));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * n * inner + k * inner + i;
                let max = (0..n).map(|k| data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (data[idx(k)] - max).exp();
                    data[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    data[idx(k)] /= z;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax { axis }, vec![x]))
    }

    /// Sum along `axis`, or of every element when `axis` is `None`.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(x);
        let out = match axis {
            None => Tensor::scalar(t.data().iter().sum()),
            Some(axis) => {
                if axis >= t.rank() {
                    return Err(Error::shape("sum", format!("axis {axis} for shape {:?}", t.shape())));
                }
                let (outer, n, inner) = axis_split(t.shape(), axis);
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let src = &t.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                let mut shape = t.shape().to_vec();
                shape.remove(axis);
                Tensor::new(shape, data)?
            }
        };
        Ok(self.push(out, Op::Sum { axis }, vec![x]))
    }

    /// Normalizes each row of a `[n, k]` tensor to unit length. Rows shorter
    /// than 1e-8 become the first basis vector (the identity quaternion for
    /// `k = 4`) and pass no gradient.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("normalize_rows", format!("expected rank 2, got {:?}", t.shape())));
        }
        let k = t.shape()[1];
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(k) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < NORMALIZE_FALLBACK {
                row.fill(0.0);
                row[0] = 1.0;
            } else {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::NormalizeRows, vec![x]))
    }

    /// Samples a `[C, H, W]` map at `[N, 2]` normalized coordinates with border
    /// clamping, giving `[N, C]`.
    pub fn bilinear_sample2d(&mut self, map: Var, uv: Var) -> Result<Var> {
        let (tm, tu) = (self.value(map), self.value(uv));
        if tm.rank() != 3 || tu.rank() != 2 || tu.shape()[1] != 2 {
            return Err(Error::shape(
                "bilinear_sample2d",
                format!("map {:?}, uv {:?}", tm.shape(), tu.shape()),
            ));
        }
        let (c, h, w) = (tm.shape()[0], tm.shape()[1], tm.shape()[2]);
        let n = tu.shape()[0];
        let mut data = Vec::with_capacity(n * c);
        for p in tu.data().chunks_exact(2) {
            let tap = BilinearTap::new(p[0], p[1], h, w);
            for ch in 0..c {
                data.push(tap.sample(&tm.data()[ch * h * w..(ch + 1) * h * w], w));
            }
        }
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.push(out, Op::Bilinear, vec![map, uv]))
    }
}

pub(crate) const NORMALIZE_FALLBACK: f64 = 1e-8;

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[kk * m..(kk + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` for `a: [n, k]`, `b: [n, m]`.
fn matmul_at_b(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[kk * m..(kk + 1) * m].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for `a: [n, m]`, `b: [k, m]`.
fn matmul_a_bt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            out[i * k + j] = arow.iter().zip(&b[j * m..(j + 1) * m]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape().to_vec(), data).expect("gradient shape matches its input")
}

fn elementwise(x: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    like(x, x.data().iter().zip(g.data()).map(|(&a, &b)| f(a, b)).collect())
}

/// Sums a broadcast gradient back down to the shape of `small`.
fn reduce_to(g: &Tensor, small: &Tensor, scale: impl Fn(usize) -> f64) -> Tensor {
    let nb = small.len();
    let mut out = vec![0.0; nb];
    for (i, &v) in g.data().iter().enumerate() {
        out[i % nb] += v * scale(i);
    }
    like(small, out)
}

pub(crate) fn vjp(op: &Op, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = matmul_a_bt(g.data(), b.data(), n, m, k);
            let gb = matmul_at_b(a.data(), g.data(), n, k, m);
            vec![Some(like(a, ga)), Some(like(b, gb))]
        }
        Op::Add => vec![Some(g.clone()), Some(reduce_to(g, inputs[1], |_| 1.0))],
        Op::Sub => vec![Some(g.clone()), Some(reduce_to(g, inputs[1], |_| -1.0))],
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let nb = b.len();
            let ga = like(a, g.data().iter().enumerate().map(|(i, &v)| v * b.data()[i % nb]).collect());
            let gb = reduce_to(g, b, |i| a.data()[i]);
            vec![Some(ga), Some(gb)]
        }
        Op::Scale(c) => vec![Some(g.map(|v| v * c))],
        Op::Concat { axis } => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            inputs
                .iter()
                .map(|t| {
                    let n = t.shape()[*axis];
                    let mut data = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[base..base + n * inner]);
                    }
                    offset += n;
                    Some(like(t, data))
                })
                .collect()
        }
        Op::Slice { axis, start } => {
            let x = inputs[0];
            let (outer, n, inner) = axis_split(x.shape(), *axis);
            let width = out.shape()[*axis];
            let mut data = vec![0.0; x.len()];
            for o in 0..outer {
                let dst = o * n * inner + start * inner;
                data[dst..dst + width * inner].copy_from_slice(&g.data()[o * width * inner..(o + 1) * width * inner]);
            }
            vec![Some(like(x, data))]
        }
        Op::Reshape => vec![Some(like(inputs[0], g.data().to_vec()))],
        Op::Relu => vec![Some(elementwise(inputs[0], g, |x, g| if x > 0.0 { g } else { 0.0 }))],
        Op::Sigmoid => vec![Some(elementwise(out, g, |y, g| g * y * (1.0 - y)))],
        Op::Tanh => vec![Some(elementwise(out, g, |y, g| g * (1.0 - y * y)))],
        Op::Softplus => vec![Some(elementwise(inputs[0], g, |x, g| g * sigmoid(x)))],
        Op::Exp => vec![Some(elementwise(out, g, |y, g| g * y))],
        Op::Log => vec![Some(elementwise(inputs[0], g, |x, g| g / x))],
        Op::Clamp { lo, hi } => vec![Some(elementwise(inputs[0], g, |x, g| if x > *lo && x < *hi { g } else { 0.0 }))],
        Op::Softmax { axis } => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let (y, gd) = (out.data(), g.data());
            let mut data = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| o * n * inner + k * inner + i;
                    let dot: f64 = (0..n).map(|k| y[idx(k)] * gd[idx(k)]).sum();
                    for k in 0..n {
                        data[idx(k)] = y[idx(k)] * (gd[idx(k)] - dot);
                    }
                }
            }
            vec![Some(like(out, data))]
        }
        Op::Sum { axis } => {
            let x = inputs[0];
            match axis {
                None => vec![Some(like(x, vec![g.item(); x.len()]))],
                Some(axis) => {
                    let (outer, n, inner) = axis_split(x.shape(), *axis);
                    let mut data = vec![0.0; x.len()];
                    for o in 0..outer {
                        for k in 0..n {
                            data[(o * n + k) * inner..(o * n + k + 1) * inner]
                                .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                        }
                    }
                    vec![Some(like(x, data))]
                }
            }
        }
        Op::NormalizeRows => {
            let x = inputs[0];
            let k = x.shape()[1];
            let mut data = vec![0.0; x.len()];
            for ((dst, xr), (yr, gr)) in data
                .chunks_exact_mut(k)
                .zip(x.data().chunks_exact(k))
                .zip(out.data().chunks_exact(k).zip(g.data().chunks_exact(k)))
            {
                let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n < NORMALIZE_FALLBACK {
                    continue;
                }
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, &y), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                    *d = (gv - dot * y) / n;
                }
            }
            vec![Some(like(x, data))]
        }
        Op::Bilinear => {
            let (map, uv) = (inputs[0], inputs[1]);
            let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
            let mut gmap = vec![0.0; map.len()];
            let mut guv = vec![0.0; uv.len()];
            for (i, p) in uv.data().chunks_exact(2).enumerate() {
                let tap = BilinearTap::new(p[0], p[1], h, w);
                for ch in 0..c {
                    let gv = g.data()[i * c + ch];
                    if gv == 0.0 {
                        continue;
                    }
                    let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
                    let [du, dv] = tap.sample_grad_uv(plane, h, w);
                    guv[2 * i] += gv * du;
                    guv[2 * i + 1] += gv * dv;
                    tap.scatter(&mut gmap[ch * h * w..(ch + 1) * h * w], w, gv);
                }
            }
            vec![Some(like(map, gmap)), Some(like(uv, guv))]
        }
        Op::Custom(c) => c.backward(inputs, out, g),
    }
}
