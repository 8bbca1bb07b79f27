//! Single-sample reverse-mode tape over `(channels, height, width)` tensors.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tomography::RayTransform;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.plane()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Values and, after [`Tape::backward`], the gradient of the seeded output.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    pub shape: Shape,
    pub values: Vec<T>,
    pub grad: Vec<T>,
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    /// Slice `offset..offset+len` of the flat parameter vector.
    Param { offset: usize },
    Conv { x: Var, w: Var, b: Var, cols: Vec<T> },
    Prelu { x: Var, slope: Var },
    Add { a: Var, b: Var },
    Concat { parts: Vec<Var> },
    Slice { x: Var, from: usize },
    Project { x: Var, scale: f64, ray: Arc<RayTransform> },
    Backproject { x: Var, scale: f64, ray: Arc<RayTransform> },
}

#[derive(Debug)]
struct Node<T> {
    tensor: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn im2col<T: Scalar>(x: &[T], shape: Shape, cols: &mut [T]) {
    let (h, w) = (shape.height, shape.width);
    let plane = h * w;
    for c in 0..shape.channels {
        let src = &x[c * plane..(c + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * plane..][..plane];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &src[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = T::zero();
                            out[1..].copy_from_slice(&line[..w - 1]);
                        }
                        1 => out.copy_from_slice(line),
                        _ => {
                            out[..w - 1].copy_from_slice(&line[1..]);
                            out[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], shape: Shape, dx: &mut [T]) {
    let (h, w) = (shape.height, shape.width);
    let plane = h * w;
    for c in 0..shape.channels {
        let dst = &mut dx[c * plane..(c + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(c * 9 + ky * 3 + kx) * plane..][..plane];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let line = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => line[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
                        1 => line.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => line[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].tensor.shape
    }

    pub fn values(&self, v: Var) -> &[T] {
        &self.nodes[v.0].tensor.values
    }

    pub fn tensor(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    fn push(&mut self, shape: Shape, values: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(values.len(), shape.len());
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                values,
                grad: Vec::new(),
            },
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, shape: Shape, values: Vec<T>) -> Result<Var> {
        if values.len() != shape.len() {
            return Err(Error::Contract(format!(
                "input has {} values for shape {shape:?}",
                values.len()
            )));
        }
        Ok(self.push(shape, values, Op::Input))
    }

    /// Leaf copied from `params[offset..offset + shape.len()]`.
    pub fn param(&mut self, params: &[T], offset: usize, shape: Shape) -> Var {
        let values = params[offset..offset + shape.len()].to_vec();
        self.push(shape, values, Op::Param { offset })
    }

    /// 3x3 convolution with zero padding; `w` is `(out, in, 3, 3)` flattened into the
    /// channel axis of its shape, `b` has one value per output channel.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let cout = self.shape(b).len();
        let k = xs.channels * 9;
        if self.shape(w).len() != cout * k {
            return Err(Error::Contract(format!(
                "conv weight has {} entries, expected {cout} x {} x 3 x 3",
                self.shape(w).len(),
                xs.channels
            )));
        }
        let n = xs.plane();
        let mut cols = vec![T::zero(); k * n];
        im2col(self.values(x), xs, &mut cols);
        let mut out = vec![T::zero(); cout * n];
        for (o, bias) in self.values(b).iter().enumerate() {
            out[o * n..(o + 1) * n].fill(*bias);
        }
        T::gemm(
            cout,
            k,
            n,
            T::one(),
            self.values(w),
            k as isize,
            1,
            &cols,
            n as isize,
            1,
            T::one(),
            &mut out,
            n as isize,
            1,
        );
        let shape = Shape::new(cout, xs.height, xs.width);
        Ok(self.push(shape, out, Op::Conv { x, w, b, cols }))
    }

    /// Channelwise `max(x, 0) + slope * min(x, 0)`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let xs = self.shape(x);
        if self.shape(slope).len() != xs.channels {
            return Err(Error::Contract("PReLU needs one slope per channel".into()));
        }
        let plane = xs.plane();
        let a = self.values(slope).to_vec();
        let out = self
            .values(x)
            .iter()
            .enumerate()
            .map(|(k, &v)| if v > T::zero() { v } else { a[k / plane] * v })
            .collect();
        Ok(self.push(xs, out, Op::Prelu { x, slope }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a);
        if s != self.shape(b) {
            return Err(Error::Contract(format!(
                "cannot add {s:?} and {:?}",
                self.shape(b)
            )));
        }
        let out = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| *x + *y)
            .collect();
        Ok(self.push(s, out, Op::Add { a, b }))
    }

    /// Stack along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]);
        let mut channels = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if (s.height, s.width) != (first.height, first.width) {
                return Err(Error::Contract(format!(
                    "cannot concatenate {first:?} with {s:?}"
                )));
            }
            channels += s.channels;
            out.extend_from_slice(self.values(p));
        }
        let shape = Shape::new(channels, first.height, first.width);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Channels `from..to`.
    pub fn slice(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let s = self.shape(x);
        if !(from < to && to <= s.channels) {
            return Err(Error::Contract(format!(
                "channel range {from}..{to} outside {} channels",
                s.channels
            )));
        }
        let plane = s.plane();
        let out = self.values(x)[from * plane..to * plane].to_vec();
        Ok(self.push(Shape::new(to - from, s.height, s.width), out, Op::Slice { x, from }))
    }

    /// `scale · 𝒜x` for a single-channel image.
    pub fn project(&mut self, x: Var, ray: &Arc<RayTransform>, scale: f64) -> Result<Var> {
        let s = self.shape(x);
        let g = ray.grid();
        if s != Shape::new(1, g.height(), g.width()) {
            return Err(Error::Contract(format!(
                "projection input {s:?} does not match a {}x{} grid",
                g.width(),
                g.height()
            )));
        }
        let geom = ray.geometry();
        let mut y = vec![T::zero(); geom.len()];
        ray.forward_into(self.values(x), &mut y);
        let k = T::lit(scale);
        y.iter_mut().for_each(|v| *v *= k);
        Ok(self.push(
            Shape::new(1, geom.angles(), geom.detectors()),
            y,
            Op::Project {
                x,
                scale,
                ray: Arc::clone(ray),
            },
        ))
    }

    /// `scale · 𝒜ᵀy` for a single-channel sinogram.
    pub fn backproject(&mut self, y: Var, ray: &Arc<RayTransform>, scale: f64) -> Result<Var> {
        let s = self.shape(y);
        let geom = ray.geometry();
        if s != Shape::new(1, geom.angles(), geom.detectors()) {
            return Err(Error::Contract(format!(
                "backprojection input {s:?} does not match the geometry"
            )));
        }
        let g = ray.grid();
        let mut x = vec![T::zero(); g.len()];
        ray.adjoint_into(self.values(y), &mut x);
        let k = T::lit(scale);
        x.iter_mut().for_each(|v| *v *= k);
        Ok(self.push(
            Shape::new(1, g.height(), g.width()),
            x,
            Op::Backproject {
                x: y,
                scale,
                ray: Arc::clone(ray),
            },
        ))
    }

    /// Propagate `seed` (the gradient at `output`) back through the tape and return the
    /// accumulated gradient of every parameter leaf, laid out like the flat parameter
    /// vector of length `param_len`.
    pub fn backward(&mut self, output: Var, seed: &[T], param_len: usize) -> Result<Vec<T>> {
        if seed.len() != self.shape(output).len() {
            return Err(Error::Contract("seed does not match the output shape".into()));
        }
        for node in &mut self.nodes {
            node.tensor.grad = vec![T::zero(); node.tensor.values.len()];
        }
        self.nodes[output.0].tensor.grad.copy_from_slice(seed);
        let mut params = vec![T::zero(); param_len];
        for idx in (0..=output.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &rest[0];
            let dy = &node.tensor.grad;
            if dy.iter().all(|g| *g == T::zero()) {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    for (p, g) in params[*offset..].iter_mut().zip(dy) {
                        *p += *g;
                    }
                }
                Op::Conv { x, w, b, cols } => {
                    let xs = before[x.0].tensor.shape;
                    let n = xs.plane();
                    let k = xs.channels * 9;
                    let cout = node.tensor.shape.channels;
                    {
                        let db = &mut before[b.0].tensor.grad;
                        for o in 0..cout {
                            db[o] += dy[o * n..(o + 1) * n].iter().copied().sum::<T>();
                        }
                    }
                    T::gemm(
                        cout,
                        n,
                        k,
                        T::one(),
                        dy,
                        n as isize,
                        1,
                        cols,
                        1,
                        n as isize,
                        T::one(),
                        &mut before[w.0].tensor.grad,
                        k as isize,
                        1,
                    );
                    let mut dcols = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        cout,
                        n,
                        T::one(),
                        &before[w.0].tensor.values,
                        1,
                        k as isize,
                        dy,
                        n as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        n as isize,
                        1,
                    );
                    col2im_add(&dcols, xs, &mut before[x.0].tensor.grad);
                }
                Op::Prelu { x, slope } => {
                    let plane = node.tensor.shape.plane();
                    let a = before[slope.0].tensor.values.clone();
                    let mut da = vec![T::zero(); a.len()];
                    let xt = &mut before[x.0].tensor;
                    for (k, g) in dy.iter().enumerate() {
                        let v = xt.values[k];
                        if v > T::zero() {
                            xt.grad[k] += *g;
                        } else {
                            xt.grad[k] += a[k / plane] * *g;
                            da[k / plane] += v * *g;
                        }
                    }
                    for (d, s) in before[slope.0].tensor.grad.iter_mut().zip(da) {
                        *d += s;
                    }
                }
                Op::Add { a, b } => {
                    for v in [a, b] {
                        for (d, g) in before[v.0].tensor.grad.iter_mut().zip(dy) {
                            *d += *g;
                        }
                    }
                }
                Op::Concat { parts } => {
                    let mut at = 0;
                    for p in parts {
                        let t = &mut before[p.0].tensor;
                        let len = t.values.len();
                        for (d, g) in t.grad.iter_mut().zip(&dy[at..at + len]) {
                            *d += *g;
                        }
                        at += len;
                    }
                }
                Op::Slice { x, from } => {
                    let t = &mut before[x.0].tensor;
                    let at = from * t.shape.plane();
                    for (d, g) in t.grad[at..].iter_mut().zip(dy) {
                        *d += *g;
                    }
                }
                Op::Project { x, scale, ray } => {
                    let t = &mut before[x.0].tensor;
                    let mut back = vec![T::zero(); t.values.len()];
                    ray.adjoint_into(dy, &mut back);
                    let k = T::lit(*scale);
                    for (d, g) in t.grad.iter_mut().zip(back) {
                        *d += k * g;
                    }
                }
                Op::Backproject { x, scale, ray } => {
                    let t = &mut before[x.0].tensor;
                    let mut fwd = vec![T::zero(); t.values.len()];
                    ray.forward_into(dy, &mut fwd);
                    let k = T::lit(*scale);
                    for (d, g) in t.grad.iter_mut().zip(fwd) {
                        *d += k * g;
                    }
                }
            }
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PixelGrid;
    use crate::rng::SeededRng;
    use crate::tomography::ParallelBeamGeometry;

    fn random(rng: &mut SeededRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| 2.0 * rng.next_f64() - 1.0).collect()
    }

    /// Direct-loop convolution oracle.
    fn conv_naive(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], b: &[f64]) -> Vec<f64> {
        let cout = b.len();
        let mut out = vec![0.0; cout * h * w];
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky - 1, xx as isize + kx - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += wt[((o * cin + c) * 3 + ky as usize) * 3 + kx as usize]
                                    * x[(c * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(o * h + y) * w + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = SeededRng::new(1, 0);
        let (cin, cout, h, w) = (3, 4, 5, 7);
        let x = random(&mut rng, cin * h * w);
        let params = random(&mut rng, cout * cin * 9 + cout);
        let mut tape = Tape::<f64>::new();
        let xv = tape.input(Shape::new(cin, h, w), x.clone()).unwrap();
        let wv = tape.param(&params, 0, Shape::new(cout * cin * 9, 1, 1));
        let bv = tape.param(&params, cout * cin * 9, Shape::new(cout, 1, 1));
        let y = tape.conv3x3(xv, wv, bv).unwrap();
        let want = conv_naive(&x, cin, h, w, &params[..cout * cin * 9], &params[cout * cin * 9..]);
        for (a, b) in tape.values(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    type Build<'a> = dyn Fn(&mut Tape<f64>, &[f64], Var) -> Var + 'a;

    /// Gradient of `Σ seed · out` wrt the input leaf and all params, against central
    /// differences through `build`.
    fn check_grads(
        build: &Build<'_>,
        in_shape: Shape,
        n_params: usize,
        seed: u64,
    ) {
        let mut rng = SeededRng::new(seed, 0);
        let x = random(&mut rng, in_shape.len());
        let params = random(&mut rng, n_params);
        let eval = |x: &[f64], p: &[f64]| -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let xv = tape.input(in_shape, x.to_vec()).unwrap();
            let out = build(&mut tape, p, xv);
            let weights: Vec<f64> = (0..tape.shape(out).len())
                .map(|k| ((k * 7919) % 13) as f64 / 13.0 - 0.4)
                .collect();
            let val = tape.values(out).iter().zip(&weights).map(|(a, b)| a * b).sum();
            let gp = tape.backward(out, &weights, p.len()).unwrap();
            let gx = tape.tensor(xv).grad.clone();
            (val, gp, gx, weights)
        };
        let (_, gp, gx, _) = eval(&x, &params);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let scale = gp.iter().chain(&gx).fold(0.0f64, |m, g| m.max(g.abs()));
        for k in 0..n_params {
            let (mut pp, mut pm) = (params.clone(), params.clone());
            pp[k] += h;
            pm[k] -= h;
            let fd = (eval(&x, &pp).0 - eval(&x, &pm).0) / (2.0 * h);
            worst = worst.max((fd - gp[k]).abs());
        }
        for k in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[k] += h;
            xm[k] -= h;
            let fd = (eval(&xp, &params).0 - eval(&xm, &params).0) / (2.0 * h);
            worst = worst.max((fd - gx[k]).abs());
        }
        assert!(worst <= 1e-7 * scale.max(1.0), "worst abs error {worst}, scale {scale}");
    }

    #[test]
    fn conv_gradient() {
        let (cin, cout) = (2, 3);
        let nw = cout * cin * 9;
        for seed in 0..20 {
            check_grads(
                &|t, p, x| {
                    let w = t.param(p, 0, Shape::new(nw, 1, 1));
                    let b = t.param(p, nw, Shape::new(cout, 1, 1));
                    t.conv3x3(x, w, b).unwrap()
                },
                Shape::new(cin, 4, 5),
                nw + cout,
                seed,
            );
        }
    }

    #[test]
    fn prelu_gradient() {
        for seed in 0..20 {
            check_grads(
                &|t, p, x| {
                    let a = t.param(p, 0, Shape::new(3, 1, 1));
                    t.prelu(x, a).unwrap()
                },
                Shape::new(3, 4, 4),
                3,
                seed,
            );
        }
    }

    #[test]
    fn add_concat_slice_gradient() {
        for seed in 0..20 {
            check_grads(
                &|t, p, x| {
                    let q = t.param(p, 0, Shape::new(2, 3, 3));
                    let s = t.slice(x, 1, 3).unwrap();
                    let a = t.add(s, q).unwrap();
                    t.concat(&[a, x, a]).unwrap()
                },
                Shape::new(3, 3, 3),
                18,
                seed,
            );
        }
    }

    #[test]
    fn operator_nodes_gradient_and_adjointness() {
        let grid = PixelGrid::square(8).unwrap();
        let ray = Arc::new(RayTransform::new(grid, ParallelBeamGeometry::new(5, 11, 1.0).unwrap()));
        for seed in 0..20 {
            let r2 = Arc::clone(&ray);
            check_grads(
                &move |t, p, x| {
                    let w = t.param(p, 0, Shape::new(1, 8, 8));
                    let xw = t.add(x, w).unwrap();
                    let y = t.project(xw, &r2, 0.5).unwrap();
                    t.backproject(y, &r2, 2.0).unwrap()
                },
                Shape::new(1, 8, 8),
                64,
                seed,
            );
        }
        let mut rng = SeededRng::new(8, 0);
        let f = random(&mut rng, 64);
        let g = random(&mut rng, 55);
        let mut tape = Tape::new();
        let fv = tape.input(Shape::new(1, 8, 8), f.clone()).unwrap();
        let y = tape.project(fv, &ray, 1.0).unwrap();
        let lhs: f64 = tape.values(y).iter().zip(&g).map(|(a, b)| a * b).sum();
        tape.backward(y, &g, 0).unwrap();
        let rhs: f64 = tape.tensor(fv).grad.iter().zip(&f).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(Shape::new(1, 2, 2), vec![0.0; 4]).unwrap();
        let b = tape.input(Shape::new(2, 2, 2), vec![0.0; 8]).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::Contract(_))));
        assert!(tape.slice(a, 0, 2).is_err());
        assert!(tape.input(Shape::new(1, 2, 2), vec![0.0; 3]).is_err());
    }
}
