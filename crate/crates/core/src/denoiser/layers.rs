//! Layers with hand-written backward passes.
//!
//! Activations are `channels × D × H × W` arrays in standard layout. Every
//! `backward` accumulates parameter gradients into a flat slice laid out like
//! the parameters, and returns the gradient with respect to its input.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Dimension, Zip};

use super::params::{Init, Layout, Slot};
use super::Real;

fn std_layout<T: Real>(x: &Array4<T>) -> std::borrow::Cow<'_, [T]> {
    match x.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().copied().collect()),
    }
}

/// 3D convolution with cubic kernel, symmetric zero padding `kernel / 2`.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Conv3d {
    pub fn new(layout: &mut Layout, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = cin * kernel.pow(3);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = layout.add(format!("{name}.weight"), &[cout, cin, kernel, kernel, kernel], Init::Uniform(bound));
        let bias = layout.add(format!("{name}.bias"), &[cout], Init::Uniform(bound));
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            weight,
            bias,
        }
    }

    pub fn output_shape(&self, s: [usize; 3]) -> [usize; 3] {
        s.map(|n| (n + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    fn rows(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }

    fn im2col<T: Real>(&self, x: &Array4<T>) -> Array2<T> {
        let (c, d, h, w) = x.dim();
        debug_assert_eq!(c, self.cin);
        let [od, oh, ow] = self.output_shape([d, h, w]);
        let n = od * oh * ow;
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        if k == 1 && s == 1 {
            return Array2::from_shape_vec((c, n), std_layout(x).into_owned()).unwrap();
        }
        let xs = std_layout(x);
        let mut col = vec![T::zero(); self.rows() * n];
        for ci in 0..c {
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = ((ci * k + kd) * k + kh) * k + kw;
                        let dst = &mut col[row * n..(row + 1) * n];
                        for oz in 0..od {
                            let iz = (oz * s + kd) as isize - p;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * s + kh) as isize - p;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let src = ((ci * d + iz as usize) * h + iy as usize) * w;
                                let base = (oz * oh + oy) * ow;
                                if s == 1 {
                                    // ix = ox + kw - p, valid for ox in [lo, hi)
                                    let shift = kw as isize - p;
                                    let lo = (-shift).max(0) as usize;
                                    let hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                                    if lo < hi {
                                        let a = (lo as isize + shift) as usize;
                                        dst[base + lo..base + hi]
                                            .copy_from_slice(&xs[src + a..src + a + (hi - lo)]);
                                    }
                                } else {
                                    for ox in 0..ow {
                                        let ix = (ox * s + kw) as isize - p;
                                        if ix >= 0 && ix < w as isize {
                                            dst[base + ox] = xs[src + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((self.rows(), n), col).unwrap()
    }

    fn col2im<T: Real>(&self, col: &Array2<T>, in_shape: [usize; 3]) -> Array4<T> {
        let [d, h, w] = in_shape;
        let c = self.cin;
        let [od, oh, ow] = self.output_shape(in_shape);
        let n = od * oh * ow;
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        if k == 1 && s == 1 {
            return col.to_owned().into_shape_with_order((c, d, h, w)).unwrap();
        }
        let cs = col.as_slice().expect("standard layout");
        let mut out = vec![T::zero(); c * d * h * w];
        for ci in 0..c {
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = ((ci * k + kd) * k + kh) * k + kw;
                        let srcrow = &cs[row * n..(row + 1) * n];
                        for oz in 0..od {
                            let iz = (oz * s + kd) as isize - p;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * s + kh) as isize - p;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let dst = ((ci * d + iz as usize) * h + iy as usize) * w;
                                let base = (oz * oh + oy) * ow;
                                for ox in 0..ow {
                                    let ix = (ox * s + kw) as isize - p;
                                    if ix >= 0 && ix < w as isize {
                                        out[dst + ix as usize] += srcrow[base + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Array4::from_shape_vec((c, d, h, w), out).unwrap()
    }

    fn weight_view<'a, T: Real>(&self, p: &'a [T]) -> ArrayView2<'a, T> {
        ArrayView2::from_shape((self.cout, self.rows()), &p[self.weight.range()]).unwrap()
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Array4<T>) -> Array4<T> {
        let (_, d, h, w) = x.dim();
        let [od, oh, ow] = self.output_shape([d, h, w]);
        let col = self.im2col(x);
        let mut y = self.weight_view(p).dot(&col);
        let bias = &p[self.bias.range()];
        for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(bias) {
            row.mapv_inplace(|v| v + b);
        }
        y.into_shape_with_order((self.cout, od, oh, ow)).unwrap()
    }

    /// Returns the input gradient only when `need_dx`.
    pub fn backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        x: &Array4<T>,
        dy: &Array4<T>,
        need_dx: bool,
    ) -> Option<Array4<T>> {
        let (_, d, h, w) = x.dim();
        let n = dy.len() / self.cout;
        let dy_s = std_layout(dy);
        let dy2 = ArrayView2::from_shape((self.cout, n), &dy_s).unwrap();
        let col = self.im2col(x);
        {
            let mut gw = ArrayViewMut2::from_shape((self.cout, self.rows()), &mut g[self.weight.range()]).unwrap();
            general_mat_mul(T::one(), &dy2, &col.t(), T::one(), &mut gw);
        }
        let mut gb = ArrayViewMut1::from_shape(self.cout, &mut g[self.bias.range()]).unwrap();
        Zip::from(&mut gb).and(dy2.rows()).for_each(|b, row| *b += row.sum());
        drop(col);
        if !need_dx {
            return None;
        }
        let dcol = self.weight_view(p).t().dot(&dy2);
        Some(self.col2im(&dcol, [d, h, w]))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub din: usize,
    pub dout: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Linear {
    pub fn new(layout: &mut Layout, name: &str, din: usize, dout: usize) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Self {
            din,
            dout,
            weight: layout.add(format!("{name}.weight"), &[dout, din], Init::Uniform(bound)),
            bias: layout.add(format!("{name}.bias"), &[dout], Init::Uniform(bound)),
        }
    }

    fn weight_view<'a, T: Real>(&self, p: &'a [T]) -> ArrayView2<'a, T> {
        ArrayView2::from_shape((self.dout, self.din), &p[self.weight.range()]).unwrap()
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Array1<T>) -> Array1<T> {
        self.weight_view(p).dot(x) + &ArrayView1::from(&p[self.bias.range()])
    }

    pub fn backward<T: Real>(&self, p: &[T], g: &mut [T], x: &Array1<T>, dy: &Array1<T>) -> Array1<T> {
        {
            let mut gw = ArrayViewMut2::from_shape((self.dout, self.din), &mut g[self.weight.range()]).unwrap();
            Zip::from(gw.rows_mut()).and(dy).for_each(|mut row, &d| row.scaled_add(d, x));
        }
        for (gb, &d) in g[self.bias.range()].iter_mut().zip(dy) {
            *gb += d;
        }
        self.weight_view(p).t().dot(dy)
    }
}

/// Group normalization with per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Slot,
    pub beta: Slot,
}

pub struct GroupNormCache<T> {
    xhat: Array4<T>,
    inv_std: Vec<T>,
}

pub const NORM_EPS: f64 = 1e-5;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

impl GroupNorm {
    /// Uses `gcd(channels, max_groups)` groups so the split is always even.
    pub fn new(layout: &mut Layout, name: &str, channels: usize, max_groups: usize) -> Self {
        Self {
            groups: gcd(channels, max_groups.max(1)),
            gamma: layout.add(format!("{name}.gamma"), &[channels], Init::Constant(1.0)),
            beta: layout.add(format!("{name}.beta"), &[channels], Init::Constant(0.0)),
        }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Array4<T>) -> (Array4<T>, GroupNormCache<T>) {
        let (c, d, h, w) = x.dim();
        let spatial = d * h * w;
        let cpg = c / self.groups;
        let group_len = cpg * spatial;
        let xs = std_layout(x);
        let gamma = &p[self.gamma.range()];
        let beta = &p[self.beta.range()];
        let mut xhat = vec![T::zero(); xs.len()];
        let mut y = vec![T::zero(); xs.len()];
        let mut inv_std = Vec::with_capacity(self.groups);
        let eps = T::of(NORM_EPS);
        let inv_n = T::one() / T::of(group_len as f64);
        for gi in 0..self.groups {
            let r = gi * group_len..(gi + 1) * group_len;
            let xg = &xs[r.clone()];
            let mean = xg.iter().copied().sum::<T>() * inv_n;
            let var = xg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, (&v, xh)) in xg.iter().zip(&mut xhat[r.clone()]).enumerate() {
                *xh = (v - mean) * is;
                let ch = gi * cpg + j / spatial;
                y[r.start + j] = *xh * gamma[ch] + beta[ch];
            }
        }
        let shape = (c, d, h, w);
        (
            Array4::from_shape_vec(shape, y).unwrap(),
            GroupNormCache {
                xhat: Array4::from_shape_vec(shape, xhat).unwrap(),
                inv_std,
            },
        )
    }

    pub fn backward<T: Real>(&self, p: &[T], g: &mut [T], cache: &GroupNormCache<T>, dy: &Array4<T>) -> Array4<T> {
        let (c, d, h, w) = dy.dim();
        let spatial = d * h * w;
        let cpg = c / self.groups;
        let group_len = cpg * spatial;
        let dys = std_layout(dy);
        let xh = cache.xhat.as_slice().unwrap();
        let gamma = &p[self.gamma.range()];
        for ch in 0..c {
            let r = ch * spatial..(ch + 1) * spatial;
            let (mut dg, mut db) = (T::zero(), T::zero());
            for (&a, &b) in dys[r.clone()].iter().zip(&xh[r]) {
                dg += a * b;
                db += a;
            }
            g[self.gamma.offset + ch] += dg;
            g[self.beta.offset + ch] += db;
        }
        let inv_n = T::one() / T::of(group_len as f64);
        let mut dx = vec![T::zero(); dys.len()];
        for gi in 0..self.groups {
            let r = gi * group_len..(gi + 1) * group_len;
            let (mut mean_dxh, mut mean_dxh_xh) = (T::zero(), T::zero());
            for j in r.clone() {
                let dxh = dys[j] * gamma[j / spatial];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
            }
            mean_dxh = mean_dxh * inv_n;
            mean_dxh_xh = mean_dxh_xh * inv_n;
            let is = cache.inv_std[gi];
            for j in r {
                let dxh = dys[j] * gamma[j / spatial];
                dx[j] = is * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        Array4::from_shape_vec((c, d, h, w), dx).unwrap()
    }
}

pub fn silu<T: Real, D: Dimension>(x: &Array<T, D>) -> Array<T, D> {
    x.mapv(|v| v / (T::one() + (-v).exp()))
}

pub fn silu_backward<T: Real, D: Dimension>(x: &Array<T, D>, dy: &Array<T, D>) -> Array<T, D> {
    let mut out = dy.clone();
    Zip::from(&mut out).and(x).for_each(|o, &v| {
        let s = T::one() / (T::one() + (-v).exp());
        *o = *o * (s + v * s * (T::one() - s));
    });
    out
}

/// Nearest-neighbour ×2 along every spatial axis.
pub fn upsample2<T: Real>(x: &Array4<T>) -> Array4<T> {
    let (c, d, h, w) = x.dim();
    Array4::from_shape_fn((c, 2 * d, 2 * h, 2 * w), |(ci, z, y, xx)| x[[ci, z / 2, y / 2, xx / 2]])
}

pub fn upsample2_backward<T: Real>(dy: &Array4<T>) -> Array4<T> {
    let (c, d, h, w) = dy.dim();
    let mut out = Array4::zeros((c, d / 2, h / 2, w / 2));
    for ((ci, z, y, x), &v) in dy.indexed_iter() {
        out[[ci, z / 2, y / 2, x / 2]] += v;
    }
    out
}

/// Sinusoidal features of a (possibly fractional) timestep.
pub fn timestep_features<T: Real>(t: f64, dim: usize) -> Array1<T> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = T::of((t * freq).cos());
        out[half + i] = T::of((t * freq).sin());
    }
    out
}
