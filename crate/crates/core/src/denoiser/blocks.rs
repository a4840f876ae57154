//! Residual and attention blocks.

use ndarray::{s, Array1, Array2, Array4, Axis, Zip};

use super::layers::{silu, silu_backward, Conv3d, GroupNorm, GroupNormCache, Linear};
use super::params::Layout;
use super::Real;

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub cout: usize,
    norm1: GroupNorm,
    conv1: Conv3d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv3d,
    skip: Option<Conv3d>,
}

pub struct ResCache<T> {
    x: Array4<T>,
    gn1: GroupNormCache<T>,
    h1: Array4<T>,
    a1: Array4<T>,
    gn2: GroupNormCache<T>,
    h2: Array4<T>,
    a2: Array4<T>,
}

impl ResBlock {
    pub fn new(layout: &mut Layout, name: &str, cin: usize, cout: usize, emb_dim: usize, groups: usize) -> Self {
        Self {
            cout,
            norm1: GroupNorm::new(layout, &format!("{name}.norm1"), cin, groups),
            conv1: Conv3d::new(layout, &format!("{name}.conv1"), cin, cout, 3, 1),
            emb: Linear::new(layout, &format!("{name}.emb"), emb_dim, cout),
            norm2: GroupNorm::new(layout, &format!("{name}.norm2"), cout, groups),
            conv2: Conv3d::new(layout, &format!("{name}.conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv3d::new(layout, &format!("{name}.skip"), cin, cout, 1, 1)),
        }
    }

    /// `emb` is the already-activated time embedding.
    pub fn forward<T: Real>(&self, p: &[T], x: &Array4<T>, emb: &Array1<T>, keep: bool) -> (Array4<T>, Option<ResCache<T>>) {
        let (h1, gn1) = self.norm1.forward(p, x);
        let a1 = silu(&h1);
        let mut h = self.conv1.forward(p, &a1);
        let e = self.emb.forward(p, emb);
        for (mut ch, &b) in h.axis_iter_mut(Axis(0)).zip(&e) {
            ch.mapv_inplace(|v| v + b);
        }
        let (h2, gn2) = self.norm2.forward(p, &h);
        drop(h);
        let a2 = silu(&h2);
        let mut y = self.conv2.forward(p, &a2);
        match &self.skip {
            Some(c) => y += &c.forward(p, x),
            None => y += x,
        }
        let cache = keep.then(|| ResCache {
            x: x.clone(),
            gn1,
            h1,
            a1,
            gn2,
            h2,
            a2,
        });
        (y, cache)
    }

    pub fn backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        cache: ResCache<T>,
        dy: &Array4<T>,
        emb: &Array1<T>,
        d_emb: &mut Array1<T>,
    ) -> Array4<T> {
        let mut dx = match &self.skip {
            Some(c) => c.backward(p, g, &cache.x, dy, true).unwrap(),
            None => dy.clone(),
        };
        let da2 = self.conv2.backward(p, g, &cache.a2, dy, true).unwrap();
        let dh2 = silu_backward(&cache.h2, &da2);
        drop(da2);
        let dh = self.norm2.backward(p, g, &cache.gn2, &dh2);
        drop(dh2);
        let de: Array1<T> = dh.axis_iter(Axis(0)).map(|c| c.sum()).collect();
        *d_emb += &self.emb.backward(p, g, emb, &de);
        let da1 = self.conv1.backward(p, g, &cache.a1, &dh, true).unwrap();
        let dh1 = silu_backward(&cache.h1, &da1);
        dx += &self.norm1.backward(p, g, &cache.gn1, &dh1);
        dx
    }
}

/// Single-head self-attention over all spatial positions.
#[derive(Clone, Debug)]
pub struct Attention {
    pub channels: usize,
    norm: GroupNorm,
    qkv: Conv3d,
    proj: Conv3d,
}

pub struct AttnCache<T> {
    gn: GroupNormCache<T>,
    h: Array4<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    attn: Array2<T>,
    o: Array4<T>,
}

impl Attention {
    pub fn new(layout: &mut Layout, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            channels,
            norm: GroupNorm::new(layout, &format!("{name}.norm"), channels, groups),
            qkv: Conv3d::new(layout, &format!("{name}.qkv"), channels, 3 * channels, 1, 1),
            proj: Conv3d::new(layout, &format!("{name}.proj"), channels, channels, 1, 1),
        }
    }

    fn scale<T: Real>(&self) -> T {
        T::one() / T::of(self.channels as f64).sqrt()
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Array4<T>, keep: bool) -> (Array4<T>, Option<AttnCache<T>>) {
        let (c, d, hh, w) = x.dim();
        let n = d * hh * w;
        let (h, gn) = self.norm.forward(p, x);
        let qkv = self.qkv.forward(p, &h).into_shape_with_order((3 * c, n)).unwrap();
        let q = qkv.slice(s![0..c, ..]).to_owned();
        let k = qkv.slice(s![c..2 * c, ..]).to_owned();
        let v = qkv.slice(s![2 * c.., ..]).to_owned();
        drop(qkv);
        let mut attn = q.t().dot(&k) * self.scale::<T>();
        for mut row in attn.rows_mut() {
            let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        let o = v.dot(&attn.t()).into_shape_with_order((c, d, hh, w)).unwrap();
        let y = x + &self.proj.forward(p, &o);
        let cache = keep.then(|| AttnCache {
            gn,
            h,
            q,
            k,
            v,
            attn,
            o,
        });
        (y, cache)
    }

    pub fn backward<T: Real>(&self, p: &[T], g: &mut [T], cache: AttnCache<T>, dy: &Array4<T>) -> Array4<T> {
        let (c, d, hh, w) = dy.dim();
        let n = d * hh * w;
        let do4 = self.proj.backward(p, g, &cache.o, dy, true).unwrap();
        let dout = do4.into_shape_with_order((c, n)).unwrap();
        let dv = dout.dot(&cache.attn);
        let da = dout.t().dot(&cache.v);
        let mut ds = da;
        Zip::from(ds.rows_mut()).and(cache.attn.rows()).for_each(|mut drow, arow| {
            let dot = drow.dot(&arow);
            Zip::from(&mut drow).and(&arow).for_each(|dv, &a| *dv = a * (*dv - dot));
        });
        let sc = self.scale::<T>();
        let dq = cache.k.dot(&ds.t()) * sc;
        let dk = cache.q.dot(&ds) * sc;
        let mut dqkv = Array2::zeros((3 * c, n));
        dqkv.slice_mut(s![0..c, ..]).assign(&dq);
        dqkv.slice_mut(s![c..2 * c, ..]).assign(&dk);
        dqkv.slice_mut(s![2 * c.., ..]).assign(&dv);
        let dqkv = dqkv.into_shape_with_order((3 * c, d, hh, w)).unwrap();
        let dh = self.qkv.backward(p, g, &cache.h, &dqkv, true).unwrap();
        dy + &self.norm.backward(p, g, &cache.gn, &dh)
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Res(ResBlock),
    Attn(Attention),
}

pub enum BlockCache<T> {
    Res(ResCache<T>),
    Attn(AttnCache<T>),
}

impl Block {
    pub fn forward<T: Real>(&self, p: &[T], x: &Array4<T>, emb: &Array1<T>, keep: bool) -> (Array4<T>, Option<BlockCache<T>>) {
        match self {
            Block::Res(b) => {
                let (y, c) = b.forward(p, x, emb, keep);
                (y, c.map(BlockCache::Res))
            }
            Block::Attn(b) => {
                let (y, c) = b.forward(p, x, keep);
                (y, c.map(BlockCache::Attn))
            }
        }
    }

    pub fn backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        cache: BlockCache<T>,
        dy: &Array4<T>,
        emb: &Array1<T>,
        d_emb: &mut Array1<T>,
    ) -> Array4<T> {
        match (self, cache) {
            (Block::Res(b), BlockCache::Res(c)) => b.backward(p, g, c, dy, emb, d_emb),
            (Block::Attn(b), BlockCache::Attn(c)) => b.backward(p, g, c, dy),
            _ => unreachable!("cache does not match block"),
        }
    }
}
