use ndarray::{concatenate, s, Array1, Array4, Axis};

use super::blocks::{Attention, Block, BlockCache, ResBlock};
use super::layers::{silu, silu_backward, timestep_features, upsample2, upsample2_backward, Conv3d, GroupNorm, GroupNormCache, Linear};
use super::params::Layout;
use super::{DenoiserConfig, Real, SkipMode};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub(crate) struct UNet {
    skip_mode: SkipMode,
    base: usize,
    time1: Linear,
    time2: Linear,
    input: Conv3d,
    enc: Vec<Vec<Block>>,
    down: Vec<Conv3d>,
    mid: Vec<Block>,
    dec: Vec<Vec<Block>>,
    /// `up[i]` maps decoder level `i` to level `i - 1`; `up[0]` is unused.
    up: Vec<Option<Conv3d>>,
    out_norm: GroupNorm,
    out_conv: Conv3d,
}

pub(crate) struct Tape<T> {
    feat: Array1<T>,
    e1: Array1<T>,
    a1: Array1<T>,
    e2: Array1<T>,
    emb: Array1<T>,
    x: Array4<T>,
    enc: Vec<Vec<BlockCache<T>>>,
    down_in: Vec<Array4<T>>,
    mid: Vec<BlockCache<T>>,
    dec: Vec<Vec<BlockCache<T>>>,
    up_in: Vec<Option<Array4<T>>>,
    out_gn: GroupNormCache<T>,
    out_h: Array4<T>,
    out_a: Array4<T>,
}

fn run_blocks<T: Real>(
    blocks: &[Block],
    p: &[T],
    mut h: Array4<T>,
    emb: &Array1<T>,
    keep: bool,
    caches: &mut Vec<BlockCache<T>>,
) -> Array4<T> {
    for b in blocks {
        let (y, c) = b.forward(p, &h, emb, keep);
        if let Some(c) = c {
            caches.push(c);
        }
        h = y;
    }
    h
}

fn back_blocks<T: Real>(
    blocks: &[Block],
    p: &[T],
    g: &mut [T],
    caches: Vec<BlockCache<T>>,
    mut d: Array4<T>,
    emb: &Array1<T>,
    d_emb: &mut Array1<T>,
) -> Array4<T> {
    for (b, c) in blocks.iter().zip(caches).rev() {
        d = b.backward(p, g, c, &d, emb, d_emb);
    }
    d
}

impl UNet {
    pub fn build(cfg: &DenoiserConfig, layout: &mut Layout) -> Result<Self> {
        let c = cfg.base_channels;
        let e = cfg.embedding_dim();
        let gr = cfg.norm_groups;
        let levels = cfg.depth_levels;
        let widths: Vec<usize> = cfg.channel_multipliers.iter().map(|m| c * m).collect();
        let attn = |lvl: usize| cfg.attention_levels.contains(&lvl);

        let time1 = Linear::new(layout, "time.0", c, e);
        let time2 = Linear::new(layout, "time.2", e, e);
        let input = Conv3d::new(layout, "input", cfg.in_channels, widths[0], 3, 1);

        let mut enc = Vec::new();
        let mut down = Vec::new();
        let mut cur = widths[0];
        for (lvl, &w) in widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for r in 0..cfg.num_res_blocks {
                blocks.push(Block::Res(ResBlock::new(layout, &format!("enc{lvl}.res{r}"), cur, w, e, gr)));
                cur = w;
                if attn(lvl) {
                    blocks.push(Block::Attn(Attention::new(layout, &format!("enc{lvl}.attn{r}"), w, gr)));
                }
            }
            enc.push(blocks);
            if lvl + 1 < levels {
                down.push(Conv3d::new(layout, &format!("down{lvl}"), w, w, 3, 2));
            }
        }

        let deepest = widths[levels - 1];
        let mut mid = vec![Block::Res(ResBlock::new(layout, "mid.res0", deepest, deepest, e, gr))];
        if attn(levels - 1) {
            mid.push(Block::Attn(Attention::new(layout, "mid.attn", deepest, gr)));
        }
        mid.push(Block::Res(ResBlock::new(layout, "mid.res1", deepest, deepest, e, gr)));

        let mut dec: Vec<Vec<Block>> = (0..levels).map(|_| Vec::new()).collect();
        let mut up: Vec<Option<Conv3d>> = (0..levels).map(|_| None).collect();
        let mut cur = deepest;
        for lvl in (0..levels).rev() {
            let w = widths[lvl];
            if cur != w {
                return Err(Error::Config(format!(
                    "decoder level {lvl} receives {cur} channels but its skip has {w}"
                )));
            }
            let combined = match cfg.skip_mode {
                SkipMode::Concatenation => 2 * w,
                SkipMode::Additive => w,
            };
            let mut blocks = Vec::new();
            let mut bin = combined;
            for r in 0..cfg.num_res_blocks {
                blocks.push(Block::Res(ResBlock::new(layout, &format!("dec{lvl}.res{r}"), bin, w, e, gr)));
                bin = w;
                if attn(lvl) {
                    blocks.push(Block::Attn(Attention::new(layout, &format!("dec{lvl}.attn{r}"), w, gr)));
                }
            }
            dec[lvl] = blocks;
            if lvl > 0 {
                up[lvl] = Some(Conv3d::new(layout, &format!("up{lvl}"), w, widths[lvl - 1], 3, 1));
                cur = widths[lvl - 1];
            }
        }

        let out_norm = GroupNorm::new(layout, "out.norm", widths[0], gr);
        let out_conv = Conv3d::new(layout, "out.conv", widths[0], cfg.out_channels, 3, 1);
        Ok(Self {
            skip_mode: cfg.skip_mode,
            base: c,
            time1,
            time2,
            input,
            enc,
            down,
            mid,
            dec,
            up,
            out_norm,
            out_conv,
        })
    }

    fn combine<T: Real>(&self, x: Array4<T>, skip: &Array4<T>) -> Array4<T> {
        match self.skip_mode {
            SkipMode::Concatenation => concatenate(Axis(0), &[x.view(), skip.view()]).unwrap(),
            SkipMode::Additive => x + skip,
        }
    }

    /// Returns `(d_x, d_skip)` given the gradient at the combined tensor.
    fn split<T: Real>(&self, d: Array4<T>, width: usize) -> (Array4<T>, Array4<T>) {
        match self.skip_mode {
            SkipMode::Concatenation => (
                d.slice(s![..width, .., .., ..]).to_owned(),
                d.slice(s![width.., .., .., ..]).to_owned(),
            ),
            SkipMode::Additive => (d.clone(), d),
        }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Array4<T>, t: f64, keep: bool) -> (Array4<T>, Option<Tape<T>>) {
        let levels = self.enc.len();
        let feat: Array1<T> = timestep_features(t, self.base);
        let e1 = self.time1.forward(p, &feat);
        let a1 = silu(&e1);
        let e2 = self.time2.forward(p, &a1);
        let emb = silu(&e2);

        let mut enc_c: Vec<Vec<BlockCache<T>>> = Vec::new();
        let mut down_in = Vec::new();
        let mut skips = Vec::with_capacity(levels);
        let mut h = self.input.forward(p, x);
        for lvl in 0..levels {
            let mut caches = Vec::new();
            h = run_blocks(&self.enc[lvl], p, h, &emb, keep, &mut caches);
            enc_c.push(caches);
            if lvl + 1 < levels {
                let next = self.down[lvl].forward(p, &h);
                skips.push(h);
                if keep {
                    down_in.push(skips[lvl].clone());
                }
                h = next;
            } else {
                skips.push(h.clone());
            }
        }

        let mut mid_c = Vec::new();
        h = run_blocks(&self.mid, p, h, &emb, keep, &mut mid_c);

        let mut dec_c: Vec<Vec<BlockCache<T>>> = (0..levels).map(|_| Vec::new()).collect();
        let mut up_in: Vec<Option<Array4<T>>> = (0..levels).map(|_| None).collect();
        for lvl in (0..levels).rev() {
            let skip = skips.pop().expect("one skip per level");
            let merged = self.combine(h, &skip);
            drop(skip);
            let mut caches = Vec::new();
            h = run_blocks(&self.dec[lvl], p, merged, &emb, keep, &mut caches);
            dec_c[lvl] = caches;
            if let Some(conv) = &self.up[lvl] {
                let u = upsample2(&h);
                h = conv.forward(p, &u);
                if keep {
                    up_in[lvl] = Some(u);
                }
            }
        }

        let (out_h, out_gn) = self.out_norm.forward(p, &h);
        let out_a = silu(&out_h);
        let y = self.out_conv.forward(p, &out_a);
        let tape = keep.then(|| Tape {
            feat,
            e1,
            a1,
            e2,
            emb,
            x: x.clone(),
            enc: enc_c,
            down_in,
            mid: mid_c,
            dec: dec_c,
            up_in,
            out_gn,
            out_h,
            out_a,
        });
        (y, tape)
    }

    pub fn backward<T: Real>(&self, p: &[T], g: &mut [T], tape: Tape<T>, dy: &Array4<T>) {
        let levels = self.enc.len();
        let Tape {
            feat,
            e1,
            a1,
            e2,
            emb,
            x,
            enc,
            mut down_in,
            mid,
            dec,
            mut up_in,
            out_gn,
            out_h,
            out_a,
        } = tape;
        let mut d_emb = Array1::<T>::zeros(emb.len());

        let da = self.out_conv.backward(p, g, &out_a, dy, true).unwrap();
        drop(out_a);
        let dh = silu_backward(&out_h, &da);
        let mut d = self.out_norm.backward(p, g, &out_gn, &dh);

        let mut d_skips: Vec<Option<Array4<T>>> = (0..levels).map(|_| None).collect();
        for (lvl, caches) in dec.into_iter().enumerate() {
            if let Some(conv) = &self.up[lvl] {
                let u = up_in[lvl].take().expect("upsample input kept");
                let du = conv.backward(p, g, &u, &d, true).unwrap();
                d = upsample2_backward(&du);
            }
            let dm = back_blocks(&self.dec[lvl], p, g, caches, d, &emb, &mut d_emb);
            let width = self.enc[lvl].last().map(block_width).unwrap_or(0);
            let (dx, ds) = self.split(dm, width);
            d_skips[lvl] = Some(ds);
            d = dx;
        }

        d = back_blocks(&self.mid, p, g, mid, d, &emb, &mut d_emb);

        for (lvl, caches) in enc.into_iter().enumerate().rev() {
            d += d_skips[lvl].as_ref().expect("skip gradient");
            d = back_blocks(&self.enc[lvl], p, g, caches, d, &emb, &mut d_emb);
            if lvl > 0 {
                let hin = down_in.pop().expect("downsample input kept");
                d = self.down[lvl - 1].backward(p, g, &hin, &d, true).unwrap();
            }
        }
        self.input.backward(p, g, &x, &d, false);

        let de2 = silu_backward(&e2, &d_emb);
        let da1 = self.time2.backward(p, g, &a1, &de2);
        let de1 = silu_backward(&e1, &da1);
        self.time1.backward(p, g, &feat, &de1);
    }
}

fn block_width(b: &Block) -> usize {
    match b {
        Block::Res(r) => r.cout,
        Block::Attn(a) => a.channels,
    }
}
