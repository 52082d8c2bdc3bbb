use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::Condition;
use crate::error::{Error, Result};
use crate::nn::{from_tokens, to_tokens, upsample2x, Conv2d, GroupNorm, Init, Linear, ParamPath, ParamStore};

/// Number of condition tokens the embedding table holds.
pub const VOCAB_SIZE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Latent channels.
    pub channels: usize,
    /// Feature width per resolution level, finest first. Each level after
    /// the first halves the spatial size.
    pub widths: Vec<usize>,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub groups: usize,
    /// Self-attention after the coarsest down block.
    pub attention: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            widths: vec![64, 128, 128],
            time_dim: 128,
            cond_dim: 32,
            groups: 8,
            attention: true,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("diffusion.widths must list at least one level".into()));
        }
        if self.widths.iter().any(|w| *w == 0 || w % self.groups != 0) {
            return Err(Error::Config(format!(
                "diffusion.widths {:?} must be positive multiples of {} groups",
                self.widths, self.groups
            )));
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err(Error::Config("diffusion.time_dim must be even and positive".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }
}

/// A residual block whose normalized input may be modulated by guidance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpadeSite {
    pub name: String,
    /// Resolution level, 0 = latent resolution.
    pub level: usize,
    /// Channels of the modulated feature.
    pub channels: usize,
}

/// Hook through which a side network rewrites the normalized input of a
/// residual block.
pub trait FeatureModulator {
    fn modulate(&self, site: &SpadeSite, h: &Tensor) -> Result<Tensor>;
}

struct ResBlock {
    site: SpadeSite,
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(p: &ParamPath, site: SpadeSite, cout: usize, cfg: &UNetConfig) -> Result<Self> {
        let cin = site.channels;
        Ok(Self {
            norm1: GroupNorm::new(&p.pp("norm1"), cin, cfg.groups)?,
            conv1: Conv2d::new(&p.pp("conv1"), cin, cout, 3, 1)?,
            temb: Linear::new(&p.pp("temb"), cfg.time_dim, cout)?,
            norm2: GroupNorm::new(&p.pp("norm2"), cout, cfg.groups)?,
            conv2: Conv2d::with_init(&p.pp("conv2"), cout, cout, 3, 1, Init::Kaiming { fan_in: cout * 9, gain: 0.2 })?,
            skip: if cin != cout {
                Some(Conv2d::new(&p.pp("skip"), cin, cout, 1, 1)?)
            } else {
                None
            },
            site,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, guidance: Option<&dyn FeatureModulator>) -> Result<Tensor> {
        let mut h = self.norm1.forward(x)?;
        if let Some(g) = guidance {
            h = g.modulate(&self.site, &h)?;
        }
        let h = self.conv1.forward(&h.silu()?)?;
        let t = self.temb.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

struct SelfAttention {
    norm: GroupNorm,
    qkv: Linear,
    out: Linear,
    width: usize,
}

impl SelfAttention {
    fn new(p: &ParamPath, width: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&p.pp("norm"), width, groups)?,
            qkv: Linear::new(&p.pp("qkv"), width, 3 * width)?,
            out: Linear::new(&p.pp("out"), width, width)?,
            width,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let t = to_tokens(&self.norm.forward(x)?)?;
        let qkv = self.qkv.forward(&t)?;
        let q = qkv.narrow(D::Minus1, 0, self.width)?;
        let k = qkv.narrow(D::Minus1, self.width, self.width)?;
        let v = qkv.narrow(D::Minus1, 2 * self.width, self.width)?;
        let scores = (q.matmul(&k.t()?)? / (self.width as f64).sqrt())?;
        let attn = candle_nn::ops::softmax_last_dim(&scores)?;
        let y = self.out.forward(&attn.matmul(&v)?)?;
        Ok((x + from_tokens(&y, h, w)?)?)
    }
}

/// Conditional noise-prediction network over latents.
pub struct UNet {
    cfg: UNetConfig,
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    cond_table: Tensor,
    cond_proj: Linear,
    downs: Vec<(ResBlock, Option<Conv2d>)>,
    attn: Option<SelfAttention>,
    mid: ResBlock,
    ups: Vec<(ResBlock, Option<Conv2d>)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(store: &ParamStore, cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let root = store.root();
        let w = &cfg.widths;
        let levels = cfg.levels();
        let conv_in = Conv2d::new(&root.pp("conv_in"), cfg.channels, w[0], 3, 1)?;
        let time1 = Linear::new(&root.pp("time1"), cfg.time_dim, cfg.time_dim)?;
        let time2 = Linear::new(&root.pp("time2"), cfg.time_dim, cfg.time_dim)?;
        let cond_table = root.get("cond_table", &[VOCAB_SIZE, cfg.cond_dim], Init::Normal(1.0))?;
        let cond_proj = Linear::new(&root.pp("cond_proj"), cfg.cond_dim, cfg.time_dim)?;

        let mut downs = Vec::new();
        let mut cur = w[0];
        for (i, &wi) in w.iter().enumerate() {
            let p = root.pp(format!("down{i}"));
            let site = SpadeSite {
                name: format!("down{i}"),
                level: i,
                channels: cur,
            };
            let block = ResBlock::new(&p.pp("res"), site, wi, cfg)?;
            let down = if i + 1 < levels {
                Some(Conv2d::new(&p.pp("downsample"), wi, wi, 3, 2)?)
            } else {
                None
            };
            downs.push((block, down));
            cur = wi;
        }
        let attn = if cfg.attention {
            Some(SelfAttention::new(&root.pp("attn"), cur, cfg.groups)?)
        } else {
            None
        };
        let mid_site = SpadeSite {
            name: "mid".into(),
            level: levels - 1,
            channels: cur,
        };
        let mid = ResBlock::new(&root.pp("mid"), mid_site, cur, cfg)?;
        let mut ups = Vec::new();
        for i in (0..levels).rev() {
            let p = root.pp(format!("up{i}"));
            let site = SpadeSite {
                name: format!("up{i}"),
                level: i,
                channels: cur + w[i],
            };
            let block = ResBlock::new(&p.pp("res"), site, w[i], cfg)?;
            let up = if i > 0 {
                Some(Conv2d::new(&p.pp("upsample"), w[i], w[i - 1], 3, 1)?)
            } else {
                None
            };
            cur = if i > 0 { w[i - 1] } else { w[0] };
            ups.push((block, up));
        }
        let norm_out = GroupNorm::new(&root.pp("norm_out"), w[0], cfg.groups)?;
        let conv_out = Conv2d::with_init(
            &root.pp("conv_out"),
            w[0],
            cfg.channels,
            3,
            1,
            Init::Kaiming { fan_in: w[0] * 9, gain: 0.1 },
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            conv_in,
            time1,
            time2,
            cond_table,
            cond_proj,
            downs,
            attn,
            mid,
            ups,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Every modulation site, in forward order.
    pub fn spade_sites(&self) -> Vec<SpadeSite> {
        let mut sites: Vec<SpadeSite> = self.downs.iter().map(|(b, _)| b.site.clone()).collect();
        sites.push(self.mid.site.clone());
        sites.extend(self.ups.iter().map(|(b, _)| b.site.clone()));
        sites
    }

    /// Spatial size of level `i` for a latent of side `(h, w)`.
    pub fn level_shape(&self, (h, w): (usize, usize), level: usize) -> (usize, usize) {
        (h >> level, w >> level)
    }

    pub fn check_latent(&self, z: &Tensor) -> Result<()> {
        let (_, c, h, w) = z.dims4()?;
        if c != self.cfg.channels {
            return Err(Error::Dimension(format!("latent has {c} channels, denoiser expects {}", self.cfg.channels)));
        }
        let m = 1 << (self.cfg.levels() - 1);
        if h % m != 0 || w % m != 0 || h < m || w < m {
            return Err(Error::Config(format!(
                "latent {h}x{w} cannot be halved {} times",
                self.cfg.levels() - 1
            )));
        }
        Ok(())
    }

    fn time_embedding(&self, t: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let half = self.cfg.time_dim / 2;
        let mut data = Vec::with_capacity(t.len() * self.cfg.time_dim);
        for &step in t {
            let freqs = (0..half).map(|j| (-(10000f64.ln()) * j as f64 / half as f64).exp() * step as f64);
            let f: Vec<f64> = freqs.collect();
            data.extend(f.iter().map(|a| a.sin()));
            data.extend(f.iter().map(|a| a.cos()));
        }
        Ok(Tensor::from_vec(data, (t.len(), self.cfg.time_dim), device)?.to_dtype(dtype)?)
    }

    fn condition_embedding(&self, cond: &[Condition]) -> Result<Tensor> {
        let rows = cond
            .iter()
            .map(|c| match c {
                Condition::Null => Ok(self.cond_table.narrow(0, 0, 1)?.zeros_like()?),
                Condition::Token(id) => {
                    let id = *id as usize;
                    if id >= VOCAB_SIZE {
                        return Err(Error::Parameter(format!("condition token {id} outside vocabulary of {VOCAB_SIZE}")));
                    }
                    Ok(self.cond_table.narrow(0, id, 1)?)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&rows, 0)?)
    }

    /// Predicted noise for a batch. `t` and `cond` hold one entry per batch
    /// element, or a single entry shared by all of them.
    pub fn forward(
        &self,
        z: &Tensor,
        t: &[usize],
        cond: &[Condition],
        guidance: Option<&dyn FeatureModulator>,
    ) -> Result<Tensor> {
        self.check_latent(z)?;
        let b = z.dim(0)?;
        let t = broadcast_arg(t, b, "timestep")?;
        let cond = broadcast_arg(cond, b, "condition")?;
        let temb = self.time_embedding(&t, z.dtype(), z.device())?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;
        let temb = (temb + self.cond_proj.forward(&self.condition_embedding(&cond)?)?)?;

        let mut h = self.conv_in.forward(z)?;
        let mut skips = Vec::with_capacity(self.downs.len());
        for (block, down) in &self.downs {
            h = block.forward(&h, &temb, guidance)?;
            skips.push(h.clone());
            if let Some(d) = down {
                h = d.forward(&h)?;
            }
        }
        if let Some(a) = &self.attn {
            h = a.forward(&h)?;
        }
        h = self.mid.forward(&h, &temb, guidance)?;
        for (block, up) in &self.ups {
            let skip = skips.pop().expect("one skip per level");
            h = block.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb, guidance)?;
            if let Some(u) = up {
                h = u.forward(&upsample2x(&h)?)?;
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }
}

fn broadcast_arg<T: Clone>(v: &[T], b: usize, what: &str) -> Result<Vec<T>> {
    match v.len() {
        1 => Ok(vec![v[0].clone(); b]),
        n if n == b => Ok(v.to_vec()),
        n => Err(Error::Dimension(format!("{n} {what} entries for a batch of {b}"))),
    }
}
