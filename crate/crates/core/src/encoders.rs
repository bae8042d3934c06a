//! Desk-scale stand-ins for the point, image, and text encoders.

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{GsError, Result};
use crate::fusion::LoraAdapter;
use crate::neighbors::knn;
use crate::nn::{Init, LayerNorm, Linear, Param, TransformerBlock};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Shared embedding dimension of vision, text, and prompts.
    pub dim: usize,
    /// Local point-feature dimension.
    pub point_dim: usize,
    /// Global point-feature dimension.
    pub point_global_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub image: usize,
    pub context: usize,
    pub point_neighbors: usize,
    /// Relative neighbor offsets are multiplied by this before the first MLP.
    pub offset_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            point_dim: 64,
            point_global_dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            patch: 16,
            image: 112,
            context: 32,
            point_neighbors: 8,
            offset_scale: 8.0,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image % self.patch != 0 {
            return Err(GsError::config(format!("image size {} is not a multiple of patch {}", self.image, self.patch)));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(GsError::config("embedding dimension must split evenly across heads"));
        }
        if self.point_neighbors == 0 || self.context == 0 || self.depth == 0 {
            return Err(GsError::config("encoder sizes must be positive"));
        }
        Ok(())
    }
}

/// Point coordinates plus the fixed neighborhoods of both abstraction levels.
#[derive(Clone, Debug)]
pub struct PointGeometry {
    pub points: Tensor,
    /// `n * k` neighbor indices for the first level.
    pub near: Tensor,
    /// `n * k` dilated neighbor indices (every second of the `2k` nearest).
    pub wide: Tensor,
    pub n: usize,
    pub k: usize,
}

impl PointGeometry {
    pub fn new(points: &[[f64; 3]], k: usize) -> Result<Self> {
        let n = points.len();
        if n < 2 * k {
            return Err(GsError::config(format!("{n} points cannot form neighborhoods of {} points", 2 * k)));
        }
        let nn = knn(points, 2 * k);
        let near: Vec<u32> = nn.iter().flat_map(|r| r[..k].iter().map(|&i| i as u32)).collect();
        let wide: Vec<u32> = nn.iter().flat_map(|r| r.iter().step_by(2).map(|&i| i as u32)).collect();
        let flat: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
        Ok(PointGeometry {
            points: Tensor::from_vec(flat, (n, 3), &Device::Cpu)?,
            near: Tensor::from_vec(near, n * k, &Device::Cpu)?,
            wide: Tensor::from_vec(wide, n * k, &Device::Cpu)?,
            n,
            k,
        })
    }
}

/// Local features `[n, point_dim]`, their deepest pre-pool form, and the global feature.
#[derive(Clone, Debug)]
pub struct PointFeatures {
    pub local: Tensor,
    pub deep: Tensor,
    pub global: Tensor,
}

/// Two set-abstraction levels over k-NN groups followed by a global max-pool.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    sa1: [Linear; 2],
    sa2: [Linear; 2],
    head: Linear,
    offset_scale: f64,
}

impl PointEncoder {
    pub fn new(init: &mut Init, cfg: &EncoderConfig) -> Result<Self> {
        let c = cfg.point_dim;
        let h = c / 2;
        Ok(PointEncoder {
            sa1: [Linear::new(init, "sa1.0", 3, h, true)?, Linear::new(init, "sa1.1", h, h, true)?],
            sa2: [Linear::new(init, "sa2.0", h + 3, c, true)?, Linear::new(init, "sa2.1", c, c, true)?],
            head: Linear::new(init, "head", c, cfg.point_global_dim, true)?,
            offset_scale: cfg.offset_scale,
        })
    }

    fn offsets(&self, g: &PointGeometry, idx: &Tensor) -> Result<Tensor> {
        let nb = g.points.index_select(idx, 0)?.reshape((g.n, g.k, 3))?;
        Ok((nb.broadcast_sub(&g.points.unsqueeze(1)?)? * self.offset_scale)?)
    }

    pub fn forward(&self, g: &PointGeometry) -> Result<PointFeatures> {
        let rel1 = self.offsets(g, &g.near)?;
        let h1 = self.sa1[1].forward(&self.sa1[0].forward(&rel1)?.relu()?)?.relu()?.max(1)?;
        let c = h1.dim(1)?;
        // The first SA2 layer acts on concat(h1[nbr], offset); applying its
        // feature half before the gather is identical and k times cheaper.
        let w = self.sa2[0].weight.t();
        let wf = w.narrow(1, 0, c)?;
        let wo = w.narrow(1, c, 3)?;
        let hf = h1.matmul(&wf.t()?)?;
        let out = wf.dim(0)?;
        let gathered = hf.index_select(&g.wide, 0)?.reshape((g.n, g.k, out))?;
        let off = self.offsets(g, &g.wide)?.reshape((g.n * g.k, 3))?.matmul(&wo.t()?)?.reshape((g.n, g.k, out))?;
        let mut pre = (gathered + off)?;
        if let Some(b) = &self.sa2[0].bias {
            pre = pre.broadcast_add(&b.t())?;
        }
        let local = self.sa2[1].forward(&pre.relu()?)?.relu()?.max(1)?;
        let deep = self.head.forward(&local)?.relu()?;
        let global = deep.max(0)?;
        Ok(PointFeatures { local, deep, global })
    }
}

/// Patch-token vision transformer over single-channel images.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    embed: Linear,
    cls: Param,
    pos: Param,
    pub blocks: Vec<TransformerBlock>,
    ln_post: LayerNorm,
    proj: Linear,
    patch: usize,
    image: usize,
}

impl VisionEncoder {
    pub fn new(init: &mut Init, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let blocks =
            (0..cfg.depth).map(|i| TransformerBlock::new(init, &format!("blocks.{i}"), d, cfg.heads, cfg.mlp_ratio)).collect::<Result<_>>()?;
        Ok(VisionEncoder {
            embed: Linear::new(init, "embed", cfg.patch * cfg.patch, d, true)?,
            cls: init.normal("cls", &[d], 0.02)?,
            pos: init.normal("pos", &[cfg.patches() + 1, d], 0.02)?,
            blocks,
            ln_post: LayerNorm::new(init, "ln_post", d)?,
            proj: Linear::new(init, "proj", d, d, false)?,
            patch: cfg.patch,
            image: cfg.image,
        })
    }

    /// Encodes `[b, h, w]` images with values in [0, 1].
    /// Returns globals `[b, d]` and patch features `[b, p, d]`.
    pub fn forward(&self, images: &Tensor, adapter: Option<&LoraAdapter>) -> Result<(Tensor, Tensor)> {
        let (b, h, w) = images.dims3()?;
        if h != self.image || w != self.image {
            return Err(GsError::config(format!("expected {0}x{0} images, got {h}x{w}", self.image)));
        }
        if let Some(a) = adapter {
            if a.layers.len() != self.blocks.len() {
                return Err(GsError::config("adapter depth does not match the encoder"));
            }
        }
        let (g, p) = (h / self.patch, self.patch);
        let patches = images
            .affine(2.0, -1.0)?
            .reshape((b, g, p, g, p))?
            .permute((0, 1, 3, 2, 4))?
            .contiguous()?
            .reshape((b, g * g, p * p))?;
        let tokens = self.embed.forward(&patches)?;
        let d = tokens.dim(2)?;
        let cls = self.cls.t().reshape((1, 1, d))?.broadcast_as((b, 1, d))?;
        let mut x = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.pos.t())?;
        for (i, blk) in self.blocks.iter().enumerate() {
            x = blk.forward(&x, adapter.map(|a| &a.layers[i]))?;
        }
        let x = self.proj.forward(&self.ln_post.forward(&x)?)?;
        let global = x.narrow(1, 0, 1)?.squeeze(1)?;
        let local = x.narrow(1, 1, g * g)?;
        Ok((global, local))
    }
}

/// Transformer over prompt-token sequences with mean pooling.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pos: Param,
    blocks: Vec<TransformerBlock>,
    ln_final: LayerNorm,
    proj: Linear,
    context: usize,
}

impl TextEncoder {
    pub fn new(init: &mut Init, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let blocks =
            (0..cfg.depth).map(|i| TransformerBlock::new(init, &format!("blocks.{i}"), d, cfg.heads, cfg.mlp_ratio)).collect::<Result<_>>()?;
        Ok(TextEncoder {
            pos: init.normal("pos", &[cfg.context, d], 0.02)?,
            blocks,
            ln_final: LayerNorm::new(init, "ln_final", d)?,
            proj: Linear::new(init, "proj", d, d, false)?,
            context: cfg.context,
        })
    }

    pub fn context(&self) -> usize {
        self.context
    }

    /// Encodes a `[t, d]` token sequence into a `[d]` embedding.
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let (t, _) = tokens.dims2()?;
        if t == 0 || t > self.context {
            return Err(GsError::config(format!("prompt of {t} tokens exceeds the text context of {}", self.context)));
        }
        let mut x = tokens.broadcast_add(&self.pos.t().narrow(0, 0, t)?)?.unsqueeze(0)?;
        for blk in &self.blocks {
            x = blk.forward(&x, None)?;
        }
        let pooled = self.ln_final.forward(&x)?.mean(1)?.squeeze(0)?;
        self.proj.forward(&pooled.unsqueeze(0)?)?.squeeze(0).map_err(Into::into)
    }
}

/// Stacks row-major `h x w` images into a `[v, h, w]` tensor.
pub fn image_stack(images: &[Vec<f64>], h: usize, w: usize) -> Result<Tensor> {
    let flat: Vec<f64> = images.iter().flat_map(|im| im.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (images.len(), h, w), &Device::Cpu)?)
}

/// Cosine similarity of two vectors as a plain number.
pub fn tensor_cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    let a = a.flatten_all()?.to_vec1::<f64>()?;
    let b = b.flatten_all()?.to_vec1::<f64>()?;
    crate::scoring::cosine(&a, &b)
}

/// Row-wise L2 normalization with a floor on the norm.
pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let n = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.clamp(1e-12, f64::MAX)?;
    Ok(x.broadcast_div(&n)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_shape, Category};
    use crate::nn::{Group, ParamStore};

    fn small() -> EncoderConfig {
        EncoderConfig { image: 32, patch: 8, depth: 2, dim: 16, point_dim: 16, point_global_dim: 24, context: 12, heads: 2, point_neighbors: 8, ..Default::default() }
    }

    fn v(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn point_encoder_is_permutation_equivariant() {
        let cfg = small();
        let mut s = ParamStore::new(0);
        let enc = PointEncoder::new(&mut Init::new(&mut s, Group::PointEncoder), &cfg).unwrap();
        let cloud = generate_shape(Category::Cube, 300, 2).unwrap();
        let f = enc.forward(&PointGeometry::new(&cloud.points, 8).unwrap()).unwrap();
        let perm: Vec<usize> = (0..300).map(|i| (i * 7 + 3) % 300).collect();
        let permuted: Vec<[f64; 3]> = perm.iter().map(|&i| cloud.points[i]).collect();
        let g = enc.forward(&PointGeometry::new(&permuted, 8).unwrap()).unwrap();
        assert_eq!(f.local.dims(), &[300, 16]);
        assert_eq!(enc.sa1[1].output_dim(), 8);
        let (fl, gl) = (f.local.to_vec2::<f64>().unwrap(), g.local.to_vec2::<f64>().unwrap());
        for (j, &i) in perm.iter().enumerate() {
            for c in 0..16 {
                assert!((fl[i][c] - gl[j][c]).abs() < 1e-12);
            }
        }
        let (a, b) = (v(&f.global), v(&g.global));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        // global is the column max of the deepest per-point features
        let deep = f.deep.to_vec2::<f64>().unwrap();
        for (c, x) in a.iter().enumerate() {
            let m = deep.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(*x, m);
        }
    }

    #[test]
    fn point_encoder_rejects_tiny_clouds() {
        assert!(PointGeometry::new(&[[0.0; 3]; 10], 8).is_err());
    }

    #[test]
    fn vision_shapes_and_determinism() {
        let mut s = ParamStore::new(0);
        let enc = VisionEncoder::new(&mut Init::new(&mut s, Group::VisionEncoder), &EncoderConfig::default()).unwrap();
        let img = Tensor::rand(0.0f64, 1.0, (2, 112, 112), &Device::Cpu).unwrap();
        let (g, l) = enc.forward(&img, None).unwrap();
        assert_eq!(g.dims(), &[2, 64]);
        assert_eq!(l.dims(), &[2, 49, 64]);
        let (g2, _) = enc.forward(&img, None).unwrap();
        assert_eq!(v(&g), v(&g2));
        assert!(enc.forward(&Tensor::zeros((1, 96, 96), crate::nn::DTYPE, &Device::Cpu).unwrap(), None).is_err());
    }

    #[test]
    fn text_encoder_contract() {
        let cfg = small();
        let mut s = ParamStore::new(0);
        let enc = TextEncoder::new(&mut Init::new(&mut s, Group::TextEncoder), &cfg).unwrap();
        let a = Tensor::randn(0.0f64, 1.0, (5, 16), &Device::Cpu).unwrap();
        let b = Tensor::randn(0.0f64, 1.0, (9, 16), &Device::Cpu).unwrap();
        let ea = enc.forward(&a).unwrap();
        assert_eq!(ea.dims(), &[16]);
        assert_eq!(v(&ea), v(&enc.forward(&a).unwrap()));
        let c = tensor_cosine(&ea, &enc.forward(&b).unwrap()).unwrap();
        assert!(c > -1.0 && c < 1.0);
        assert!(enc.forward(&Tensor::zeros((13, 16), crate::nn::DTYPE, &Device::Cpu).unwrap()).is_err());
    }
}
