//! Depth-stream low-rank adapters on the vision MLPs and the bidirectional
//! attention module that fuses rendered and depth features.

use candle_core::{Tensor, D};

use crate::error::{GsError, Result};
use crate::nn::{softmax_last, Init, Linear, Param};

/// Low-rank updates for the two MLP linears of one transformer block.
#[derive(Clone, Debug)]
pub struct LoraLayer {
    pub a1: Param,
    pub b1: Param,
    pub a2: Param,
    pub b2: Param,
    pub gamma: f64,
}

impl LoraLayer {
    /// `A ~ N(0, 1/r^2)`, `B = 0`, `gamma = alpha / r`.
    pub fn new(init: &mut Init, name: &str, fc1: &Linear, fc2: &Linear, rank: usize, alpha: f64) -> Result<Self> {
        let (input, hidden, output) = (fc1.input_dim(), fc1.output_dim(), fc2.output_dim());
        if fc2.input_dim() != hidden {
            return Err(GsError::config("MLP linears do not chain"));
        }
        if rank == 0 || rank > input.min(hidden) || rank > hidden.min(output) {
            return Err(GsError::config(format!("LoRA rank {rank} exceeds the adapted layer dimensions")));
        }
        let mut sub = init.sub(name);
        let std = 1.0 / rank as f64;
        Ok(LoraLayer {
            a1: sub.normal("a1", &[rank, input], std)?,
            b1: sub.zeros("b1", &[hidden, rank])?,
            a2: sub.normal("a2", &[rank, hidden], std)?,
            b2: sub.zeros("b2", &[output, rank])?,
            gamma: alpha / rank as f64,
        })
    }

    pub fn rank(&self) -> usize {
        self.a1.var().dims()[0]
    }
}

/// One adapter layer per vision block.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub layers: Vec<LoraLayer>,
}

fn lin(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let inner = *dims.last().unwrap();
    let y = x.reshape((x.elem_count() / inner, inner))?.matmul(&w.t()?)?;
    let mut out = dims;
    *out.last_mut().unwrap() = w.dim(0)?;
    Ok(y.reshape(out)?)
}

/// `x' = GELU(W1 x + g B1 A1 x)`, `out = W2 x' + g B2 A2 x'`.
pub fn lora_mlp(x: &Tensor, fc1: &Linear, fc2: &Linear, lora: Option<&LoraLayer>) -> Result<Tensor> {
    let mut h = fc1.forward(x)?;
    if let Some(l) = lora {
        h = (h + (lin(&lin(x, &l.a1.t())?, &l.b1.t())? * l.gamma)?)?;
    }
    let h = h.gelu()?;
    let mut out = fc2.forward(&h)?;
    if let Some(l) = lora {
        out = (out + (lin(&lin(&h, &l.a2.t())?, &l.b2.t())? * l.gamma)?)?;
    }
    Ok(out)
}

/// Bidirectional multiplicative attention for one feature kind.
#[derive(Clone, Debug)]
pub struct SrmBranch {
    pub key_r: Linear,
    pub value_r: Linear,
    pub key_d: Linear,
    pub value_d: Linear,
    pub f1: Linear,
    pub f2: Linear,
    pub mlp1: Linear,
    pub mlp2: Linear,
}

/// Intermediates of one fusion pass, exposed for inspection and tests.
#[derive(Debug)]
pub struct SrmTrace {
    pub scores: Tensor,
    pub attn_r: Tensor,
    pub attn_d: Tensor,
    pub out: Tensor,
}

impl SrmBranch {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(SrmBranch {
            key_r: Linear::new(&mut s, "key_r", dim, dim, false)?,
            value_r: Linear::new(&mut s, "value_r", dim, dim, false)?,
            key_d: Linear::new(&mut s, "key_d", dim, dim, false)?,
            value_d: Linear::new(&mut s, "value_d", dim, dim, false)?,
            f1: Linear::new(&mut s, "f1", dim, dim, false)?,
            f2: Linear::new(&mut s, "f2", dim, dim, false)?,
            mlp1: Linear::new(&mut s, "mlp1", 2 * dim, 2 * dim, true)?,
            mlp2: Linear::new(&mut s, "mlp2", 2 * dim, dim, true)?,
        })
    }

    /// Fuses `[b, m, d]` rendered and depth features into `[b, m, d]`.
    pub fn trace(&self, render: &Tensor, depth: &Tensor) -> Result<SrmTrace> {
        if render.dims() != depth.dims() || render.rank() != 3 {
            return Err(GsError::config(format!(
                "fusion inputs must share a [batch, tokens, dim] shape, got {:?} and {:?}",
                render.dims(),
                depth.dims()
            )));
        }
        let kr = self.key_r.forward(render)?;
        let vr = self.value_r.forward(render)?;
        let kd = self.key_d.forward(depth)?;
        let vd = self.value_d.forward(depth)?;
        let scores = self.f1.forward(&kr)?.matmul(&self.f2.forward(&kd)?.t()?.contiguous()?)?;
        let attn_r = softmax_last(&scores)?;
        let attn_d = softmax_last(&scores.t()?.contiguous()?)?;
        let er = attn_r.matmul(&vr)?;
        let ed = attn_d.matmul(&vd)?;
        let cat = Tensor::cat(&[&er, &ed], D::Minus1)?;
        let out = self.mlp2.forward(&self.mlp1.forward(&cat)?.gelu()?)?;
        Ok(SrmTrace { scores, attn_r, attn_d, out })
    }

    pub fn forward(&self, render: &Tensor, depth: &Tensor) -> Result<Tensor> {
        Ok(self.trace(render, depth)?.out)
    }
}

/// Separate fusion parameters for global and local features.
#[derive(Clone, Debug)]
pub struct Srm {
    pub global: SrmBranch,
    pub local: SrmBranch,
}

impl Srm {
    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(Srm { global: SrmBranch::new(init, "global", dim)?, local: SrmBranch::new(init, "local", dim)? })
    }

    /// Globals `[v, d]` are fused as length-1 sequences; locals are `[v, p, d]`.
    pub fn fuse(&self, gr: &Tensor, gd: &Tensor, lr: &Tensor, ld: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = self.global.forward(&gr.unsqueeze(1)?, &gd.unsqueeze(1)?)?.squeeze(1)?;
        let l = self.local.forward(lr, ld)?;
        Ok((g, l))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Group, ParamStore};
    use candle_core::Device;

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
    }

    fn put(store: &mut ParamStore, name: &str, group: Group, rows: &[&[f64]]) -> Param {
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let t = Tensor::from_vec(flat, (rows.len(), rows[0].len()), &Device::Cpu).unwrap();
        store.insert(name, group, t).unwrap()
    }

    #[test]
    fn lora_mlp_matches_manual_evaluation() {
        let mut s = ParamStore::new(0);
        let w1 = [[0.5, -0.2, 0.1], [0.3, 0.8, -0.4], [-0.6, 0.1, 0.9]];
        let w2 = [[0.2, 0.4, -0.1], [-0.3, 0.5, 0.6], [0.7, -0.2, 0.3]];
        let fc1 = Linear { weight: put(&mut s, "w1", Group::VisionEncoder, &[&w1[0], &w1[1], &w1[2]]), bias: None };
        let fc2 = Linear { weight: put(&mut s, "w2", Group::VisionEncoder, &[&w2[0], &w2[1], &w2[2]]), bias: None };
        let a1 = [0.4, -0.5, 0.2];
        let b1 = [0.3, -0.1, 0.6];
        let a2 = [-0.2, 0.7, 0.1];
        let b2 = [0.5, 0.2, -0.4];
        let lora = LoraLayer {
            a1: put(&mut s, "a1", Group::DepthLora, &[&a1]),
            b1: put(&mut s, "b1", Group::DepthLora, &[&[b1[0]], &[b1[1]], &[b1[2]]]),
            a2: put(&mut s, "a2", Group::DepthLora, &[&a2]),
            b2: put(&mut s, "b2", Group::DepthLora, &[&[b2[0]], &[b2[1]], &[b2[2]]]),
            gamma: 1.0,
        };
        let x = [1.0, -2.0, 0.5];

        let ax: f64 = (0..3).map(|j| a1[j] * x[j]).sum();
        let mut h = [0.0; 3];
        for i in 0..3 {
            h[i] = gelu((0..3).map(|j| w1[i][j] * x[j]).sum::<f64>() + b1[i] * ax);
        }
        let ah: f64 = (0..3).map(|j| a2[j] * h[j]).sum();
        let want: Vec<f64> = (0..3).map(|i| (0..3).map(|j| w2[i][j] * h[j]).sum::<f64>() + b2[i] * ah).collect();

        let xt = Tensor::new(&[x], &Device::Cpu).unwrap();
        let got = lora_mlp(&xt, &fc1, &fc2, Some(&lora)).unwrap().to_vec2::<f64>().unwrap();
        for i in 0..3 {
            assert!((got[0][i] - want[i]).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn zero_b_is_exact_identity() {
        let mut s = ParamStore::new(3);
        let mut init = Init::new(&mut s, Group::VisionEncoder);
        let fc1 = Linear::new(&mut init, "fc1", 8, 16, false).unwrap();
        let fc2 = Linear::new(&mut init, "fc2", 16, 8, false).unwrap();
        let lora = LoraLayer::new(&mut Init::new(&mut s, Group::DepthLora), "l", &fc1, &fc2, 4, 16.0).unwrap();
        let x = Tensor::randn(0.0f64, 1.0, (5, 8), &Device::Cpu).unwrap();
        let a = lora_mlp(&x, &fc1, &fc2, Some(&lora)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = lora_mlp(&x, &fc1, &fc2, None).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
        assert_eq!(lora.gamma, 4.0);
    }

    #[test]
    fn rank_is_bounded() {
        let mut s = ParamStore::new(0);
        let mut init = Init::new(&mut s, Group::VisionEncoder);
        let fc1 = Linear::new(&mut init, "fc1", 4, 8, false).unwrap();
        let fc2 = Linear::new(&mut init, "fc2", 8, 4, false).unwrap();
        assert!(LoraLayer::new(&mut Init::new(&mut s, Group::DepthLora), "l", &fc1, &fc2, 5, 16.0).is_err());
    }

    #[test]
    fn single_token_fusion_ignores_scores() {
        let mut s = ParamStore::new(1);
        let b = SrmBranch::new(&mut Init::new(&mut s, Group::Srm), "g", 6).unwrap();
        let r = Tensor::randn(0.0f64, 1.0, (2, 1, 6), &Device::Cpu).unwrap();
        let d = Tensor::randn(0.0f64, 1.0, (2, 1, 6), &Device::Cpu).unwrap();
        let t = b.trace(&r, &d).unwrap();
        assert_eq!(t.attn_r.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.0, 1.0]);
        assert_eq!(t.attn_d.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut s = ParamStore::new(2);
        let b = SrmBranch::new(&mut Init::new(&mut s, Group::Srm), "l", 8).unwrap();
        let r = Tensor::randn(0.0f64, 1.0, (3, 5, 8), &Device::Cpu).unwrap();
        let d = Tensor::randn(0.0f64, 1.0, (3, 5, 8), &Device::Cpu).unwrap();
        let t = b.trace(&r, &d).unwrap();
        for a in [t.attn_r, t.attn_d] {
            for v in a.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap() {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
        assert!(b.trace(&r, &d.narrow(1, 0, 4).unwrap()).is_err());
    }
}
