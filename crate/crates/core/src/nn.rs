//! Parameter storage, freeze flags, and the small set of layers the encoders
//! are built from. Everything runs on the CPU in f64.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GsError, Result};

pub const DTYPE: DType = DType::F64;

/// Parameter groups. Freezing and checksumming happen per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    PointEncoder,
    ShapeProjection,
    PrototypeBank,
    DefectDistiller,
    LearnablePrompts,
    VisionEncoder,
    TextEncoder,
    DepthLora,
    Srm,
}

impl Group {
    pub const ALL: [Group; 9] = [
        Group::PointEncoder,
        Group::ShapeProjection,
        Group::PrototypeBank,
        Group::DefectDistiller,
        Group::LearnablePrompts,
        Group::VisionEncoder,
        Group::TextEncoder,
        Group::DepthLora,
        Group::Srm,
    ];

    /// Groups trained in stage 1; the rest are frozen there.
    pub const PROMPT_GENERATOR: [Group; 5] = [
        Group::PointEncoder,
        Group::ShapeProjection,
        Group::PrototypeBank,
        Group::DefectDistiller,
        Group::LearnablePrompts,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Group::PointEncoder => "point_encoder",
            Group::ShapeProjection => "shape_projection",
            Group::PrototypeBank => "prototype_bank",
            Group::DefectDistiller => "defect_distiller",
            Group::LearnablePrompts => "learnable_prompts",
            Group::VisionEncoder => "vision_encoder",
            Group::TextEncoder => "text_encoder",
            Group::DepthLora => "depth_lora",
            Group::Srm => "srm",
        }
    }

    /// Checkpoint namespace.
    pub fn namespace(&self) -> &'static str {
        if Group::PROMPT_GENERATOR.contains(self) {
            "prompt_generator"
        } else {
            self.as_str()
        }
    }

    /// Name prefix of every parameter in the group.
    pub fn prefix(&self) -> String {
        if Group::PROMPT_GENERATOR.contains(self) {
            format!("prompt_generator.{}", self.as_str())
        } else {
            self.as_str().to_string()
        }
    }

    fn index(&self) -> usize {
        Group::ALL.iter().position(|g| g == self).unwrap()
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = GsError;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .iter()
            .copied()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| GsError::config(format!("unknown parameter group '{s}'")))
    }
}

#[derive(Debug, Default)]
pub struct FreezeFlags([AtomicBool; 9]);

/// A named trainable tensor. Reading it through [`Param::t`] detaches frozen
/// parameters from the graph so no gradient is ever computed for them.
#[derive(Clone, Debug)]
pub struct Param {
    var: Var,
    group: Group,
    flags: Arc<FreezeFlags>,
}

impl Param {
    pub fn t(&self) -> Tensor {
        if self.flags.0[self.group.index()].load(Ordering::Relaxed) {
            self.var.as_tensor().detach()
        } else {
            self.var.as_tensor().clone()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn group(&self) -> Group {
        self.group
    }
}

#[derive(Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    flags: Arc<FreezeFlags>,
    seed: u64,
}

impl ParamStore {
    /// `seed` drives initialization: each parameter's values depend only on
    /// the seed and its own name, so structural toggles never shift the
    /// initialization of unrelated modules.
    pub fn new(seed: u64) -> Self {
        ParamStore { params: BTreeMap::new(), flags: Arc::new(FreezeFlags::default()), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: &str, group: Group, value: Tensor) -> Result<Param> {
        if self.params.contains_key(name) {
            return Err(GsError::config(format!("duplicate parameter '{name}'")));
        }
        let var = Var::from_tensor(&value.to_dtype(DTYPE)?)?;
        let p = Param { var, group, flags: self.flags.clone() };
        self.params.insert(name.to_string(), p.clone());
        Ok(p)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn groups(&self) -> BTreeSet<Group> {
        self.params.values().map(|p| p.group).collect()
    }

    pub fn set_frozen(&self, group: Group, frozen: bool) {
        self.flags.0[group.index()].store(frozen, Ordering::Relaxed);
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        self.flags.0[group.index()].load(Ordering::Relaxed)
    }

    /// Freezes every group not listed in `trainable`.
    pub fn train_only(&self, trainable: &[Group]) {
        for g in Group::ALL {
            self.set_frozen(g, !trainable.contains(&g));
        }
    }

    pub fn vars(&self, groups: &[Group]) -> Vec<Var> {
        self.params.values().filter(|p| groups.contains(&p.group)).map(|p| p.var.clone()).collect()
    }

    pub fn named_in(&self, group: Group) -> Vec<(&String, &Param)> {
        self.params.iter().filter(|(_, p)| p.group == group).collect()
    }

    /// SHA-256 over names, shapes, and little-endian values of a group.
    pub fn checksum(&self, group: Group) -> Result<String> {
        let mut h = Sha256::new();
        for (name, p) in self.named_in(group) {
            h.update(name.as_bytes());
            for d in p.var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.var.as_tensor().flatten_all()?.to_vec1::<f64>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn checksums(&self) -> Result<BTreeMap<Group, String>> {
        self.groups().into_iter().map(|g| Ok((g, self.checksum(g)?))).collect()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.params.iter().map(|(n, p)| (n.clone(), p.var.as_tensor().clone())).collect()
    }

    /// Overwrites parameter values by name; shapes must match.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        self.load_groups(values, &self.groups().into_iter().collect::<Vec<_>>())
    }

    /// Loads every parameter of the listed groups; other groups are untouched.
    pub fn load_groups(&self, values: &BTreeMap<String, Tensor>, groups: &[Group]) -> Result<()> {
        for (name, p) in self.params.iter().filter(|(_, p)| groups.contains(&p.group)) {
            let v = values.get(name).ok_or_else(|| GsError::config(format!("checkpoint lacks parameter '{name}'")))?;
            if v.dims() != p.var.dims() {
                return Err(GsError::config(format!(
                    "parameter '{name}' has shape {:?} in the checkpoint but {:?} in the model",
                    v.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&v.to_dtype(DTYPE)?)?;
        }
        Ok(())
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        let mut s = [0u8; 32];
        s.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(s)
    }
}

/// Builder handing out parameters under a name prefix and group.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    group: Group,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, group: Group) -> Self {
        Init { prefix: group.prefix(), store, group }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_> {
        Init { prefix: format!("{}.{name}", self.prefix), store: self.store, group: self.group }
    }

    fn full(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Param> {
        let full = self.full(name);
        let mut rng = self.store.rng_for(&full);
        let dist = Normal::new(0.0, std).map_err(|e| GsError::config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?;
        self.store.insert(&full, self.group, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Param> {
        let full = self.full(name);
        self.store.insert(&full, self.group, Tensor::zeros(shape, DTYPE, &Device::Cpu)?)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Param> {
        let full = self.full(name);
        self.store.insert(&full, self.group, Tensor::ones(shape, DTYPE, &Device::Cpu)?)
    }
}

/// Multiplies the last dimension of `x` by `w^T` (`w` is `out x in`).
fn matmul_last(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let inner = *dims.last().ok_or_else(|| GsError::config("matmul on a scalar"))?;
    let rows = x.elem_count() / inner.max(1);
    let y = x.reshape((rows, inner))?.matmul(&w.t()?)?;
    let mut out = dims;
    *out.last_mut().unwrap() = w.dim(0)?;
    Ok(y.reshape(out)?)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    /// Weights ~ N(0, 1/in), biases zero.
    pub fn new(init: &mut Init, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let mut sub = init.sub(name);
        let weight = sub.normal("weight", &[output, input], 1.0 / (input as f64).sqrt())?;
        let bias = if bias { Some(sub.zeros("bias", &[output])?) } else { None };
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = matmul_last(x, &self.weight.t())?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.t())?),
            None => Ok(y),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.var().dims()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.var().dims()[0]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: Param,
    shift: Param,
    eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        let mut sub = init.sub(name);
        Ok(LayerNorm { gain: sub.ones("gain", &[dim])?, shift: sub.zeros("shift", &[dim])?, eps: 1e-5 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gain.t())?.broadcast_add(&self.shift.t())?)
    }
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `1 / (1 + exp(-x))`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(GsError::config(format!("{dim} channels do not split into {heads} heads")));
        }
        let mut sub = init.sub(name);
        Ok(MultiHeadAttention {
            qkv: Linear::new(&mut sub, "qkv", dim, 3 * dim, true)?,
            out: Linear::new(&mut sub, "out", dim, dim, true)?,
            heads,
        })
    }

    /// Self-attention over `x: [batch, tokens, dim]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((b, t, 3, self.heads, hd))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let att = softmax_last(&att)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        self.out.forward(&y)
    }
}

/// Pre-norm transformer block whose MLP linears are bias-free so a low-rank
/// adapter can wrap them exactly.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        let mut sub = init.sub(name);
        Ok(TransformerBlock {
            ln1: LayerNorm::new(&mut sub, "ln1", dim)?,
            attn: MultiHeadAttention::new(&mut sub, "attn", dim, heads)?,
            ln2: LayerNorm::new(&mut sub, "ln2", dim)?,
            fc1: Linear::new(&mut sub, "fc1", dim, mlp_ratio * dim, false)?,
            fc2: Linear::new(&mut sub, "fc2", mlp_ratio * dim, dim, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor, lora: Option<&crate::fusion::LoraLayer>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        let h = self.ln2.forward(&x)?;
        let m = crate::fusion::lora_mlp(&h, &self.fc1, &self.fc2, lora)?;
        Ok((x + m)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initialization_depends_only_on_seed_and_name() {
        let mut a = ParamStore::new(5);
        let mut b = ParamStore::new(5);
        Init::new(&mut a, Group::Srm).normal("x", &[3, 2], 1.0).unwrap();
        let mut ib = Init::new(&mut b, Group::Srm);
        ib.normal("other", &[4], 1.0).unwrap();
        ib.normal("x", &[3, 2], 1.0).unwrap();
        let va = a.get("srm.x").unwrap().t().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let vb = b.get("srm.x").unwrap().t().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(va, vb);
        assert_eq!(a.checksum(Group::Srm).unwrap(), a.checksum(Group::Srm).unwrap());
    }

    #[test]
    fn frozen_params_carry_no_gradient() {
        let mut s = ParamStore::new(0);
        let p = Init::new(&mut s, Group::TextEncoder).normal("w", &[3], 1.0).unwrap();
        s.set_frozen(Group::TextEncoder, true);
        let loss = p.t().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(p.var().as_tensor()).is_none());
        s.set_frozen(Group::TextEncoder, false);
        let loss = p.t().sqr().unwrap().sum_all().unwrap();
        assert!(loss.backward().unwrap().get(p.var().as_tensor()).is_some());
    }

    #[test]
    fn namespaces() {
        assert_eq!(Group::PrototypeBank.prefix(), "prompt_generator.prototype_bank");
        assert_eq!(Group::DepthLora.namespace(), "depth_lora");
        assert_eq!("srm".parse::<Group>().unwrap(), Group::Srm);
        assert!("bogus".parse::<Group>().is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-50.0, 0.0, 50.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut s = ParamStore::new(0);
        let ln = LayerNorm::new(&mut Init::new(&mut s, Group::VisionEncoder), "ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 10.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
