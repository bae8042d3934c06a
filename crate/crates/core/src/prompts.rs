//! Geometry-aware prompt generation: the shape prompt, the prototype-based
//! defect distiller, and assembly of the normal/anomaly token sequences.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::config::Ablation;
use crate::encoders::{normalize_rows, EncoderConfig, PointEncoder, PointGeometry, TextEncoder};
use crate::error::{GsError, Result};
use crate::nn::{Group, Init, Linear, MultiHeadAttention, Param, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub prototypes: usize,
    pub learnable_tokens: usize,
    pub top_k: usize,
    pub distiller_heads: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            prototypes: 32,
            learnable_tokens: 8,
            top_k: 12,
            distiller_heads: 2,
        }
    }
}

/// `s_i = 1 - max_j cos(f_i, p_j)`; zero rows score 1.
pub fn outlier_scores(features: &[Vec<f64>], prototypes: &[Vec<f64>]) -> Result<Vec<f64>> {
    if prototypes.is_empty() {
        return Err(GsError::config("prototype bank is empty"));
    }
    // Squared norms keep the cosine of collinear integer vectors exactly 1.
    let pn: Vec<f64> = prototypes.iter().map(|p| p.iter().map(|x| x * x).sum()).collect();
    Ok(features
        .iter()
        .map(|f| {
            let nf: f64 = f.iter().map(|x| x * x).sum();
            if nf == 0.0 {
                return 1.0;
            }
            let best = prototypes
                .iter()
                .zip(&pn)
                .map(|(p, &np)| if np == 0.0 { 0.0 } else { f.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / (nf * np).sqrt() })
                .fold(f64::NEG_INFINITY, f64::max);
            (1.0 - best.clamp(-1.0, 1.0)).clamp(0.0, 2.0)
        })
        .collect())
}

/// Indices of the `k` largest scores, ties to the lower index, in selection order.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(GsError::config(format!("top-{k} requested from {} points", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Prompt tokens for one object before text encoding.
#[derive(Clone, Debug)]
pub struct PromptTokens {
    pub shape: Option<Tensor>,
    pub learnable: Tensor,
    pub defect: Option<Tensor>,
    /// Stand-in anomaly tokens used when the defect prompt is disabled.
    pub anomaly: Option<Tensor>,
    pub selected: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Concatenates prompt parts into the normal and anomaly sequences.
pub fn assemble_prompts(tokens: &PromptTokens, context: usize) -> Result<(Tensor, Tensor)> {
    let mut normal: Vec<&Tensor> = Vec::new();
    if let Some(s) = &tokens.shape {
        normal.push(s);
    }
    normal.push(&tokens.learnable);
    let mut anomaly = normal.clone();
    match (&tokens.defect, &tokens.anomaly) {
        (Some(d), _) => anomaly.push(d),
        (None, Some(a)) => anomaly.push(a),
        (None, None) => return Err(GsError::config("anomaly prompt needs defect or stand-in tokens")),
    }
    let tn = Tensor::cat(&normal, 0)?;
    let ta = Tensor::cat(&anomaly, 0)?;
    if ta.dim(0)? > context {
        return Err(GsError::config(format!("anomaly prompt of {} tokens exceeds context {context}", ta.dim(0)?)));
    }
    Ok((tn, ta))
}

/// Encoded prompts of one object.
#[derive(Clone, Debug)]
pub struct PromptBundle {
    pub tokens: PromptTokens,
    pub normal_embedding: Tensor,
    pub anomaly_embedding: Tensor,
}

#[derive(Clone, Debug)]
pub struct PromptGenerator {
    pub point: PointEncoder,
    pub shape_proj: Linear,
    pub prototypes: Param,
    pub attn: MultiHeadAttention,
    pub defect_proj: Linear,
    pub learnable: Param,
    pub anomaly_tokens: Option<Param>,
    pub config: PromptConfig,
    pub use_shape: bool,
    pub use_defect: bool,
}

impl PromptGenerator {
    pub fn new(store: &mut ParamStore, enc: &EncoderConfig, cfg: &PromptConfig, ablation: &Ablation) -> Result<Self> {
        if cfg.prototypes == 0 {
            return Err(GsError::config("prototype bank is empty"));
        }
        let point = PointEncoder::new(&mut Init::new(store, Group::PointEncoder), enc)?;
        let shape_proj = Linear::new(&mut Init::new(store, Group::ShapeProjection), "proj", enc.point_global_dim, enc.dim, true)?;
        let prototypes = Init::new(store, Group::PrototypeBank).normal(
            "prototypes",
            &[cfg.prototypes, enc.point_dim],
            1.0 / (enc.point_dim as f64).sqrt(),
        )?;
        let mut di = Init::new(store, Group::DefectDistiller);
        let attn = MultiHeadAttention::new(&mut di, "attn", enc.point_dim, cfg.distiller_heads)?;
        let defect_proj = Linear::new(&mut di, "proj", enc.point_dim, enc.dim, true)?;
        let mut li = Init::new(store, Group::LearnablePrompts);
        let learnable = li.normal("tokens", &[cfg.learnable_tokens, enc.dim], 0.02)?;
        let anomaly_tokens =
            if ablation.use_defect_prompt { None } else { Some(li.normal("anomaly_tokens", &[cfg.top_k, enc.dim], 0.02)?) };
        let len = ablation.use_shape_prompt as usize + cfg.learnable_tokens + cfg.top_k;
        if len > enc.context {
            return Err(GsError::config(format!("prompt length {len} exceeds the text context {}", enc.context)));
        }
        Ok(PromptGenerator {
            point,
            shape_proj,
            prototypes,
            attn,
            defect_proj,
            learnable,
            anomaly_tokens,
            config: cfg.clone(),
            use_shape: ablation.use_shape_prompt,
            use_defect: ablation.use_defect_prompt,
        })
    }

    /// Differentiable outlier scores `[n]` of local features `[n, c]`.
    pub fn score_tensor(&self, local: &Tensor) -> Result<Tensor> {
        let cos = normalize_rows(local)?.matmul(&normalize_rows(&self.prototypes.t())?.t()?)?;
        Ok(cos.max(D::Minus1)?.affine(-1.0, 1.0)?)
    }

    pub fn tokens(&self, geometry: &PointGeometry) -> Result<PromptTokens> {
        let feats = self.point.forward(geometry)?;
        let shape = if self.use_shape {
            Some(self.shape_proj.forward(&feats.global.unsqueeze(0)?)?)
        } else {
            None
        };
        let learnable = self.learnable.t();
        let mut selected = Vec::new();
        let mut scores = Vec::new();
        let defect = if self.use_defect {
            let s = self.score_tensor(&feats.local)?;
            scores = s.to_vec1::<f64>()?;
            selected = top_k(&scores, self.config.top_k)?;
            let idx = Tensor::from_vec(selected.iter().map(|&i| i as u32).collect::<Vec<_>>(), selected.len(), s.device())?;
            // Weighting by the score keeps the prototypes on the gradient path.
            let x = feats.local.index_select(&idx, 0)?.broadcast_mul(&s.index_select(&idx, 0)?.unsqueeze(1)?)?;
            let x = x.unsqueeze(0)?;
            let h = (&x + self.attn.forward(&x)?)?;
            Some(self.defect_proj.forward(&h.squeeze(0)?)?)
        } else {
            None
        };
        Ok(PromptTokens { shape, learnable, defect, anomaly: self.anomaly_tokens.as_ref().map(|p| p.t()), selected, scores })
    }

    pub fn encode(&self, geometry: &PointGeometry, text: &TextEncoder) -> Result<PromptBundle> {
        let tokens = self.tokens(geometry)?;
        let (tn, ta) = assemble_prompts(&tokens, text.context())?;
        Ok(PromptBundle { normal_embedding: text.forward(&tn)?, anomaly_embedding: text.forward(&ta)?, tokens })
    }

    pub fn prototype_rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.prototypes.t().to_vec2::<f64>()?)
    }
}
