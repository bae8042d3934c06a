//! The assembled model: prompt generator, frozen encoders, depth adapters and
//! fusion, plus the differentiable scoring path used in training and the
//! checkpoint container.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Stream};
use crate::dataset::Sample;
use crate::encoders::{image_stack, normalize_rows, PointGeometry, TextEncoder, VisionEncoder};
use crate::error::{GsError, Result};
use crate::fusion::{LoraAdapter, LoraLayer, Srm};
use crate::geometry::Category;
use crate::losses::{loss_cla_t, loss_con_t, loss_seg_t, LossReport, Stage};
use crate::metrics::knn_regions;
use crate::nn::{sigmoid, Group, Init, ParamStore, DTYPE};
use crate::projection::{label_maps, project_views, ViewNormalization, ViewSet};
use crate::prompts::{assemble_prompts, PromptGenerator};
use crate::scoring::{score_object, smoothing_upsample_matrix, FeaturePack, ScoreResult};

/// Sparse form of back-projection: `M[pt] += maps[pix] * weight`.
#[derive(Clone, Debug)]
pub struct Gather {
    pixels: Tensor,
    points: Tensor,
    weights: Tensor,
    n: usize,
}

impl Gather {
    pub fn new(views: &ViewSet, normalization: ViewNormalization) -> Result<Self> {
        let (n, hw, v) = (views.n_points, views.pixels(), views.len());
        let visible = views.visible_counts();
        let (mut pix, mut pts, mut wts) = (Vec::new(), Vec::new(), Vec::new());
        for (i, view) in views.views.iter().enumerate() {
            let mut owned = vec![0usize; n];
            for &o in &view.owners {
                owned[o as usize] += 1;
            }
            for px in 0..hw {
                for &o in view.pixel_owners(px) {
                    let denom = match normalization {
                        ViewNormalization::ViewCount => v,
                        ViewNormalization::VisibleCount => visible[o as usize].max(1),
                    };
                    pix.push((i * hw + px) as u32);
                    pts.push(o);
                    wts.push(1.0 / (owned[o as usize] * denom) as f64);
                }
            }
        }
        let m = pix.len();
        Ok(Gather {
            pixels: Tensor::from_vec(pix, m, &Device::Cpu)?,
            points: Tensor::from_vec(pts, m, &Device::Cpu)?,
            weights: Tensor::from_vec(wts, m, &Device::Cpu)?,
            n,
        })
    }

    /// Back-projects `[v, h, w]` maps onto `[n]` points.
    pub fn apply(&self, maps: &Tensor) -> Result<Tensor> {
        let flat = maps.flatten_all()?;
        let vals = (flat.index_select(&self.pixels, 0)? * &self.weights)?;
        Ok(Tensor::zeros(self.n, DTYPE, &Device::Cpu)?.index_add(&self.points, &vals, 0)?)
    }
}

/// One object with everything precomputed that does not depend on weights.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub category: Category,
    pub object_label: bool,
    pub point_labels: Vec<bool>,
    pub points: Vec<[f64; 3]>,
    pub regions: Vec<Vec<usize>>,
    pub views: ViewSet,
    pub geometry: PointGeometry,
    pub rendered: Tensor,
    pub depth: Tensor,
    pub label_maps: Tensor,
    pub labels: Tensor,
    pub gather: Gather,
}

impl Prepared {
    pub fn new(sample: &Sample, cfg: &ExperimentConfig) -> Result<Self> {
        let cloud = &sample.cloud;
        let views = project_views(cloud, &cfg.projection)?;
        let (h, w) = (views.height, views.width);
        let rendered: Vec<Vec<f64>> = views.views.iter().map(|v| v.rendered.clone()).collect();
        let depth: Vec<Vec<f64>> = views.views.iter().map(|v| v.depth.clone()).collect();
        let lm = label_maps(&views, &cloud.point_labels);
        let labels: Vec<f64> = cloud.point_labels.iter().map(|&l| l as u8 as f64).collect();
        let regions = if !cloud.object_label {
            Vec::new()
        } else if cloud.defect.is_some() {
            // One injected defect is one region.
            vec![(0..cloud.len()).filter(|&i| cloud.point_labels[i]).collect()]
        } else {
            knn_regions(&cloud.points, &cloud.point_labels, 8)
        };
        Ok(Prepared {
            id: sample.record.id.clone(),
            category: sample.record.category,
            object_label: cloud.object_label,
            point_labels: cloud.point_labels.clone(),
            points: cloud.points.clone(),
            regions,
            geometry: PointGeometry::new(&cloud.points, cfg.encoder.point_neighbors)?,
            rendered: image_stack(&rendered, h, w)?,
            depth: image_stack(&depth, h, w)?,
            label_maps: image_stack(&lm, h, w)?,
            labels: Tensor::from_vec(labels, cloud.len(), &Device::Cpu)?,
            gather: Gather::new(&views, cfg.scoring.normalization)?,
            views,
        })
    }
}

/// Which visual features feed scoring at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Rendered stream only, as after stage 1.
    RenderOnly,
    /// The configured stream(s) with adapters and fusion.
    Full,
}

/// Global `[v, d]` and local `[v, p, d]` features.
#[derive(Clone, Debug)]
pub struct Features {
    pub global: Tensor,
    pub local: Tensor,
}

/// Outputs of the differentiable scoring path.
#[derive(Clone, Debug)]
pub struct TensorScores {
    pub view_prob: Tensor,
    pub object_prob: Tensor,
    pub maps: Tensor,
    pub points: Tensor,
}

/// Prompt embeddings of one object.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub normal: Tensor,
    pub anomaly: Tensor,
}

pub struct Model {
    pub config: ExperimentConfig,
    pub store: ParamStore,
    pub prompts: PromptGenerator,
    pub text: TextEncoder,
    pub vision: VisionEncoder,
    pub lora: Option<LoraAdapter>,
    pub srm: Option<Srm>,
    kh: Tensor,
    kw: Tensor,
}

impl Model {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let enc = &config.encoder;
        let mut store = ParamStore::new(config.seed);
        let prompts = PromptGenerator::new(&mut store, enc, &config.prompts, &config.ablation)?;
        let text = TextEncoder::new(&mut Init::new(&mut store, Group::TextEncoder), enc)?;
        let vision = VisionEncoder::new(&mut Init::new(&mut store, Group::VisionEncoder), enc)?;
        let lora = if config.ablation.uses_depth() {
            let mut init = Init::new(&mut store, Group::DepthLora);
            let layers = vision
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| LoraLayer::new(&mut init, &format!("blocks.{i}"), &b.fc1, &b.fc2, config.lora.rank, config.lora.alpha))
                .collect::<Result<_>>()?;
            Some(LoraAdapter { layers })
        } else {
            None
        };
        let srm = if config.ablation.uses_srm() { Some(Srm::new(&mut Init::new(&mut store, Group::Srm), enc.dim)?) } else { None };
        let g = enc.grid();
        let kh = smoothing_upsample_matrix(config.projection.height, g, config.scoring.sigma);
        let kw = smoothing_upsample_matrix(config.projection.width, g, config.scoring.sigma);
        Ok(Model {
            kh: Tensor::from_vec(kh, (config.projection.height, g), &Device::Cpu)?,
            kw: Tensor::from_vec(kw, (config.projection.width, g), &Device::Cpu)?,
            config: config.clone(),
            store,
            prompts,
            text,
            vision,
            lora,
            srm,
        })
    }

    /// Runs `f` with every group frozen, restoring the flags afterwards.
    pub fn frozen<T>(&self, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let saved: Vec<(Group, bool)> = Group::ALL.iter().map(|&g| (g, self.store.is_frozen(g))).collect();
        self.store.train_only(&[]);
        let out = f();
        for (g, fz) in saved {
            self.store.set_frozen(g, fz);
        }
        out
    }

    pub fn embeddings(&self, p: &Prepared) -> Result<Embeddings> {
        let tokens = self.prompts.tokens(&p.geometry)?;
        let (tn, ta) = assemble_prompts(&tokens, self.text.context())?;
        Ok(Embeddings { normal: self.text.forward(&tn)?, anomaly: self.text.forward(&ta)? })
    }

    pub fn render_features(&self, p: &Prepared) -> Result<Features> {
        let (global, local) = self.vision.forward(&p.rendered, None)?;
        Ok(Features { global, local })
    }

    pub fn depth_features(&self, p: &Prepared) -> Result<Features> {
        let (global, local) = self.vision.forward(&p.depth, self.lora.as_ref())?;
        Ok(Features { global, local })
    }

    /// Features for scoring. `render` may carry precomputed rendered-stream features.
    pub fn features(&self, p: &Prepared, mode: EvalMode, render: Option<&Features>) -> Result<Features> {
        let get_render = || -> Result<Features> {
            match render {
                Some(f) => Ok(f.clone()),
                None => self.render_features(p),
            }
        };
        if mode == EvalMode::RenderOnly {
            return get_render();
        }
        match self.config.ablation.stream {
            Stream::Render => get_render(),
            Stream::Depth => self.depth_features(p),
            Stream::Both => {
                let r = get_render()?;
                let d = self.depth_features(p)?;
                match &self.srm {
                    Some(srm) => {
                        let (global, local) = srm.fuse(&r.global, &d.global, &r.local, &d.local)?;
                        Ok(Features { global, local })
                    }
                    None => Ok(Features {
                        global: ((r.global + d.global)? * 0.5)?,
                        local: ((r.local + d.local)? * 0.5)?,
                    }),
                }
            }
        }
    }

    /// Differentiable per-view probabilities, final maps, and point scores.
    pub fn score_tensors(&self, f: &Features, e: &Embeddings, p: &Prepared) -> Result<TensorScores> {
        let tau = self.config.scoring.temperature;
        let tn = normalize_rows(&e.normal.unsqueeze(0)?)?.t()?;
        let ta = normalize_rows(&e.anomaly.unsqueeze(0)?)?.t()?;
        let gh = normalize_rows(&f.global)?;
        let logit = ((gh.matmul(&ta)? - gh.matmul(&tn)?)? / tau)?.squeeze(1)?;
        let view_prob = sigmoid(&logit)?;
        let object_prob = view_prob.mean(0)?;
        let (v, np, d) = f.local.dims3()?;
        let g = self.config.encoder.grid();
        if np != g * g {
            return Err(GsError::config(format!("{np} patch features do not form a {g}x{g} grid")));
        }
        let lh = normalize_rows(&f.local)?.reshape((v * np, d))?;
        let patch = sigmoid(&((lh.matmul(&ta)? - lh.matmul(&tn)?)? / tau)?)?.reshape((v, g, g))?;
        let maps = self.kh.broadcast_matmul(&patch)?.broadcast_matmul(&self.kw.t()?)?;
        let points = p.gather.apply(&maps)?;
        Ok(TensorScores { view_prob, object_prob, maps, points })
    }

    /// Stage objective and its components for one object.
    pub fn loss(&self, stage: Stage, s: &TensorScores, f: &Features, p: &Prepared) -> Result<(Tensor, LossReport)> {
        let cla = loss_cla_t(&s.object_prob, p.object_label)?;
        let seg = loss_seg_t(&s.points, &p.labels, &s.maps, &p.label_maps, &self.config.loss)?;
        let mut total = (&cla + &seg)?;
        let mut con_v = 0.0;
        if stage == Stage::Two && self.config.ablation.use_con_loss {
            let con = loss_con_t(&f.global)?;
            con_v = con.to_scalar::<f64>()?;
            total = (total + (con * self.config.loss.consistency_weight)?)?;
        }
        let report = LossReport {
            stage,
            cla: cla.to_scalar::<f64>()?,
            seg: seg.to_scalar::<f64>()?,
            con: con_v,
            total: total.to_scalar::<f64>()?,
        };
        Ok((total, report))
    }

    /// Full inference through the reference (non-tensor) scoring path.
    pub fn infer(&self, p: &Prepared, mode: EvalMode) -> Result<ScoreResult> {
        self.frozen(|| {
            let e = self.embeddings(p)?;
            let f = self.features(p, mode, None)?;
            let (v, np, d) = f.local.dims3()?;
            let g = self.config.encoder.grid();
            let pack = FeaturePack {
                dim: d,
                grid: (g, g),
                global: f.global.to_vec2::<f64>()?,
                local: f.local.reshape((v, np * d))?.to_vec2::<f64>()?,
            };
            score_object(&pack, &e.normal.to_vec1::<f64>()?, &e.anomaly.to_vec1::<f64>()?, &p.views, &self.config.scoring)
        })
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let groups: BTreeSet<Group> = meta.groups.iter().copied().collect();
        let tensors: Vec<(String, Tensor)> =
            self.store.iter().filter(|(_, p)| groups.contains(&p.group())).map(|(n, p)| (n.clone(), p.var().as_tensor().clone())).collect();
        let mut info = HashMap::new();
        info.insert("gsclip".to_string(), serde_json::to_string(meta)?);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        safetensors::serialize_to_file(tensors, &Some(info), path).map_err(|e| GsError::Format(e.to_string()))
    }

    pub fn meta(&self, stage: Stage, train_categories: &[Category]) -> Result<CheckpointMeta> {
        let groups: Vec<Group> = self
            .store
            .groups()
            .into_iter()
            .filter(|g| stage == Stage::Two || !matches!(g, Group::DepthLora | Group::Srm))
            .collect();
        let checksums = groups.iter().map(|&g| Ok((g, self.store.checksum(g)?))).collect::<Result<_>>()?;
        let frozen = groups.iter().map(|&g| (g, self.store.is_frozen(g))).collect();
        Ok(CheckpointMeta {
            config: self.config.clone(),
            stage: stage.number(),
            train_categories: train_categories.to_vec(),
            groups,
            frozen,
            checksums,
        })
    }

    /// Rebuilds a model from a checkpoint; groups absent from the file keep
    /// their fresh initialization.
    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (meta, values) = read_checkpoint(path)?;
        let model = Model::new(&meta.config)?;
        model.restore(&meta, &values)?;
        Ok((model, meta))
    }

    /// Copies the checkpoint's groups into this model, checking that the
    /// architectures agree and that the restored weights match their checksums.
    pub fn restore(&self, meta: &CheckpointMeta, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let present = self.store.groups();
        for g in &meta.groups {
            if !present.contains(g) {
                return Err(GsError::config(format!("checkpoint group {g} does not exist in this architecture")));
            }
        }
        for name in values.keys() {
            if self.store.get(name).is_none() {
                return Err(GsError::config(format!("checkpoint parameter '{name}' does not exist in this architecture")));
            }
        }
        self.store.load_groups(values, &meta.groups)?;
        for g in &meta.groups {
            if meta.checksums.get(g) != Some(&self.store.checksum(*g)?) {
                return Err(GsError::Format(format!("checksum mismatch for group {g}")));
            }
        }
        Ok(())
    }
}

/// Reads the header and tensors of a checkpoint file.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, Tensor>)> {
    let bytes = std::fs::read(path)?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| GsError::Format(e.to_string()))?;
    let meta_text = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get("gsclip"))
        .ok_or_else(|| GsError::Format(format!("{} carries no model header", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_text)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok((meta, tensors.into_iter().collect()))
}

/// JSON header stored inside every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ExperimentConfig,
    pub stage: u8,
    pub train_categories: Vec<Category>,
    pub groups: Vec<Group>,
    pub frozen: BTreeMap<Group, bool>,
    pub checksums: BTreeMap<Group, String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;
    use crate::dataset::Dataset;
    use crate::projection::back_project;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.encoder.image = 48;
        c.encoder.depth = 1;
        c.encoder.dim = 16;
        c.encoder.point_dim = 16;
        c.encoder.point_global_dim = 24;
        c.encoder.heads = 2;
        c.projection.height = 48;
        c.projection.width = 48;
        c.projection.views = 3;
        c.projection.splat_radius = 1.5;
        c.data = DataConfig { per_category: 2, test_per_category: 2, points: 300, ..Default::default() };
        c
    }

    #[test]
    fn gather_equals_reference_back_projection() {
        let cfg = tiny_config();
        let d = Dataset::generate(&cfg.data, 0).unwrap();
        let p = Prepared::new(&d.samples[1], &cfg).unwrap();
        let hw = p.views.pixels();
        let maps: Vec<Vec<f64>> = (0..3).map(|i| (0..hw).map(|j| ((i * hw + j) as f64 * 0.37).sin().abs()).collect()).collect();
        let t = image_stack(&maps, 48, 48).unwrap();
        for norm in [ViewNormalization::ViewCount, ViewNormalization::VisibleCount] {
            let g = Gather::new(&p.views, norm).unwrap();
            let got = g.apply(&t).unwrap().to_vec1::<f64>().unwrap();
            let want = back_project(&maps, &p.views, norm).unwrap();
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tensor_scoring_matches_reference() {
        let cfg = tiny_config();
        let d = Dataset::generate(&cfg.data, 0).unwrap();
        let p = Prepared::new(&d.samples[1], &cfg).unwrap();
        let m = Model::new(&cfg).unwrap();
        m.frozen(|| {
            let e = m.embeddings(&p)?;
            let f = m.features(&p, EvalMode::Full, None)?;
            let s = m.score_tensors(&f, &e, &p)?;
            let r = m.infer(&p, EvalMode::Full)?;
            let pts = s.points.to_vec1::<f64>()?;
            for (a, b) in pts.iter().zip(&r.point_scores) {
                assert!((a - b).abs() < 1e-9);
            }
            let vp = s.view_prob.to_vec1::<f64>()?;
            for (a, b) in vp.iter().zip(&r.per_view_prob) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((s.object_prob.to_scalar::<f64>()? - r.object_prob).abs() < 1e-12);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_config();
        let m = Model::new(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        let meta = m.meta(Stage::One, &cfg.data.train_categories).unwrap();
        assert!(!meta.groups.contains(&Group::Srm) && !meta.groups.contains(&Group::DepthLora));
        m.save(&path, &meta).unwrap();
        let (back, meta2) = Model::load(&path).unwrap();
        assert_eq!(meta, meta2);
        for g in &meta.groups {
            assert_eq!(back.store.checksum(*g).unwrap(), m.store.checksum(*g).unwrap());
        }
    }
}
