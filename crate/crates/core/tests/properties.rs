use candle_core::{Device, Tensor, D};
use proptest::prelude::*;

use gsclip::config::{Ablation, ExperimentConfig, Stream};
use gsclip::fusion::SrmBranch;
use gsclip::geometry::{defect_anchor, generate_shape, inject_defect, Category, DefectKind, DefectSpec};
use gsclip::losses::{loss_con, loss_seg, LossConfig};
use gsclip::metrics::{auroc, pro};
use gsclip::neighbors::dist2;
use gsclip::nn::{Group, Init, ParamStore};
use gsclip::projection::{back_project, project_views, ProjectionConfig, ViewNormalization};
use gsclip::prompts::{outlier_scores, top_k};
use gsclip::scoring::{classify_view, gaussian_filter, score_object, FeaturePack, ScoringConfig};

fn category() -> impl Strategy<Value = Category> {
    prop::sample::select(Category::ALL.to_vec())
}

fn kind() -> impl Strategy<Value = DefectKind> {
    prop::sample::select(DefectKind::ALL.to_vec())
}

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn defects_are_local_and_labels_consistent(
        cat in category(),
        kind in kind(),
        center in prop::array::uniform3(-1.0f64..1.0),
        radius in 0.05f64..0.5,
        magnitude in 0.02f64..0.3,
        seed in any::<u64>(),
    ) {
        prop_assume!(center.iter().map(|c| c * c).sum::<f64>() > 1e-3);
        let cloud = generate_shape(cat, 512, seed).unwrap();
        let spec = DefectSpec { kind, center, radius, magnitude };
        let Ok(out) = inject_defect(&cloud, &spec, seed) else { return Ok(()); };
        prop_assert_eq!(out.object_label, out.point_labels.iter().any(|&l| l));
        let again = inject_defect(&cloud, &spec, seed).unwrap();
        prop_assert_eq!(&again.points, &out.points);
        prop_assert_eq!(&again.point_labels, &out.point_labels);

        let anchor = cloud.points[defect_anchor(&cloud.points, &center)];
        let far = |p: &[f64; 3]| dist2(p, &anchor) > (1.5 * radius).powi(2);
        if kind == DefectKind::MissingRegion {
            // survivors keep their order and every far point survives
            let mut it = out.points.iter().peekable();
            for p in &cloud.points {
                if it.peek() == Some(&p) {
                    it.next();
                } else {
                    prop_assert!(!far(p));
                }
            }
            prop_assert!(it.next().is_none());
        } else {
            prop_assert_eq!(out.points.len(), cloud.points.len());
            for (a, b) in cloud.points.iter().zip(&out.points) {
                if far(a) {
                    prop_assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn indicator_maps_back_project_to_their_owner(
        cat in category(),
        seed in any::<u64>(),
        views in 1usize..5,
        pick in any::<prop::sample::Index>(),
    ) {
        let cloud = generate_shape(cat, 300, seed).unwrap();
        let cfg = ProjectionConfig { views, height: 40, width: 40, ..Default::default() };
        let vs = project_views(&cloud, &cfg).unwrap();
        prop_assert_eq!(&project_views(&cloud, &cfg).unwrap(), &vs);
        // the indicator of the pixels owned by j alone
        let sole = |v: &gsclip::projection::View, px: usize, j: usize| v.pixel_owners(px) == [j as u32];
        let owners: Vec<usize> =
            (0..vs.n_points).filter(|&j| vs.views.iter().any(|v| (0..vs.pixels()).any(|px| sole(v, px, j)))).collect();
        prop_assume!(!owners.is_empty());
        let j = owners[pick.index(owners.len())];
        let maps: Vec<Vec<f64>> =
            vs.views.iter().map(|v| (0..vs.pixels()).map(|px| if sole(v, px, j) { 1.0 } else { 0.0 }).collect()).collect();
        for norm in [ViewNormalization::ViewCount, ViewNormalization::VisibleCount] {
            let s = back_project(&maps, &vs, norm).unwrap();
            for (k, &x) in s.iter().enumerate() {
                prop_assert_eq!(x > 0.0, k == j, "point {}", k);
            }
        }
    }

    #[test]
    fn convex_shapes_are_fully_visible(seed in any::<u64>(), cube in any::<bool>()) {
        let cat = if cube { Category::Cube } else { Category::Sphere };
        let cloud = generate_shape(cat, 1024, seed).unwrap();
        let vs = project_views(&cloud, &ProjectionConfig { views: 9, ..Default::default() }).unwrap();
        prop_assert!(vs.visible_counts().iter().all(|&c| c >= 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn outlier_scores_stay_in_range(
        feats in prop::collection::vec(vector(6), 1..30),
        protos in prop::collection::vec(vector(6), 1..10),
    ) {
        let s = outlier_scores(&feats, &protos).unwrap();
        prop_assert!(s.iter().all(|&x| (0.0..=2.0).contains(&x)));
        // a scaled copy of a prototype with exactly representable coordinates
        let p: Vec<f64> = protos[0].iter().map(|x| (x * 8.0).round()).collect();
        prop_assume!(p.iter().any(|&x| x != 0.0));
        let f: Vec<f64> = p.iter().map(|x| x * 2.0).collect();
        let mut bank = protos.clone();
        bank.push(p);
        prop_assert_eq!(outlier_scores(&[f], &bank).unwrap(), vec![0.0]);
    }

    #[test]
    fn top_k_replaces_exactly_one(scores in prop::collection::vec(0.0f64..2.0, 2..60), k in 1usize..10) {
        let k = k.min(scores.len());
        let before = top_k(&scores, k).unwrap();
        let kth = before.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        let mut grown = scores.clone();
        grown.push(kth + 0.5);
        let after = top_k(&grown, k).unwrap();
        let new = grown.len() - 1;
        prop_assert!(after.contains(&new));
        let kept = after.iter().filter(|i| before.contains(i)).count();
        prop_assert_eq!(kept, k - 1);
    }

    #[test]
    fn view_probability_rises_with_anomaly_similarity(
        g in vector(6),
        n in vector(6),
        a in vector(6),
        t in 0.01f64..1.0,
        scale in 0.01f64..100.0,
    ) {
        prop_assume!(g.iter().any(|x| x.abs() > 1e-3) && n.iter().any(|x| x.abs() > 1e-3) && a.iter().any(|x| x.abs() > 1e-3));
        let tau = 0.07;
        let p = classify_view(&g, &n, &a, tau).unwrap();
        // moving a towards g raises cos(g, a) and leaves cos(g, n) alone
        let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let an = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let closer: Vec<f64> = a.iter().zip(&g).map(|(x, y)| (1.0 - t) * x / an + t * y / gn).collect();
        let cos = |u: &[f64], v: &[f64]| {
            u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
                / (u.iter().map(|x| x * x).sum::<f64>().sqrt() * v.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        prop_assume!(cos(&g, &closer) > cos(&g, &a) + 1e-9);
        prop_assert!(classify_view(&g, &n, &closer, tau).unwrap() > p);
        let gs: Vec<f64> = g.iter().map(|x| x * scale).collect();
        prop_assert!((classify_view(&gs, &n, &a, tau).unwrap() - p).abs() < 1e-12);
    }

    #[test]
    fn consistency_loss_is_bounded(globals in prop::collection::vec(vector(5), 1..9), scale in 0.1f64..10.0) {
        prop_assume!(globals.iter().all(|g| g.iter().any(|x| x.abs() > 1e-3)));
        let mean: Vec<f64> = (0..5).map(|i| globals.iter().map(|g| g[i]).sum::<f64>()).collect();
        prop_assume!(mean.iter().any(|x| x.abs() > 1e-3));
        let l = loss_con(&globals).unwrap();
        prop_assert!((0.0..=2.0).contains(&l));
        let collinear: Vec<Vec<f64>> = (0..globals.len()).map(|i| globals[0].iter().map(|x| x * scale * (i + 1) as f64).collect()).collect();
        prop_assert!(loss_con(&collinear).unwrap().abs() < 1e-12);
    }

    #[test]
    fn segmentation_loss_ignores_point_order(
        pairs in prop::collection::vec((0.001f64..0.999, any::<bool>()), 2..80),
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<f64> = pairs.iter().map(|p| p.1 as u8 as f64).collect();
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let ps: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let pl: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
        let cfg = LossConfig::default();
        let a = loss_seg(&scores, &labels, &[], &[], &cfg).unwrap();
        let b = loss_seg(&ps, &pl, &[], &[], &cfg).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn auroc_ignores_monotone_transforms(
        pairs in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..100),
    ) {
        let s: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let l: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
        let t: Vec<f64> = s.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
    }

    #[test]
    fn pro_never_drops_when_regions_improve(
        pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 4..100),
        boost in prop::collection::vec(0.0f64..0.5, 100),
    ) {
        let s: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let l: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
        let anomalous: Vec<usize> = (0..l.len()).filter(|&i| l[i]).collect();
        let (a, b) = anomalous.split_at(anomalous.len() / 2);
        let regions: Vec<Vec<usize>> = [a.to_vec(), b.to_vec()].into_iter().filter(|r| !r.is_empty()).collect();
        let better: Vec<f64> = s.iter().enumerate().map(|(i, &x)| if l[i] { x + boost[i] } else { x }).collect();
        prop_assert!(pro(&better, &l, &regions, 0.3).unwrap() >= pro(&s, &l, &regions, 0.3).unwrap() - 1e-12);
    }

    #[test]
    fn fusion_attention_rows_are_distributions(seed in any::<u64>(), m in 1usize..6, b in 1usize..3) {
        let mut store = ParamStore::new(seed);
        let branch = SrmBranch::new(&mut Init::new(&mut store, Group::Srm), "l", 8).unwrap();
        let r = Tensor::randn(0.0f64, 1.0, (b, m, 8), &Device::Cpu).unwrap();
        let d = Tensor::randn(0.0f64, 1.0, (b, m, 8), &Device::Cpu).unwrap();
        let t = branch.trace(&r, &d).unwrap();
        for a in [t.attn_r, t.attn_d] {
            for v in a.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap() {
                prop_assert!((v - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn configs_round_trip_for_every_toggle(
        stream in prop::sample::select(vec![Stream::Render, Stream::Depth, Stream::Both]),
        toggles in prop::array::uniform4(any::<bool>()),
        seed in 0..=i64::MAX as u64,
        tau in 0.001f64..1.0,
    ) {
        let mut c = ExperimentConfig {
            seed,
            ablation: Ablation {
                stream,
                use_srm: toggles[0],
                use_shape_prompt: toggles[1],
                use_defect_prompt: toggles[2],
                use_con_loss: toggles[3],
            },
            ..Default::default()
        };
        c.scoring.temperature = tau;
        prop_assert!(c.validate().is_ok());
        prop_assert_eq!(&ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap(), &c);
        prop_assert_eq!(&ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap(), &c);
        c.seed = seed | (1 << 63);
        prop_assert!(c.validate().is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn score_maps_normalize_and_compose(seed in any::<u64>(), sigma in 0.5f64..4.0, scale in 0.01f64..100.0) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cloud = generate_shape(Category::Torus, 256, seed).unwrap();
        let vs = project_views(&cloud, &ProjectionConfig { views: 2, height: 36, width: 36, ..Default::default() }).unwrap();
        let (d, g) = (6, 4);
        let mut v = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let pack = FeaturePack { dim: d, grid: (g, g), global: vec![v(d), v(d)], local: vec![v(g * g * d), v(g * g * d)] };
        let (n, a) = (v(d), v(d));
        let cfg = ScoringConfig { sigma, ..Default::default() };
        let r = score_object(&pack, &n, &a, &vs, &cfg).unwrap();
        for i in 0..2 {
            for (x, y) in r.maps_normal[i].iter().zip(&r.maps_anomaly[i]) {
                prop_assert!((x + y - 1.0).abs() < 1e-12);
            }
            let smooth = gaussian_filter(&r.maps_anomaly[i], 36, 36, sigma);
            for (x, y) in r.maps_final[i].iter().zip(&smooth) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
        let scaled = FeaturePack {
            global: pack.global.iter().map(|r| r.iter().map(|x| x * scale).collect()).collect(),
            local: pack.local.iter().map(|r| r.iter().map(|x| x * scale).collect()).collect(),
            ..pack.clone()
        };
        let r2 = score_object(&scaled, &n, &a, &vs, &cfg).unwrap();
        for (x, y) in r.point_scores.iter().zip(&r2.point_scores) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
