//! Acceptance suite: one test per shipping criterion, each printing a
//! PASS line via its test name. Heavy training criteria share a mutex so
//! wall-clock assertions are not skewed by parallel test threads.

use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use sovstg::ablate::{preset_variants, variant_config};
use sovstg::checkpoint::Checkpoint;
use sovstg::config::{parse_kv, RunConfig};
use sovstg::data::{generate_dataset, load_dataset};
use sovstg::scene::SceneSpec;
use sovstg::trainer::{build_model, rasterize_split, train_run};
use sovstg_core::advisor::AdvisorProvider;
use sovstg_core::decoder::{so_fuse, DeformAttn, SoAttention};
use sovstg_core::denoise::{build_dn_queries, flip_object_label, flip_verb_label, DnConfig};
use sovstg_core::evalmap::{
    evaluate_map, EvalConfig, EvalDetection, EvalGroundTruth, EvalSetting,
};
use sovstg_core::features::{FeatureLevel, ImageRaster, MultiScaleFeatures};
use sovstg_core::geometry::{asmbr_raw, iou, make_asmbr, BBox};
use sovstg_core::graph::Graph;
use sovstg_core::hoi::{multi_hot, HoiInstance};
use sovstg_core::loss::{compute_losses, dn_losses, LossWeights};
use sovstg_core::matching::{brute_force_match, hungarian_match};
use sovstg_core::model::{Model, ModelConfig};
use sovstg_core::nn::{Fwd, ParamSet};
use sovstg_core::priors::{init_inference_queries, CoefficientMatrices, LabelEmbeddingBank};
use sovstg_core::rng::Rng;
use sovstg_core::tensor::Tensor;

static TRAIN_LOCK: Mutex<()> = Mutex::new(());

fn tmp_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

/// The shared desk-scale corpus: 2000 train / 500 test images, 6 objects,
/// 5 verbs.
fn corpus() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tmp_root().join("corpus");
        if !dir.join("dataset.json").exists() {
            std::fs::create_dir_all(&dir).unwrap();
            let spec = SceneSpec {
                train_images: 2000,
                test_images: 500,
                seed: 5,
                ..SceneSpec::default()
            };
            assert_eq!(spec.objects.len(), 6);
            assert_eq!(spec.verbs.len(), 5);
            generate_dataset(&spec, &dir, false).unwrap();
        }
        dir
    })
}

fn mini_corpus() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tmp_root().join("mini");
        if !dir.join("dataset.json").exists() {
            std::fs::create_dir_all(&dir).unwrap();
            let spec = SceneSpec {
                train_images: 24,
                test_images: 8,
                skew: 1.5,
                seed: 11,
                ..SceneSpec::default()
            };
            generate_dataset(&spec, &dir, false).unwrap();
        }
        dir
    })
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn random_box(rng: &mut Rng) -> BBox {
    BBox::new(
        rng.uniform(),
        rng.uniform(),
        rng.uniform_in(0.01, 1.0),
        rng.uniform_in(0.01, 1.0),
    )
}

// --- criterion 1: geometry oracle -----------------------------------------

#[test]
fn acceptance_01_geometry_oracle() {
    let start = Instant::now();
    // independent direct evaluation of the verb-box definition, including the
    // same clamp into the valid range
    let oracle = |s: &BBox, o: &BBox| -> BBox {
        BBox {
            cx: ((s.cx + o.cx) / 2.0).clamp(0.0, 1.0),
            cy: ((s.cy + o.cy) / 2.0).clamp(0.0, 1.0),
            w: ((s.w + o.w) / 2.0 + (s.cx - o.cx).abs()).clamp(1e-4, 1.0),
            h: ((s.h + o.h) / 2.0 + (s.cy - o.cy).abs()).clamp(1e-4, 1.0),
        }
    };
    let mut rng = Rng::new(101);
    for trial in 0..10_000 {
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        let got = make_asmbr(&a, &b);
        let want = oracle(&a, &b);
        for (g, w) in got.to_array().iter().zip(want.to_array()) {
            assert!((g - w).abs() <= 1e-9, "trial {trial}: {got:?} vs {want:?}");
        }
        // raw form matches the unclamped formula exactly
        let raw = asmbr_raw(&a, &b);
        assert!((raw.w - ((a.w + b.w) / 2.0 + (a.cx - b.cx).abs())).abs() <= 1e-12);
        // symmetry
        let swapped = make_asmbr(&b, &a);
        for (g, w) in got.to_array().iter().zip(swapped.to_array()) {
            assert!((g - w).abs() <= 1e-12);
        }
        // identical-box identity
        let same = make_asmbr(&a, &a);
        for (g, w) in same.to_array().iter().zip(a.to_array()) {
            assert!((g - w).abs() <= 1e-12);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "geometry oracle took {elapsed:.2}s");
    println!("criterion 1 (geometry oracle, {elapsed:.2}s): PASS");
}

// --- criterion 2: denoising statistics ------------------------------------

#[test]
fn acceptance_02_denoising_statistics() {
    let start = Instant::now();
    let trials = 100_000;
    let mut rng = Rng::new(202);

    // object flip frequency tracks the configured rate
    let flips = (0..trials)
        .filter(|_| flip_object_label(2, 0.3, 6, &mut rng).unwrap() != 2)
        .count();
    let freq = flips as f64 / trials as f64;
    assert!((freq - 0.3).abs() <= 0.01, "object flip frequency {freq}");

    // verb bits: ground truth always survives; class-wise rate holds
    let gt = multi_hot(&[2, 5], 10);
    let mut bit_counts = vec![0usize; 10];
    for _ in 0..trials {
        let noised = flip_verb_label(&gt, 1.0, 0.4, &mut rng).unwrap();
        assert!(noised[2] && noised[5], "ground-truth verb bit lost");
        for (i, &b) in noised.iter().enumerate() {
            if b && !gt[i] {
                bit_counts[i] += 1;
            }
        }
    }
    for (i, &c) in bit_counts.iter().enumerate() {
        if gt[i] {
            continue;
        }
        let f = c as f64 / trials as f64;
        assert!((f - 0.4).abs() <= 0.01, "class-wise flip rate {f} at bit {i}");
    }

    // label-level noising rate, observable with the class-wise rate at 1
    let noised_count = (0..trials)
        .filter(|_| {
            let out = flip_verb_label(&gt, 0.3, 1.0, &mut rng).unwrap();
            out.iter().filter(|&&b| b).count() > 2
        })
        .count();
    let f = noised_count as f64 / trials as f64;
    assert!((f - 0.3).abs() <= 0.01, "verb noising rate {f}");

    // fully clean rates reproduce the exact ground-truth encodings
    let mut ps = ParamSet::new();
    let bank = LabelEmbeddingBank::new(&mut ps, "bank", 6, 5, 16, &mut rng);
    let clean = DnConfig {
        obj_flip_rate: 0.0,
        verb_noise_rate: 0.0,
        box_noise_scale: 0.0,
        ..DnConfig::default()
    };
    for _ in 0..200 {
        let inst = HoiInstance {
            subject: random_box(&mut rng).clamped(),
            object: random_box(&mut rng).clamped(),
            object_class: rng.below(6),
            verbs: {
                let mut v = multi_hot(&[rng.below(5)], 5);
                v[rng.below(5)] = true;
                v
            },
        };
        let batch = build_dn_queries(
            std::slice::from_ref(&inst),
            &bank,
            &clean,
            4,
            &mut rng,
        )
        .unwrap();
        let q = batch.query_values(&ps, &bank);
        let clean_obj = bank.select_object_vector(&ps, inst.object_class).unwrap();
        let clean_verb = bank
            .encode_verb_multilabel(&ps, &inst.verb_indices())
            .unwrap();
        let np = clean.groups_per_kind;
        for j in 0..np {
            assert_eq!(q.row(j), clean_obj.as_slice());
            assert_eq!(q.row(np + j), clean_verb.as_slice());
        }
        for r in 0..2 * np {
            assert_eq!(batch.subject_anchors[r], inst.subject);
            assert_eq!(batch.object_anchors[r], inst.object);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "denoising statistics took {elapsed:.2}s");
    println!("criterion 2 (denoising statistics, {elapsed:.2}s): PASS");
}

// --- criterion 3: denoising leakage ---------------------------------------

#[test]
fn acceptance_03_mask_leakage() {
    let image = {
        let mut img = ImageRaster::new(12, 12);
        for y in 0..12 {
            for x in 0..12 {
                img.set_pixel(y, x, [x as f64 / 12.0, y as f64 / 12.0, 0.4]);
            }
        }
        img
    };
    for seed in 0..10u64 {
        let mut cfg = ModelConfig::tiny(5, 4, 7);
        let vla = seed >= 8; // a couple of advisor-equipped models too
        cfg.switches.vla = vla;
        cfg.switches.text_init = false;
        let mut rng = Rng::new(1000 + seed);
        let model = Model::new(cfg, &mut rng, None).unwrap();
        let gts = vec![
            HoiInstance {
                subject: BBox::new(0.35, 0.4, 0.25, 0.3),
                object: BBox::new(0.7, 0.55, 0.2, 0.2),
                object_class: rng.below(5),
                verbs: multi_hot(&[rng.below(4)], 4),
            },
            HoiInstance {
                subject: BBox::new(0.35, 0.4, 0.25, 0.3),
                object: BBox::new(0.2, 0.7, 0.2, 0.18),
                object_class: rng.below(5),
                verbs: multi_hot(&[rng.below(4), rng.below(4)], 4),
            },
        ];
        let batch = build_dn_queries(&gts, &model.bank, &cfg.dn, cfg.num_queries, &mut rng)
            .unwrap();
        let mut garbage = build_dn_queries(&gts, &model.bank, &cfg.dn, cfg.num_queries, &mut rng)
            .unwrap();
        for v in garbage.obj_selection.data_mut() {
            *v = *v * -4.5 + 1.3;
        }
        for v in garbage.verb_selection.data_mut() {
            *v = *v * 7.1 - 0.2;
        }
        garbage.subject_anchors = garbage
            .subject_anchors
            .iter()
            .map(|_| random_box(&mut rng).clamped())
            .collect();
        garbage.object_anchors = garbage
            .object_anchors
            .iter()
            .map(|_| random_box(&mut rng).clamped())
            .collect();

        let f_ga = vla.then(|| Tensor::randn(cfg.advisor_tokens, cfg.advisor_dim, 1.0, &mut rng));
        let run = |b| {
            let g = Graph::new();
            let fwd = Fwd::new(&g, &model.params, false);
            let out = model.forward(&fwd, &image, Some(b), f_ga.as_ref()).unwrap();
            let mut tensors = vec![
                out.layers.last().unwrap().subject_boxes.value(),
                out.layers.last().unwrap().object_boxes.value(),
                out.layers.last().unwrap().obj_logits.value(),
                out.final_verb_logits.value(),
            ];
            tensors.extend(out.hoi_logits.last().map(|h| h.value()));
            tensors
        };
        let clean_out = run(&batch);
        let garbage_out = run(&garbage);
        for (a, b) in clean_out.iter().zip(&garbage_out) {
            for q in 0..model.cfg.num_queries {
                for (x, y) in a.row(q).iter().zip(b.row(q)) {
                    assert_eq!(
                        x.to_bits(),
                        y.to_bits(),
                        "seed {seed}: inference row {q} leaked"
                    );
                }
            }
        }
    }
    println!("criterion 3 (denoising mask leakage): PASS");
}

// --- criterion 4: gradient checks ------------------------------------------

fn check_grad_tensor(name: &str, analytic: &Tensor, mut f: impl FnMut(&Tensor) -> f64, at: &Tensor) {
    let eps = 1e-5;
    for i in 0..at.numel() {
        let mut up = at.clone();
        up.data_mut()[i] += eps;
        let mut dn = at.clone();
        dn.data_mut()[i] -= eps;
        let fd = (f(&up) - f(&dn)) / (2.0 * eps);
        let a = analytic.data()[i];
        if (a - fd).abs() < 1e-7 {
            continue;
        }
        assert!(
            rel_err(a, fd) < 1e-4,
            "{name}[{i}]: analytic {a} vs fd {fd}"
        );
    }
}

#[test]
fn acceptance_04a_gradcheck_query_initialization() {
    let mut rng = Rng::new(41);
    let mut ps = ParamSet::new();
    let bank = LabelEmbeddingBank::new(&mut ps, "bank", 5, 4, 8, &mut rng);
    let coeffs = CoefficientMatrices::new(&mut ps, "coeffs", 4, 5, 4, &mut rng);
    let probe = Tensor::randn(4, 8, 1.0, &mut rng);
    let loss_with = |ps: &ParamSet| {
        let g = Graph::new();
        let fwd = Fwd::new(&g, ps, false);
        init_inference_queries(&fwd, &bank, &coeffs)
            .unwrap()
            .mul(g.input(probe.clone()))
            .sum()
            .value()
            .scalar_value()
    };
    let g = Graph::new();
    let fwd = Fwd::new(&g, &ps, true);
    let loss = init_inference_queries(&fwd, &bank, &coeffs)
        .unwrap()
        .mul(g.input(probe.clone()))
        .sum();
    let grads = g.backward(loss);
    let pg = fwd.param_grads(&grads);
    for (id, analytic) in pg {
        let name = ps.name(id).to_string();
        let base = ps.get(id).clone();
        let mut ps_fd = ParamSet::new();
        // rebuild a fresh mutable copy to vary one tensor at a time
        let _ = &mut ps_fd;
        let mut vary = |t: &Tensor| {
            let mut ps2 = clone_params(&ps);
            *ps2.get_mut(id) = t.clone();
            loss_with(&ps2)
        };
        check_grad_tensor(&name, &analytic, &mut vary, &base);
    }
    println!("criterion 4a (query-initialization gradients): PASS");
}

fn clone_params(ps: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (_, name, value) in ps.iter() {
        out.add(name.to_string(), value.clone());
    }
    out
}

#[test]
fn acceptance_04b_gradcheck_so_fusion() {
    let mut rng = Rng::new(42);
    let mut ps = ParamSet::new();
    let so = SoAttention::new(&mut ps, "so", 8, 2, &mut rng);
    let bank = LabelEmbeddingBank::new(&mut ps, "bank", 5, 4, 8, &mut rng);
    let e_s: Vec<Tensor> = (0..2).map(|_| Tensor::randn(4, 8, 0.8, &mut rng)).collect();
    let e_o: Vec<Tensor> = (0..2).map(|_| Tensor::randn(4, 8, 0.8, &mut rng)).collect();
    let probes: Vec<Tensor> = (0..2).map(|_| Tensor::randn(4, 8, 1.0, &mut rng)).collect();

    let eval = |ps: &ParamSet, e_s: &[Tensor], e_o: &[Tensor], want_grads: bool| {
        let g = Graph::new();
        let fwd = Fwd::new(&g, ps, want_grads);
        let s_nodes: Vec<_> = e_s
            .iter()
            .map(|t| if want_grads { g.leaf(t.clone()) } else { g.input(t.clone()) })
            .collect();
        let o_nodes: Vec<_> = e_o
            .iter()
            .map(|t| if want_grads { g.leaf(t.clone()) } else { g.input(t.clone()) })
            .collect();
        let fused = so_fuse(&fwd, &s_nodes, &o_nodes, Some(&so), fwd.param(bank.t_verb));
        let mut loss = g.input(Tensor::scalar(0.0));
        for (f, p) in fused.iter().zip(&probes) {
            loss = loss.add(f.mul(g.input(p.clone())).sum());
        }
        let v = loss.value().scalar_value();
        if !want_grads {
            return (v, vec![], vec![]);
        }
        let grads = g.backward(loss);
        let leaf_grads: Vec<Tensor> = s_nodes
            .iter()
            .chain(&o_nodes)
            .map(|n| grads.get(*n).unwrap().clone())
            .collect();
        let param_grads = fwd.param_grads(&grads);
        (v, leaf_grads, param_grads.into_iter().map(|(id, t)| (ps.name(id).to_string(), t)).collect())
    };

    let (_, leaf_grads, param_grads) = eval(&ps, &e_s, &e_o, true);
    // embeddings
    for (which, base) in e_s.iter().chain(&e_o).enumerate() {
        let analytic = &leaf_grads[which];
        check_grad_tensor(
            &format!("embedding {which}"),
            analytic,
            |t| {
                let mut es2 = e_s.clone();
                let mut eo2 = e_o.clone();
                if which < 2 {
                    es2[which] = t.clone();
                } else {
                    eo2[which - 2] = t.clone();
                }
                eval(&ps, &es2, &eo2, false).0
            },
            base,
        );
    }
    // verb priors and attention parameters
    for (name, analytic) in &param_grads {
        let id = ps.find(name).unwrap();
        let base = ps.get(id).clone();
        check_grad_tensor(
            name,
            analytic,
            |t| {
                let mut ps2 = clone_params(&ps);
                *ps2.get_mut(id) = t.clone();
                eval(&ps2, &e_s, &e_o, false).0
            },
            &base,
        );
    }
    println!("criterion 4b (subject-object fusion gradients): PASS");
}

#[test]
fn acceptance_04c_gradcheck_deformable_attention() {
    let mut rng = Rng::new(43);
    let mut ps = ParamSet::new();
    let attn = DeformAttn::new(&mut ps, "deform", 8, 2, 2, 2, &mut rng);
    let x0 = Tensor::randn(3, 8, 0.8, &mut rng);
    let lv0 = Tensor::randn(9, 8, 0.9, &mut rng); // 3×3
    let lv1 = Tensor::randn(4, 8, 0.9, &mut rng); // 2×2
    let boxes = vec![
        BBox::new(0.42, 0.5, 0.3, 0.35),
        BBox::new(0.61, 0.47, 0.22, 0.3),
        BBox::new(0.5, 0.62, 0.4, 0.28),
    ];
    let probe = Tensor::randn(3, 8, 1.0, &mut rng);

    let eval = |ps: &ParamSet, x: &Tensor, l0: &Tensor, l1: &Tensor, want: bool| {
        let g = Graph::new();
        let fwd = Fwd::new(&g, ps, want);
        let mk = |t: &Tensor| if want { g.leaf(t.clone()) } else { g.input(t.clone()) };
        let xn = mk(x);
        let t0 = mk(l0);
        let t1 = mk(l1);
        let feats = MultiScaleFeatures {
            levels: vec![
                FeatureLevel { h: 3, w: 3, valid_ratio: 1.0, tokens: t0 },
                FeatureLevel { h: 2, w: 2, valid_ratio: 1.0, tokens: t1 },
            ],
        };
        let out = attn.apply(&fwd, xn, &boxes, &feats);
        let loss = out.mul(g.input(probe.clone())).sum();
        let v = loss.value().scalar_value();
        if !want {
            return (v, vec![], vec![]);
        }
        let grads = g.backward(loss);
        (
            v,
            vec![
                grads.get(xn).unwrap().clone(),
                grads.get(t0).unwrap().clone(),
                grads.get(t1).unwrap().clone(),
            ],
            fwd.param_grads(&grads)
                .into_iter()
                .map(|(id, t)| (ps.name(id).to_string(), t))
                .collect::<Vec<_>>(),
        )
    };
    let (_, leaf_grads, param_grads) = eval(&ps, &x0, &lv0, &lv1, true);
    check_grad_tensor("query", &leaf_grads[0], |t| eval(&ps, t, &lv0, &lv1, false).0, &x0);
    check_grad_tensor("level0", &leaf_grads[1], |t| eval(&ps, &x0, t, &lv1, false).0, &lv0);
    check_grad_tensor("level1", &leaf_grads[2], |t| eval(&ps, &x0, &lv0, t, false).0, &lv1);
    for (name, analytic) in &param_grads {
        let id = ps.find(name).unwrap();
        let base = ps.get(id).clone();
        check_grad_tensor(
            name,
            analytic,
            |t| {
                let mut ps2 = clone_params(&ps);
                *ps2.get_mut(id) = t.clone();
                eval(&ps2, &x0, &lv0, &lv1, false).0
            },
            &base,
        );
    }
    println!("criterion 4c (deformable-attention gradients): PASS");
}

#[test]
fn acceptance_04d_gradcheck_vision_advisor_layer() {
    let mut rng = Rng::new(44);
    let mut ps = ParamSet::new();
    let adv = sovstg_core::advisor::VisionAdvisor::new(
        &mut ps, "vla", 8, 2, 1, 2, 16, 1, 6, 3, &mut rng,
    );
    let e_v0 = Tensor::randn(3, 8, 0.8, &mut rng);
    let f_ga = Tensor::randn(2, 6, 0.9, &mut rng);
    let lv = Tensor::randn(4, 8, 0.9, &mut rng);
    let boxes = vec![
        BBox::new(0.45, 0.5, 0.3, 0.3),
        BBox::new(0.6, 0.42, 0.25, 0.33),
        BBox::new(0.52, 0.6, 0.35, 0.3),
    ];
    let probe = Tensor::randn(3, 8, 1.0, &mut rng);
    let eval = |ps: &ParamSet, e_v: &Tensor, want: bool| {
        let g = Graph::new();
        let fwd = Fwd::new(&g, ps, want);
        let ev = if want { g.leaf(e_v.clone()) } else { g.input(e_v.clone()) };
        let feats = MultiScaleFeatures {
            levels: vec![FeatureLevel { h: 2, w: 2, valid_ratio: 1.0, tokens: g.input(lv.clone()) }],
        };
        let outs = adv.decode(&fwd, ev, &boxes, &f_ga, &feats, None, true);
        let loss = outs.last().unwrap().mul(g.input(probe.clone())).sum();
        let v = loss.value().scalar_value();
        if !want {
            return (v, None, vec![]);
        }
        let grads = g.backward(loss);
        (
            v,
            Some(grads.get(ev).unwrap().clone()),
            fwd.param_grads(&grads)
                .into_iter()
                .map(|(id, t)| (ps.name(id).to_string(), t))
                .collect::<Vec<_>>(),
        )
    };
    let (_, ev_grad, param_grads) = eval(&ps, &e_v0, true);
    check_grad_tensor("e_v", &ev_grad.unwrap(), |t| eval(&ps, t, false).0, &e_v0);
    for (name, analytic) in &param_grads {
        let id = ps.find(name).unwrap();
        let base = ps.get(id).clone();
        check_grad_tensor(
            name,
            analytic,
            |t| {
                let mut ps2 = clone_params(&ps);
                *ps2.get_mut(id) = t.clone();
                eval(&ps2, &e_v0, false).0
            },
            &base,
        );
    }
    println!("criterion 4d (vision-advisor-layer gradients): PASS");
}

#[test]
fn acceptance_04e_gradcheck_total_loss() {
    // Anchors fed to later layers and the verb boxes are stop-gradients by
    // design, so a finite-difference probe of the whole loss must hold that
    // geometry fixed: one decoder layer, box-refinement outputs zeroed (the
    // anchors then never move), and the parameters that *define* the frozen
    // geometry excluded here — their gradient paths are covered by the
    // component-level checks above and the loss-level box-coordinate check.
    let mut cfg = ModelConfig::tiny(4, 3, 5);
    cfg.num_layers = 1;
    cfg.switches.vla = true;
    cfg.switches.text_init = false;
    let mut rng = Rng::new(45);
    let mut model = Model::new(cfg, &mut rng, None).unwrap();
    for name in [
        "subject_box_head.layer0.lin2.weight",
        "subject_box_head.layer0.lin2.bias",
        "object_box_head.layer0.lin2.weight",
        "object_box_head.layer0.lin2.bias",
    ] {
        let id = model.params.find(name).unwrap();
        model.params.get_mut(id).scale_assign(0.0);
    }
    let frozen_geometry =
        |name: &str| name.contains("anchor_init") || name.contains("_box_head");
    let image = {
        let mut img = ImageRaster::new(cfg.input_res, cfg.input_res);
        for y in 0..cfg.input_res {
            for x in 0..cfg.input_res {
                img.set_pixel(y, x, [x as f64 / 12.0, y as f64 / 12.0, 0.5]);
            }
        }
        img
    };
    // one ground truth keeps the matching stable under tiny perturbations
    let gts = vec![HoiInstance {
        subject: BBox::new(0.4, 0.45, 0.3, 0.3),
        object: BBox::new(0.65, 0.6, 0.22, 0.2),
        object_class: 1,
        verbs: multi_hot(&[0, 2], 3),
    }];
    let mut gt_hoi = Tensor::zeros(1, 5);
    gt_hoi.set(0, 1, 1.0);
    gt_hoi.set(0, 3, 1.0);
    let batch = build_dn_queries(&gts, &model.bank, &cfg.dn, cfg.num_queries, &mut rng)
        .unwrap();
    let f_ga = Tensor::randn(cfg.advisor_tokens, cfg.advisor_dim, 0.8, &mut rng);
    let w = LossWeights::default();

    let eval = |ps_override: Option<(usize, &Tensor)>, want: bool| -> (f64, Vec<(String, Tensor)>) {
        // run the model with (optionally) one parameter tensor replaced; the
        // forward context reads values from whatever set it wraps, the model
        // only supplies the architecture and parameter handles
        let params_storage;
        let params: &ParamSet = match ps_override {
            None => &model.params,
            Some((idx, tensor)) => {
                let mut copy = clone_params(&model.params);
                let id = copy.ids().nth(idx).unwrap();
                *copy.get_mut(id) = tensor.clone();
                params_storage = copy;
                &params_storage
            }
        };
        let g = Graph::new();
        let fwd = Fwd::new(&g, params, want);
        let out = model
            .forward(&fwd, &image, Some(&batch), Some(&f_ga))
            .unwrap();
        let (inf, _) = compute_losses(
            &fwd,
            &out.layers,
            &out.hoi_logits,
            &gts,
            Some(&gt_hoi),
            &w,
            out.num_inference,
        )
        .unwrap();
        let dn = dn_losses(
            &fwd,
            &out.layers,
            &out.hoi_logits,
            &gts,
            Some(&gt_hoi),
            &w,
            out.num_inference,
            &batch.gt_index,
        )
        .unwrap();
        let total = inf.total.add(dn.total);
        let v = total.value().scalar_value();
        if !want {
            return (v, vec![]);
        }
        let grads = g.backward(total);
        (
            v,
            fwd.param_grads(&grads)
                .into_iter()
                .map(|(id, t)| (params.name(id).to_string(), t))
                .collect(),
        )
    };
    let (_, param_grads) = eval(None, true);
    let mut coord_rng = Rng::new(46);
    let mut checked = 0usize;
    for (name, analytic) in &param_grads {
        if frozen_geometry(name) {
            continue;
        }
        let id = model.params.find(name).unwrap();
        let base = model.params.get(id).clone();
        let idx = id.index();
        // sample a few coordinates per tensor to bound runtime
        let coords: Vec<usize> = (0..base.numel().min(3))
            .map(|_| coord_rng.below(base.numel()))
            .collect();
        for &c in &coords {
            let eps = 1e-5;
            let mut up = base.clone();
            up.data_mut()[c] += eps;
            let mut dn = base.clone();
            dn.data_mut()[c] -= eps;
            let fu = eval(Some((idx, &up)), false).0;
            let fd = eval(Some((idx, &dn)), false).0;
            let numeric = (fu - fd) / (2.0 * eps);
            let a = analytic.data()[c];
            if (a - numeric).abs() < 1e-7 {
                checked += 1;
                continue;
            }
            assert!(
                rel_err(a, numeric) < 1e-4,
                "{name}[{c}]: analytic {a} vs fd {numeric}"
            );
            checked += 1;
        }
    }
    assert!(checked > 300, "too few coordinates checked ({checked})");
    println!("criterion 4e (total-loss gradients, {checked} coords): PASS");
}

// --- criterion 5: Hungarian vs brute force ---------------------------------

#[test]
fn acceptance_05_hungarian_brute_force() {
    let mut rng = Rng::new(55);
    for trial in 0..1000 {
        let n = 1 + rng.below(7);
        let k = 1 + rng.below(n);
        let data = (0..n * k).map(|_| rng.uniform_in(-10.0, 10.0)).collect();
        let cost = Tensor::from_vec(n, k, data);
        let fast = hungarian_match(&cost).unwrap();
        let slow = brute_force_match(&cost).unwrap();
        assert_eq!(fast.pairs.len(), k, "trial {trial}: not all matched");
        let diff = (fast.total_cost(&cost) - slow.total_cost(&cost)).abs();
        assert!(diff <= 1e-9, "trial {trial}: {diff}");
    }
    println!("criterion 5 (Hungarian vs factorial brute force): PASS");
}

// --- criterion 6: mAP evaluator vs exhaustive reference ---------------------

// Textbook reference: sort by score, greedy-match, AP as the per-true-positive
// max-precision-to-the-right sum. Written independently of the shipped
// envelope/integration implementation.
fn reference_map(
    dets: &[EvalDetection],
    gts: &[EvalGroundTruth],
    cfg: &EvalConfig,
) -> Vec<Option<f64>> {
    let mut per_class = vec![None; cfg.num_hoi_classes];
    for class in 0..cfg.num_hoi_classes {
        let pool: Option<std::collections::BTreeSet<usize>> = match cfg.setting {
            EvalSetting::Default => None,
            EvalSetting::KnownObject => Some(
                gts.iter()
                    .filter(|g| cfg.hoi_to_object[g.hoi_class] == cfg.hoi_to_object[class])
                    .map(|g| g.image)
                    .collect(),
            ),
        };
        let in_pool = |img: usize| pool.as_ref().map_or(true, |p| p.contains(&img));
        let class_gts: Vec<&EvalGroundTruth> = gts
            .iter()
            .filter(|g| g.hoi_class == class && in_pool(g.image))
            .collect();
        if class_gts.is_empty() {
            continue;
        }
        let mut class_dets: Vec<(usize, &EvalDetection)> = dets
            .iter()
            .enumerate()
            .filter(|(_, d)| d.hoi_class == class && in_pool(d.image))
            .collect();
        class_dets.sort_by(|a, b| {
            b.1.score
                .partial_cmp(&a.1.score)
                .unwrap()
                .then(a.1.image.cmp(&b.1.image))
                .then(a.0.cmp(&b.0))
        });
        let mut used = vec![false; class_gts.len()];
        let mut tps = Vec::new();
        for (_, d) in &class_dets {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in class_gts.iter().enumerate() {
                if used[gi] || g.image != d.image {
                    continue;
                }
                let ov = iou(&d.subject, &g.subject).min(iou(&d.object, &g.object));
                if ov >= cfg.iou_threshold && best.map_or(true, |(_, b)| ov > b) {
                    best = Some((gi, ov));
                }
            }
            if let Some((gi, _)) = best {
                used[gi] = true;
                tps.push(true);
            } else {
                tps.push(false);
            }
        }
        let precisions: Vec<f64> = tps
            .iter()
            .enumerate()
            .scan(0usize, |tp, (i, &is_tp)| {
                if is_tp {
                    *tp += 1;
                }
                Some(*tp as f64 / (i + 1) as f64)
            })
            .collect();
        let mut ap = 0.0;
        for (i, &is_tp) in tps.iter().enumerate() {
            if is_tp {
                let max_right = precisions[i..]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
                ap += max_right / class_gts.len() as f64;
            }
        }
        per_class[class] = Some(ap);
    }
    per_class
}

#[test]
fn acceptance_06_map_evaluator_reference() {
    // hand-computed cases first
    let s = BBox::new(0.3, 0.3, 0.2, 0.2);
    let o = BBox::new(0.7, 0.7, 0.2, 0.2);
    let cfg = EvalConfig::new(1, vec![0], vec![false]);
    let one_correct = evaluate_map(
        &[EvalDetection { image: 0, hoi_class: 0, score: 0.9, subject: s, object: o }],
        &[EvalGroundTruth { image: 0, hoi_class: 0, subject: s, object: o }],
        &cfg,
    );
    assert_eq!(one_correct.per_class[0], Some(1.0));
    let with_fp = evaluate_map(
        &[
            EvalDetection {
                image: 0,
                hoi_class: 0,
                score: 0.95,
                subject: BBox::new(0.1, 0.9, 0.05, 0.05),
                object: BBox::new(0.9, 0.1, 0.05, 0.05),
            },
            EvalDetection { image: 0, hoi_class: 0, score: 0.5, subject: s, object: o },
        ],
        &[EvalGroundTruth { image: 0, hoi_class: 0, subject: s, object: o }],
        &cfg,
    );
    assert_eq!(with_fp.per_class[0], Some(0.5));

    // randomized comparison against the reference
    let mut rng = Rng::new(66);
    for trial in 0..1000 {
        let classes = 1 + rng.below(3);
        let mut cfg = EvalConfig::new(
            classes,
            (0..classes).map(|c| c % 2).collect(),
            (0..classes).map(|c| c == 0).collect(),
        );
        if rng.chance(0.5) {
            cfg.setting = EvalSetting::KnownObject;
        }
        let n_img = 1 + rng.below(4);
        let gts: Vec<EvalGroundTruth> = (0..rng.below(5))
            .map(|_| EvalGroundTruth {
                image: rng.below(n_img),
                hoi_class: rng.below(classes),
                subject: random_box(&mut rng).clamped(),
                object: random_box(&mut rng).clamped(),
            })
            .collect();
        let dets: Vec<EvalDetection> = (0..rng.below(7))
            .map(|_| {
                // half the detections shadow a ground truth with jitter
                if !gts.is_empty() && rng.chance(0.5) {
                    let g = gts[rng.below(gts.len())].clone();
                    let subject = sovstg_core::geometry::noise_box(&g.subject, 0.3, &mut rng);
                    let object = sovstg_core::geometry::noise_box(&g.object, 0.3, &mut rng);
                    EvalDetection {
                        image: g.image,
                        hoi_class: g.hoi_class,
                        score: rng.uniform(),
                        subject,
                        object,
                    }
                } else {
                    EvalDetection {
                        image: rng.below(n_img),
                        hoi_class: rng.below(classes),
                        score: rng.uniform(),
                        subject: random_box(&mut rng).clamped(),
                        object: random_box(&mut rng).clamped(),
                    }
                }
            })
            .collect();
        let got = evaluate_map(&dets, &gts, &cfg);
        let want = reference_map(&dets, &gts, &cfg);
        for (c, (g, w)) in got.per_class.iter().zip(&want).enumerate() {
            match (g, w) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    assert!((a - b).abs() <= 1e-12, "trial {trial} class {c}: {a} vs {b}")
                }
                other => panic!("trial {trial} class {c}: presence mismatch {other:?}"),
            }
        }
    }
    println!("criterion 6 (mAP evaluator vs exhaustive reference): PASS");
}

// --- criterion 7: desk-scale end-to-end ------------------------------------

#[test]
fn acceptance_07_end_to_end_training() {
    let _guard = TRAIN_LOCK.lock().unwrap();
    let data = load_dataset(corpus()).unwrap();
    let kv = parse_kv("epochs = 42\ntarget_map = 0.85\nseed = 1").unwrap();
    let cfg = RunConfig::from_kv(kv).unwrap();
    let out = tmp_root().join("criterion7");
    let outcome = train_run(&cfg, &data, &out).unwrap();
    assert!(
        outcome.best_full_map >= 0.85,
        "full mAP {:.4} below 0.85 after {} epochs",
        outcome.best_full_map,
        outcome.epochs_run
    );
    assert!(outcome.epochs_run <= 50, "needed {} epochs", outcome.epochs_run);
    assert!(
        outcome.wall_seconds < 1800.0,
        "training took {:.0}s",
        outcome.wall_seconds
    );
    println!(
        "criterion 7 (end-to-end: mAP {:.4} in {} epochs, {:.0}s): PASS",
        outcome.best_full_map, outcome.epochs_run, outcome.wall_seconds
    );
}

// --- criterion 8: denoising accelerates convergence ------------------------

#[test]
fn acceptance_08_denoising_speeds_convergence() {
    let _guard = TRAIN_LOCK.lock().unwrap();
    let data = load_dataset(corpus()).unwrap();
    // training budget 16 epochs; measure at 25% of it, averaged over 5 seeds.
    // The budget's step decay would fall at two thirds of the 16 epochs, far
    // beyond the probe window, so the probe runs entirely at the base rate.
    let budget = 16usize;
    let probe_epochs = budget / 4;
    let mut means = [0.0f64; 2];
    for (arm, stg) in [true, false].iter().enumerate() {
        let mut sum = 0.0;
        for seed in 1..=5u64 {
            let kv = parse_kv(&format!(
                "epochs = {probe_epochs}\nseed = {seed}\nstg = {stg}\neval_every = {probe_epochs}\nlr_drop_frac = 1.0"
            ))
            .unwrap();
            let cfg = RunConfig::from_kv(kv).unwrap();
            let out = tmp_root().join(format!("criterion8-stg{stg}-seed{seed}"));
            let outcome = train_run(&cfg, &data, &out).unwrap();
            sum += outcome.final_full_map;
        }
        means[arm] = sum / 5.0;
    }
    let (with_stg, without_stg) = (means[0], means[1]);
    assert!(
        with_stg >= without_stg,
        "denoising mean mAP {with_stg:.4} < plain {without_stg:.4} at 25% budget"
    );
    println!(
        "criterion 8 (convergence: {with_stg:.4} with denoising vs {without_stg:.4} without): PASS"
    );
}

// --- criterion 9: ablation expressibility ----------------------------------

#[test]
fn acceptance_09_ablation_expressibility() {
    let data = load_dataset(mini_corpus()).unwrap();
    // tiny dims keep the runnability check fast
    let base = parse_kv(
        "dim = 16\nnum_queries = 4\nheads = 2\nffn_hidden = 32\ninput_res = 24\n\
stem_channels = 4\nadvisor_dim = 16\nadvisor_tokens = 2\nepochs = 1",
    )
    .unwrap();
    let mut fingerprints = std::collections::BTreeSet::new();
    let mut total = 0usize;
    for preset in ["modules", "verb-box", "denoising", "vla"] {
        for v in preset_variants(preset).unwrap() {
            let cfg = variant_config(&base, &v, None).unwrap();
            let s = cfg.switches;
            let fp = format!(
                "{preset}:{}/{}/{}/{}/{}/{:?}/{}/{}/{}/{:.2}/{:.2}/{:.2}",
                s.subject_decoder,
                s.verb_decoder,
                s.so_attention,
                s.stg,
                s.vla,
                s.verb_box,
                s.pe_verb_box,
                s.text_init,
                s.vla_verb_prediction,
                cfg.dn.box_noise_scale,
                cfg.dn.obj_flip_rate,
                cfg.dn.verb_noise_rate,
            );
            assert!(fingerprints.insert(fp), "{preset}:{} not distinct", v.name);
            // runnable: the model builds and one forward succeeds
            let mut rng = Rng::new(3);
            let (model, provider) = build_model(&cfg, &data, &mut rng).unwrap();
            let raster = data.train[0].rasterize(&data.archetypes, model.cfg.input_res);
            let feats = provider
                .as_ref()
                .map(|p| p.image_features(&raster));
            let g = Graph::new();
            let fwd = Fwd::new(&g, &model.params, false);
            model.forward(&fwd, &raster, None, feats.as_ref()).unwrap();
            total += 1;
        }
    }
    assert_eq!(total, 9 + 5 + 6 + 5);
    println!("criterion 9 (ablation expressibility, {total} variants): PASS");
}

// --- criterion 10: determinism and persistence ------------------------------

#[test]
fn acceptance_10_determinism_and_persistence() {
    let _guard = TRAIN_LOCK.lock().unwrap();
    let data = load_dataset(mini_corpus()).unwrap();
    let kv = parse_kv(
        "epochs = 2\nbatch_size = 4\ndim = 16\nnum_queries = 6\nheads = 2\n\
ffn_hidden = 32\ninput_res = 24\nstem_channels = 4\nadvisor_dim = 16",
    )
    .unwrap();
    let cfg = RunConfig::from_kv(kv).unwrap();
    let out1 = tmp_root().join("criterion10-a");
    let out2 = tmp_root().join("criterion10-b");
    let _ = std::fs::remove_dir_all(&out1);
    let _ = std::fs::remove_dir_all(&out2);
    train_run(&cfg, &data, &out1).unwrap();
    train_run(&cfg, &data, &out2).unwrap();
    let a = std::fs::read(out1.join("metrics.csv")).unwrap();
    let b = std::fs::read(out2.join("metrics.csv")).unwrap();
    assert_eq!(a, b, "same seed produced different metrics files");

    // checkpoint round trip: bit-identical forward on a fixed input
    let mut rng = Rng::new(cfg.seed).fork(0);
    let (mut model, _) = build_model(&cfg, &data, &mut rng).unwrap();
    Checkpoint::load(&out1.join("checkpoint-latest.bin"))
        .unwrap()
        .apply_params(&mut model.params, true)
        .unwrap();
    let rasters = rasterize_split(&data, &data.test, model.cfg.input_res);
    let forward_bits = |m: &Model| -> Vec<u64> {
        let g = Graph::new();
        let fwd = Fwd::new(&g, &m.params, false);
        let out = m.forward(&fwd, &rasters[0], None, None).unwrap();
        out.layers
            .last()
            .unwrap()
            .subject_boxes
            .value()
            .data()
            .iter()
            .chain(out.final_verb_logits.value().data())
            .map(|v| v.to_bits())
            .collect()
    };
    let before = forward_bits(&model);
    let resaved = tmp_root().join("criterion10-resave.bin");
    Checkpoint::capture(&model.params, 0, [9, 9, 9, 9], None)
        .save(&resaved)
        .unwrap();
    let mut rng2 = Rng::new(cfg.seed).fork(0);
    let (mut model2, _) = build_model(&cfg, &data, &mut rng2).unwrap();
    Checkpoint::load(&resaved)
        .unwrap()
        .apply_params(&mut model2.params, true)
        .unwrap();
    let after = forward_bits(&model2);
    assert_eq!(before, after, "checkpoint round trip altered forward bits");
    println!("criterion 10 (determinism and persistence): PASS");
}
