// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance report: one line per criterion on stderr, then a single
//! assertion that every gating criterion passed.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use explguide::autodiff::{Graph, Var};
use explguide::basis::{augclip, select_basis, AugPolicy};
use explguide::edit::{auto_select, edit, EditRequest};
use explguide::eval::{detection_eval, heatmap_pr, otsu_threshold, Detection, GroundTruth, PrScores};
use explguide::layout::{
    coco_layout_filter, dice_term, generate, image_attention_gradients, layout_filter_indices, layout_loss,
    GenerateConfig, GradientSource, LayoutObject, MaskParams,
};
use explguide::model::{forward_pair, DiffEncoder, Encoder, Generator, Image, ToyBiModalModel, ToyGenerator};
use explguide::model::{AttentionPerturbation, Modality};
use explguide::optim::{Adam, Sgd, SgdConfig};
use explguide::prompt::train::{batch_schedule, init_prompts, SyntheticSpec};
use explguide::prompt::{
    class_forward, constant_image, evaluate, image_features, mean_class_score, train, Dataset, LabelPosition,
    LabelSet, PromptMode, TunerConfig,
};
use explguide::relevance::compute_relevance;
use explguide::relevance::diff::GradientMode;
use explguide::{presets, Error};
use ndarray::{array, Array2};
use rand::Rng;

type Outcome = std::result::Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> std::result::Result<(), String> {
    check(elapsed < Duration::from_secs(limit_s), || format!("took {elapsed:.2?}, limit {limit_s} s"))
}

fn toy() -> ToyBiModalModel {
    ToyBiModalModel::with_seed(0)
}

fn toy_image(seed: u64, m: &ToyBiModalModel) -> Image {
    random_image(&mut rng(seed), m.image_shape())
}

// 1
fn relevance_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let t = random_trace(&mut r);
        let got = compute_relevance(&t).map_err(|e| format!("trace {k}: {e}"))?;
        let want = literal_relevance(&t);
        let ts: Vec<Vec<f64>> = vec![want.token_scores.clone()];
        let got_ts = got.token_scores.clone().insert_axis(ndarray::Axis(0));
        let d = max_abs_diff(&want.text, &got.text)
            .max(max_abs_diff(&want.image, &got.image))
            .max(max_abs_diff(&ts, &got_ts))
            .max(max_abs_diff(&want.heatmap, &got.patch_heatmap));
        check(got.patch_heatmap.dim() == t.patch_grid, || format!("trace {k}: heatmap shape"))?;
        worst = worst.max(d);
        check(d <= 1e-9, || format!("trace {k}: max deviation {d:e}"))?;
    }
    within(start.elapsed(), 10)?;
    Ok(format!("200 traces, max deviation {worst:.1e}, {:.2?}", start.elapsed()))
}

// 2
fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let m = toy();
    let mut r = rng(2);
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    let mut sampled = 0;
    for (p, prompt) in ["a red dog", "two small birds on a tree", "a cat"].iter().enumerate() {
        let t = m.tokenize(prompt).unwrap();
        let img = toy_image(20 + p as u64, &m);
        let (_, trace) = m.encode_and_trace(&t, &img).unwrap();
        for _ in 0..10 {
            let modality = if r.random_bool(0.5) { Modality::Text } else { Modality::Image };
            let layers = match modality {
                Modality::Text => &trace.text_layers,
                Modality::Image => &trace.image_layers,
            };
            let layer = r.random_range(0..layers.len());
            let head = r.random_range(0..layers[layer].heads());
            let n = layers[layer].tokens();
            let (row, col) = (r.random_range(0..n), r.random_range(0..n));
            let analytic = layers[layer].gradient[[head, row, col]];
            let at = |delta| {
                m.similarity_perturbed(&t, &img, &AttentionPerturbation { modality, layer, head, row, col, delta })
                    .unwrap()
            };
            let fd = (at(eps) - at(-eps)) / (2.0 * eps);
            let rel = (fd - analytic).abs() / analytic.abs().max(fd.abs()).max(1e-7);
            worst = worst.max(rel);
            sampled += 1;
            check(rel < 1e-3, || format!("{modality:?} l{layer} h{head} ({row},{col}): {analytic} vs {fd}"))?;
        }
    }

    // Latent gradient of the layout objective with the gradient factor held
    // constant, against differences of the same frozen objective.
    let g = ToyGenerator::with_seed(0);
    let objects = vec![
        LayoutObject::new(bbox(0.0, 0.0, 0.5, 0.5), "a red dog"),
        LayoutObject::new(bbox(0.5, 0.25, 1.0, 1.0), "a blue cat"),
    ];
    let z0 = g.sample_latent(7);
    let graph = Graph::new();
    let zv = graph.row(&z0);
    let img = g.generate_var(&graph, &zv).unwrap();
    let loss = layout_loss(&img, &objects, &m, MaskParams::default(), &GradientSource::Mode(GradientMode::Detached))
        .unwrap()
        .total;
    let analytic: Vec<f64> = graph.grad(&loss, &[zv], false).unwrap()[0].value().iter().copied().collect();
    let frozen = GradientSource::Frozen(image_attention_gradients(&g.generate(&z0).unwrap(), &objects, &m).unwrap());
    let frozen_loss = |z: &[f64]| {
        let graph = Graph::new();
        let img = g.generate_var(&graph, &graph.row(z)).unwrap();
        layout_loss(&img, &objects, &m, MaskParams::default(), &frozen).unwrap().total.item()
    };
    let mut order: Vec<usize> = (0..analytic.len()).collect();
    order.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
    let h = 1e-3;
    let mut worst_latent: f64 = 0.0;
    for &i in order.iter().take(5) {
        let mut zp = z0.clone();
        let mut zm = z0.clone();
        zp[i] += h;
        zm[i] -= h;
        let fd = (frozen_loss(&zp) - frozen_loss(&zm)) / (2.0 * h);
        let rel = (fd - analytic[i]).abs() / analytic[i].abs().max(fd.abs());
        worst_latent = worst_latent.max(rel);
        check(rel < 0.02, || format!("latent {i}: {} vs {fd}", analytic[i]))?;
    }
    within(start.elapsed(), 60)?;
    Ok(format!(
        "{sampled} attention entries max rel err {worst:.1e}; latent max rel err {worst_latent:.1e}; {:.2?}",
        start.elapsed()
    ))
}

// 3
fn prompt_reduction() -> std::result::Result<usize, String> {
    let m = toy();
    let classes: Vec<String> = ["cat", "dog"].iter().map(|s| s.to_string()).collect();
    let d = Dataset::synthetic(
        &SyntheticSpec { classes: classes.clone(), per_class: 3, noise: 0.05, seed: 3 },
        m.image_shape(),
    )
    .unwrap();
    let cfg = TunerConfig {
        context_tokens: 4,
        mode: PromptMode::Csc,
        lambda: Some(0.0),
        shots: 3,
        epochs: 4,
        batch_size: 4,
        logit_scale: 5.0,
        seed: 11,
        sgd: SgdConfig { lr: 0.1, ..Default::default() },
        ..Default::default()
    };
    let logged: Vec<f64> = train(&m, &d, &cfg).map_err(|e| e.to_string())?.log.iter().map(|s| s.loss).collect();

    // Cross-entropy only, no relevance anywhere.
    let labels = LabelSet::new(&classes, &m).unwrap();
    let data = d.few_shot(cfg.shots, cfg.seed).unwrap();
    let width = m.token_embeddings(&[]).unwrap().ncols();
    let mut prompts = init_prompts(&cfg, labels.len(), width).unwrap();
    let features: Vec<Array2<f64>> = data.samples.iter().map(|(img, _)| image_features(&m, img).unwrap()).collect();
    let mut params: Vec<f64> = prompts.templates.iter().flat_map(|t| t.context.iter().flatten().copied()).collect();
    let mut sgd = Sgd::new(cfg.sgd, params.len());
    let mut baseline = Vec::new();
    for (epoch, batches) in batch_schedule(cfg.seed, data.len(), cfg.batch_size, cfg.epochs).iter().enumerate() {
        for batch in batches {
            let graph = Graph::new();
            let ctx: Vec<Var> = prompts.templates.iter().map(|t| graph.leaf(t.context_array())).collect();
            let mut total = graph.scalar(0.0);
            for &i in batch {
                let gt = data.samples[i].1;
                let image = constant_image(&graph, &features[i]);
                let sims: Vec<Var> = labels
                    .classes
                    .iter()
                    .enumerate()
                    .map(|(c, class)| {
                        class_forward(&m, &graph, &ctx[c], prompts.for_class(c), class, &image, None)
                            .unwrap()
                            .similarity
                    })
                    .collect();
                let logits = Var::concat_cols(&sims).scale(cfg.logit_scale);
                let ce = &logits.log_sum_exp() - &sims[gt].scale(cfg.logit_scale);
                total = &total + &ce;
            }
            let loss = total.scale(1.0 / batch.len() as f64);
            baseline.push(loss.item());
            let grads = graph.grad(&loss, &ctx, false).unwrap();
            let flat: Vec<f64> = grads.iter().flat_map(|g| g.value().iter().copied().collect::<Vec<_>>()).collect();
            sgd.step(&mut params, &flat, cfg.sgd.lr_at(epoch, cfg.epochs));
            let mut it = params.iter();
            for t in &mut prompts.templates {
                for row in &mut t.context {
                    for v in row.iter_mut() {
                        *v = *it.next().unwrap();
                    }
                }
            }
        }
    }
    check(logged == baseline, || format!("prompt losses differ: {logged:?} vs {baseline:?}"))?;
    Ok(logged.len())
}

fn edit_reduction() -> std::result::Result<usize, String> {
    let m = toy();
    let g = ToyGenerator::with_seed(0);
    let request = EditRequest { prompt: "a woman with a red hat".into(), steps: 12, seed: 4, ..Default::default() };
    let setup = request.setup(&m, &g).map_err(|e| e.to_string())?;
    let run = edit(&m, &g, &request, &setup, 0.0).map_err(|e| e.to_string())?;
    let w = request.regularizers["latent_l2"];

    let z0 = setup.source_latent.clone();
    let mut z = z0.clone();
    let mut opt = Adam::new(request.adam, z.len());
    let mut baseline = Vec::new();
    for _ in 0..request.steps {
        let graph = Graph::new();
        let zv = graph.row(&z);
        let img = g.generate_var(&graph, &zv).unwrap();
        let sim = forward_pair(&m, &graph, &setup.tokens, &img).unwrap().similarity;
        let reg = (&zv - &graph.row(&z0)).square().sum();
        let loss = &sim.scale(-1.0) + &reg.scale(w);
        baseline.push(loss.item());
        let grad: Vec<f64> = graph.grad(&loss, &[zv], false).unwrap()[0].value().iter().copied().collect();
        opt.step(&mut z, &grad);
    }
    check(run.losses == baseline, || format!("edit losses differ: {:?} vs {baseline:?}", run.losses))?;
    check(run.latent == z, || "edit latents differ".into())?;
    Ok(baseline.len())
}

fn layout_reduction() -> std::result::Result<usize, String> {
    let m = toy();
    let g = ToyGenerator::with_seed(0);
    let mut objects = vec![
        LayoutObject::new(bbox(0.0, 0.0, 0.5, 1.0), "a red dog"),
        LayoutObject::new(bbox(0.5, 0.0, 1.0, 1.0), "a green tree"),
    ];
    for o in &mut objects {
        o.lambda = 0.0;
    }
    let cfg = GenerateConfig { steps: 10, seed: 5, ..Default::default() };
    let res = generate(&objects, &g, &m, &cfg).map_err(|e| e.to_string())?;

    let tokens: Vec<_> = objects.iter().map(|o| m.tokenize(&o.text).unwrap()).collect();
    let mut z = g.sample_latent(cfg.seed);
    let mut opt = Adam::new(cfg.adam, z.len());
    let mut baseline = Vec::new();
    for step in 0..=cfg.steps {
        let graph = Graph::new();
        let zv = graph.row(&z);
        let img = g.generate_var(&graph, &zv).unwrap();
        let mut total = graph.scalar(0.0);
        for t in &tokens {
            total = &total - &forward_pair(&m, &graph, t, &img).unwrap().similarity;
        }
        baseline.push(total.item());
        if step == cfg.steps {
            break;
        }
        let grad: Vec<f64> = graph.grad(&total, &[zv], false).unwrap()[0].value().iter().copied().collect();
        opt.step(&mut z, &grad);
    }
    check(res.losses == baseline, || format!("layout losses differ: {:?} vs {baseline:?}", res.losses))?;
    Ok(baseline.len())
}

fn basis_reduction() -> std::result::Result<usize, String> {
    let m = toy();
    let g = ToyGenerator::with_seed(0);
    let candidates: Vec<Vec<f64>> = (0..12).map(|i| g.sample_latent(100 + i)).collect();
    let prompt = "a dog next to a tree";
    let words = vec!["dog".to_string(), "tree".to_string()];
    let policy = AugPolicy::default();
    let basis = select_basis(&candidates, prompt, &words, 4, 0.0, &policy, &m, &g).map_err(|e| e.to_string())?;

    let tokens = m.tokenize(prompt).unwrap();
    let scores: Vec<f64> =
        candidates.iter().map(|z| augclip(&m, &tokens, &g.generate(z).unwrap(), &policy).unwrap()).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let got: Vec<usize> = basis.scoreboard.iter().map(|c| c.index).collect();
    check(got == order, || format!("basis order {got:?} vs {order:?}"))?;
    check(basis.selected == order[..4], || "selected set differs".into())?;
    Ok(order.len())
}

fn lambda_zero_reductions() -> Outcome {
    let p = prompt_reduction()?;
    let e = edit_reduction()?;
    let l = layout_reduction()?;
    let b = basis_reduction()?;
    Ok(format!("prompt {p} steps, edit {e} steps, layout {l} values, basis {b} candidates identical"))
}

// 4
fn directional_effect() -> Outcome {
    let start = Instant::now();
    let m = toy();
    let classes: Vec<String> = ["cat", "dog"].iter().map(|s| s.to_string()).collect();
    let spec = |seed, per_class: usize| SyntheticSpec { classes: classes.clone(), per_class, noise: 0.05, seed };
    // Eight draws per class: the first four train, the rest are held out.
    let all = Dataset::synthetic(&spec(1, 8), m.image_shape()).unwrap();
    let (train_s, test_s): (Vec<_>, Vec<_>) = all.samples.iter().enumerate().partition(|(i, _)| i % 8 < 4);
    let strip = |v: Vec<(usize, &(Image, usize))>| v.into_iter().map(|(_, s)| s.clone()).collect();
    let trainset = Dataset::new(classes.clone(), strip(train_s)).unwrap();
    let testset = Dataset::new(classes.clone(), strip(test_s)).unwrap();
    let mut expl_ok = 0;
    let mut acc_ok = true;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let mut res = Vec::new();
        for lambda in [0.0, 1.0] {
            let cfg = TunerConfig {
                context_tokens: 4,
                label_position: LabelPosition::End,
                mode: PromptMode::Csc,
                lambda: Some(lambda),
                shots: 4,
                epochs: 60,
                batch_size: 16,
                logit_scale: 10.0,
                seed,
                sgd: SgdConfig { lr: 0.05, ..Default::default() },
                ..Default::default()
            };
            let r = train(&m, &trainset, &cfg).map_err(|e| e.to_string())?;
            let acc = evaluate(&m, &r.prompts, &classes, &testset).map_err(|e| e.to_string())?;
            let s = mean_class_score(&m, &r.prompts, &classes, &trainset).map_err(|e| e.to_string())?;
            res.push((acc, s));
        }
        if res[1].1 > res[0].1 {
            expl_ok += 1;
        }
        acc_ok &= res[1].0 >= res[0].0;
        rows.push(format!("s{seed} S {:.3}/{:.3} acc {:.2}/{:.2}", res[0].1, res[1].1, res[0].0, res[1].0));
    }
    let summary = format!("{expl_ok}/5 seeds with higher S; {}", rows.join(", "));
    check(expl_ok >= 4, || summary.clone())?;
    check(acc_ok, || format!("accuracy dropped: {summary}"))?;
    within(start.elapsed(), 300)?;
    Ok(format!("{summary}; {:.2?}", start.elapsed()))
}

// 5
fn algorithm_transcription() -> Outcome {
    let m = toy();
    let mut r = rng(5);
    let vocab = ["a red dog", "a cat", "green tree", "two birds", "a small blue car", "the sun"];
    let mask = MaskParams::default();
    let mut worst: f64 = 0.0;
    for k in 0..50 {
        let img = random_image(&mut r, m.image_shape());
        let n = r.random_range(1..=3);
        let objs: Vec<(explguide::layout::BoundingBox, String, f64)> = (0..n)
            .map(|_| {
                let x0 = r.random_range(0.0..0.7);
                let y0 = r.random_range(0.0..0.7);
                let b = bbox(x0, y0, r.random_range(x0 + 0.1..=1.0), r.random_range(y0 + 0.1..=1.0));
                let lambda = if r.random_bool(0.2) { 0.0 } else { r.random_range(0.0..2.0) };
                (b, vocab[r.random_range(0..vocab.len())].to_string(), lambda)
            })
            .collect();
        let objects: Vec<LayoutObject> = objs
            .iter()
            .map(|(b, t, l)| LayoutObject { lambda: *l, ..LayoutObject::new(*b, t) })
            .collect();
        let graph = Graph::new();
        let got = layout_loss(&img.to_var(&graph), &objects, &m, mask, &GradientSource::default())
            .map_err(|e| format!("instance {k}: {e}"))?
            .total
            .item();
        let want = layout_loss_by_steps(&img, &objs, &m, mask.threshold, mask.temperature);
        let d = (got - want).abs();
        worst = worst.max(d);
        check(d <= 1e-8, || format!("instance {k}: {got} vs {want}"))?;
    }
    let gt = array![[1.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
    let perfect = dice_term(&gt, &gt).map_err(|e| e.to_string())?;
    let disjoint = dice_term(&gt.mapv(|v| 1.0 - v), &gt).map_err(|e| e.to_string())?;
    check(perfect == 1.0 && disjoint == 0.0, || format!("dice boundaries {perfect} / {disjoint}"))?;
    Ok(format!("50 instances, max deviation {worst:.1e}; dice 1 and 0 exact"))
}

// 6
fn presets_match() -> Outcome {
    let sweep: Vec<f64> = (0..8).map(|i| i as f64 * 0.5).collect();
    check(presets::EDIT_LAMBDA_SWEEP.to_vec() == sweep, || "edit sweep".into())?;
    check(EditRequest::default().sweep == sweep, || "edit request sweep".into())?;
    let mask = GenerateConfig::default().mask;
    check(mask.threshold == 0.1 && mask.temperature == 20.0, || format!("mask {mask:?}"))?;
    check(presets::box_lambda(1.0) == 0.15, || "box lambda at r = 1".into())?;
    check((presets::box_lambda(0.01) - 1.5).abs() < 1e-15, || "box lambda at r = 0.01".into())?;
    let obj = LayoutObject::new(bbox(0.0, 0.0, 0.5, 0.5), "x");
    check(obj.lambda == 0.15 / 0.25f64.sqrt(), || format!("object lambda {}", obj.lambda))?;
    check(presets::FUSE_LAMBDA == 0.1 && presets::SEMANTIC_THRESHOLD == 0.7, || "fuse presets".into())?;
    for (backbone, want) in [("ViT-B/16", 1.0), ("vit-b16", 1.0), ("ViT-B/32", 3.0), ("RN50", 3.0)] {
        let cfg = TunerConfig { backbone: Some(backbone.into()), ..Default::default() };
        check(cfg.resolved_lambda() == want, || format!("lambda for {backbone}"))?;
    }
    check(TunerConfig::default().resolved_lambda() == 3.0, || "default prompt lambda".into())?;
    Ok("sweep, T, temp, box, fuse, threshold and prompt weights match the presets".into())
}

// 7
fn detection_instances() -> Vec<Vec<(Vec<GroundTruth>, Vec<Detection>)>> {
    let gt = |label: &str, b| GroundTruth { label: label.into(), bbox: b };
    let det = |label: &str, b, score| Detection { label: label.into(), bbox: b, score };
    let a = bbox(0.0, 0.0, 0.4, 0.4);
    let b = bbox(0.5, 0.5, 0.9, 1.0);
    let c = bbox(0.1, 0.6, 0.3, 0.9);
    let mut cases = vec![
        // perfect
        vec![(vec![gt("dog", a), gt("cat", b)], vec![det("dog", a, 0.9), det("cat", b, 0.8)])],
        // nothing detected
        vec![(vec![gt("dog", a)], vec![])],
        // duplicate, false positive, wrong label, shifted box
        vec![
            (
                vec![gt("dog", a), gt("dog", c), gt("cat", b)],
                vec![
                    det("dog", a, 0.9),
                    det("dog", a, 0.85),
                    det("dog", bbox(0.12, 0.62, 0.32, 0.92), 0.7),
                    det("cat", bbox(0.55, 0.5, 0.9, 0.95), 0.6),
                    det("bird", b, 0.99),
                ],
            ),
            (vec![gt("cat", c)], vec![det("cat", bbox(0.0, 0.0, 0.2, 0.2), 0.95), det("cat", c, 0.5)]),
        ],
    ];
    // seeded clutter
    let mut r = rng(7);
    for _ in 0..12 {
        let mut images = Vec::new();
        for _ in 0..r.random_range(1..4) {
            let labels = ["dog", "cat", "car"];
            let rand_box = |r: &mut rand_chacha::ChaCha8Rng| {
                let x0 = r.random_range(0.0..0.8);
                let y0 = r.random_range(0.0..0.8);
                bbox(x0, y0, r.random_range(x0 + 0.05..=1.0), r.random_range(y0 + 0.05..=1.0))
            };
            let gts: Vec<GroundTruth> =
                (0..r.random_range(0..4)).map(|_| gt(labels[r.random_range(0..3)], rand_box(&mut r))).collect();
            let mut dets = Vec::new();
            for g in &gts {
                if r.random_bool(0.7) {
                    let [x0, y0, x1, y1] = g.bbox.coords();
                    let j = |r: &mut rand_chacha::ChaCha8Rng| r.random_range(-0.04..0.04);
                    let nb = bbox(
                        (x0 + j(&mut r)).max(0.0),
                        (y0 + j(&mut r)).max(0.0),
                        (x1 + j(&mut r)).min(1.0),
                        (y1 + j(&mut r)).min(1.0),
                    );
                    dets.push(det(&g.label, nb, (r.random_range(0..20i32) as f64) / 20.0));
                }
            }
            for _ in 0..r.random_range(0..3) {
                dets.push(det(labels[r.random_range(0..3)], rand_box(&mut r), r.random_range(0.0..1.0)));
            }
            images.push((gts, dets));
        }
        if images.iter().any(|(g, _)| !g.is_empty()) {
            cases.push(images);
        }
    }
    cases
}

fn metric_oracles() -> Outcome {
    let mut r = rng(17);
    let mut checked = 0;
    for k in 0..300 {
        let n = r.random_range(2..60);
        let values: Vec<f64> = match k % 3 {
            0 => (0..n).map(|_| r.random_range(0.0..1.0)).collect(),
            1 => (0..n).map(|_| (r.random_range(0..5i32) as f64) * 0.25).collect(),
            _ => (0..n).map(|_| r.random_range(0.0..1.0f64).powi(4)).collect(),
        };
        let got = otsu_threshold(&values).ok().map(|o| o.bin);
        let want = brute_force_otsu(&values);
        check(got == want, || format!("otsu case {k}: {got:?} vs {want:?} on {values:?}"))?;
        checked += 1;
    }

    // Foreground is the top cells; box covers the left half (center rule).
    let hm = array![[0.9, 0.8, 0.1, 0.0], [1.0, 0.1, 0.85, 0.0], [0.0, 0.0, 0.0, 0.1]];
    let left = bbox(0.0, 0.0, 0.5, 0.7);
    // pred: (0,0) (0,1) (1,0) (1,2); gt: rows 0-1 cols 0-1
    let want = PrScores::from_counts(3, 1, 1);
    let got = heatmap_pr(&hm, &[left]).map_err(|e| e.to_string())?;
    check(got == want, || format!("pr case 1: {got:?}"))?;
    check(want.precision == 0.75 && want.recall == 0.75, || "hand counts".into())?;
    let two = [bbox(0.0, 0.0, 0.25, 0.34), bbox(0.5, 0.34, 0.75, 0.67)];
    // gt: (0,0) and (1,2); both predicted
    let got = heatmap_pr(&hm, &two).map_err(|e| e.to_string())?;
    check(got == PrScores::from_counts(2, 2, 0), || format!("pr case 2: {got:?}"))?;
    let got = heatmap_pr(&Array2::from_elem((2, 2), 0.5), &[left]).map_err(|e| e.to_string())?;
    check(got == PrScores::ZERO, || format!("pr constant map: {got:?}"))?;

    let cases = detection_instances();
    for (k, images) in cases.iter().enumerate() {
        let got = detection_eval(images);
        let (ap, ap50, ar) = coco_reference(images);
        check(got.ap == ap && got.ap50 == ap50 && got.ar == ar, || {
            format!("detection case {k}: {got:?} vs ({ap}, {ap50}, {ar})")
        })?;
    }
    let perfect = detection_eval(&cases[0]);
    check(perfect.ap == 1.0 && perfect.ar == 1.0, || format!("perfect detections {perfect:?}"))?;
    Ok(format!("{checked} otsu arrays, 3 pr matrices, {} detection sets exact", cases.len()))
}

// 8
fn layout_filter_rule() -> Outcome {
    let sq = |a: f64| bbox(0.0, 0.0, a, 1.0);
    let areas = |bs: &[explguide::layout::BoundingBox]| bs.iter().map(|b| b.area_ratio()).collect::<Vec<_>>();
    let kept = coco_layout_filter(&[sq(0.3), sq(0.15), sq(0.2)]);
    check(areas(&kept) == vec![0.3], || format!("case a: {:?}", areas(&kept)))?;
    check(coco_layout_filter(&[sq(0.6), sq(0.1)]).is_empty(), || "case b not empty".into())?;
    check(coco_layout_filter(&[sq(0.5)]).is_empty(), || "case exactly half not empty".into())?;
    let idx = layout_filter_indices(&[sq(0.1), sq(0.1), sq(0.1)]);
    check(idx.len() == 3, || format!("case c: {idx:?}"))?;
    let idx = layout_filter_indices(&[sq(0.05), sq(0.25), sq(0.2), sq(0.04)]);
    check(idx == vec![1, 2], || format!("case d: {idx:?}"))?;
    check(coco_layout_filter(&[]).is_empty(), || "empty input".into())?;
    Ok("largest-first prefix under half the image, empty at >= 50%".into())
}

// 9
fn auto_lambda_selection() -> Outcome {
    let sweep = presets::EDIT_LAMBDA_SWEEP;
    let stub = |peak: f64| move |l: f64| -> explguide::Result<f64> { Ok(1.0 - (l - peak) * (l - peak)) };
    let (best, _) = auto_select(&sweep, stub(2.0), |s| Ok(*s)).map_err(|e| e.to_string())?;
    check(sweep[best] == 2.0, || format!("peak 2.0 chose {}", sweep[best]))?;
    let (best, _) = auto_select(&sweep, stub(1.25), |s| Ok(*s)).map_err(|e| e.to_string())?;
    check(sweep[best] == 1.0, || format!("tie 1.0/1.5 chose {}", sweep[best]))?;
    let (best, _) = auto_select(&sweep, stub(9.0), |s| Ok(*s)).map_err(|e| e.to_string())?;
    check(sweep[best] == 3.5, || format!("edge peak chose {}", sweep[best]))?;
    let failing = |l: f64| if l == 2.0 { Err(Error::NumericAbort { step: 0, last_good: vec![] }) } else { stub(2.0)(l) };
    let (best, runs) = auto_select(&sweep, failing, |s| Ok(*s)).map_err(|e| e.to_string())?;
    check(sweep[best] == 1.5 && runs[4].is_err(), || format!("aborted peak chose {}", sweep[best]))?;
    let all_fail = auto_select(&sweep, |_| -> explguide::Result<f64> { Err(Error::SweepFailure(0)) }, |s| Ok(*s));
    check(matches!(all_fail, Err(Error::SweepFailure(8))), || "all-fail sweep".into())?;
    Ok("argmax exact, ties to smaller lambda, aborted branches skipped".into())
}

#[test]
fn acceptance() {
    let criteria: Vec<(usize, &str, fn() -> Outcome)> = vec![
        (1, "relevance oracle", relevance_oracle),
        (2, "gradient fidelity", gradient_fidelity),
        (3, "lambda=0 reductions", lambda_zero_reductions),
        (4, "directional effect", directional_effect),
        (5, "layout objective transcription", algorithm_transcription),
        (6, "hyperparameter presets", presets_match),
        (7, "metric oracles", metric_oracles),
        (8, "layout filter", layout_filter_rule),
        (9, "auto-lambda selection", auto_lambda_selection),
    ];
    let mut failed = Vec::new();
    let mut err = std::io::stderr();
    for (n, name, f) in criteria {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match &outcome {
            Ok(detail) => writeln!(err, "criterion {n}: PASS {name}: {detail}").unwrap(),
            Err(detail) => {
                writeln!(err, "criterion {n}: FAIL {name}: {detail}").unwrap();
                failed.push(n);
            }
        }
    }
    writeln!(err, "criterion 10: SKIP optional integration run (needs a real encoder and generator plugin)").unwrap();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
