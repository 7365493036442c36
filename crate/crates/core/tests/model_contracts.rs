use magnet::attention::export_heatmap;
use magnet::checkpoint;
use magnet::config::{Ablation, ModelConfig};
use magnet::data::synth::{Color, SceneObject, Shape};
use magnet::data::{generate_dataset, generate_scene, read_dataset, Image, Split, SynthConfig, SyntheticScene};
use magnet::geometry::{iou, Bbox};
use magnet::model::Model;
use magnet::numerics::Tape;
use magnet::textproc::build_vocab;
use magnet::trainer::{evaluate, Trainer, Unit};
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

const PHRASES: [&str; 6] =
    ["red circle", "blue circle", "green square", "the triangle on the left", "yellow circle above the square", "red square"];

fn model(cfg: ModelConfig) -> Model<f32> {
    Model::new(cfg, build_vocab(&PHRASES, 1).unwrap()).unwrap()
}

fn scene() -> SyntheticScene {
    generate_scene(21, &SynthConfig::default()).unwrap()
}

fn gts() -> Vec<Bbox> {
    vec![Bbox::new(10.0, 12.0, 40.0, 44.0).unwrap()]
}

#[test]
fn zero_weights_give_a_zero_loss() {
    let m = model(ModelConfig { lambda_cap: 0.0, lambda_rpn: 0.0, lambda_det: 0.0, ..ModelConfig::desk() });
    let mut tape = Tape::new();
    let vis = m.visual(&mut tape, &scene().image).unwrap();
    let l = m.loss(&mut tape, &vis, &m.tokenize("red circle").unwrap(), &gts(), &mut SplitMix64::seed_from_u64(1)).unwrap();
    assert_eq!(tape.scalar(l.total), 0.0);
}

#[test]
fn weighted_breakdown_adds_up_to_the_total() {
    for (c, r, d) in [(1.0, 1.0, 1.0), (0.5, 2.0, 0.25), (0.0, 1.0, 3.0)] {
        let m = model(ModelConfig { lambda_cap: c, lambda_rpn: r, lambda_det: d, ..ModelConfig::desk() });
        let mut tape = Tape::new();
        let vis = m.visual(&mut tape, &scene().image).unwrap();
        let tokens = m.tokenize("the triangle on the left").unwrap();
        let l = m.loss(&mut tape, &vis, &tokens, &gts(), &mut SplitMix64::seed_from_u64(2)).unwrap();
        let total = tape.scalar(l.total) as f64;
        assert!((total - l.weighted(&m.cfg)).abs() <= 1e-6 * total.abs().max(1.0), "{total} vs {}", l.weighted(&m.cfg));
    }
}

#[test]
fn zero_detector_weight_leaves_detector_gradients_at_zero() {
    let m = model(ModelConfig { lambda_det: 0.0, ..ModelConfig::desk() });
    let mut tape = Tape::new();
    let vis = m.visual(&mut tape, &scene().image).unwrap();
    let l = m.loss(&mut tape, &vis, &m.tokenize("red circle").unwrap(), &gts(), &mut SplitMix64::seed_from_u64(3)).unwrap();
    let grads = tape.backward(l.total).unwrap();
    let mut det = 0;
    for (id, name, _) in m.store.iter() {
        let g = grads.get(id);
        if name.starts_with("det.") {
            det += 1;
            assert!(g.is_none_or(|g| g.iter().all(|&v| v == 0.0)), "{name}");
        } else if name.starts_with("rpn.") {
            assert!(g.is_some_and(|g| g.iter().any(|&v| v != 0.0)), "{name}");
        }
    }
    assert!(det > 0);
}

#[test]
fn different_phrases_attend_differently_and_heatmaps_are_grid_sized() {
    let m = model(ModelConfig::desk());
    let image = scene().image;
    let red = m.predict(&image, "red circle").unwrap();
    let blue = m.predict(&image, "blue circle").unwrap();
    assert_ne!(red.mean_alpha, blue.mean_alpha);
    assert_ne!(red.alphas[0], blue.alphas[0]);
    let w = m.cfg.grid();
    for a in red.alphas.iter().chain([&red.mean_alpha]) {
        let grid = export_heatmap(a, w).unwrap();
        assert_eq!(grid.len(), w);
        assert!(grid.iter().all(|row| row.len() == w));
    }
}

#[test]
fn raw_feature_rpn_variant_changes_only_the_proposal_input() {
    let base = model(ModelConfig::desk());
    let raw = model(ModelConfig { ablation: Ablation { rpn_without_attention: true, ..Ablation::default() }, ..ModelConfig::desk() });
    assert_eq!(base.store.len(), raw.store.len());
    let image = scene().image;
    let tokens = base.tokenize("yellow circle above the square").unwrap();
    let (mut ta, mut tb) = (Tape::inference(), Tape::inference());
    let (va, vb) = (base.visual(&mut ta, &image).unwrap(), raw.visual(&mut tb, &image).unwrap());
    let (ga, gb) = (base.ground(&mut ta, &va, &tokens).unwrap(), raw.ground(&mut tb, &vb, &tokens).unwrap());
    assert_eq!(ta.value(ga.c_hat), tb.value(gb.c_hat));
    assert_eq!(ta.value(ga.logits), tb.value(gb.logits));
    assert_eq!(ta.value(ga.rpn_input), ta.value(ga.c_hat));
    assert_eq!(tb.value(gb.rpn_input), tb.value(vb.v_a));
    assert_ne!(ta.value(ga.rpn_input), tb.value(gb.rpn_input));
}

#[test]
fn checkpoint_reload_reproduces_forward_outputs_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut trainer = Trainer::new(model(ModelConfig::desk()));
    let sc = scene();
    let tokens = trainer.model.tokenize("green square").unwrap();
    let boxes = gts();
    let unit = Unit { image: &sc.image, items: vec![(&tokens, boxes.as_slice())] };
    for _ in 0..2 {
        trainer.step(std::slice::from_ref(&unit)).unwrap();
    }
    checkpoint::save(&path, &trainer.model, Some(&trainer.adam), trainer.step).unwrap();
    let (back, adam, step) = checkpoint::load(&path).unwrap().into_model().unwrap();
    assert_eq!(step, 2);
    assert_eq!(adam.unwrap().step, trainer.adam.step);
    let probe = generate_scene(5, &SynthConfig::default()).unwrap().image;
    for p in PHRASES {
        assert_eq!(trainer.model.predict(&probe, p).unwrap(), back.predict(&probe, p).unwrap());
    }
    let (mut ta, mut tb) = (Tape::inference(), Tape::inference());
    let (va, vb) = (trainer.model.visual(&mut ta, &probe).unwrap(), back.visual(&mut tb, &probe).unwrap());
    let bits = |t: &Tape<f32>, v| t.value(v).iter().map(|x: &f32| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ta, va.v_a), bits(&tb, vb.v_a));
}

#[test]
fn untrained_model_scores_near_chance_and_evaluation_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(dir.path(), [10, 5, 40], 13, &SynthConfig::default()).unwrap();
    let test = read_dataset(&Split::Test.jsonl_path(dir.path())).unwrap();
    let phrases: Vec<&str> = test.iter().map(|s| s.phrase.as_str()).collect();
    let m = Model::new(ModelConfig::desk(), build_vocab(&phrases, 1).unwrap()).unwrap();
    let a = evaluate(&m, dir.path(), &test).unwrap();
    let b = evaluate(&m, dir.path(), &test).unwrap();
    assert_eq!(a, b);
    assert!(a.map.map < 0.05, "{}", a.to_text());
}

fn two_red_circles() -> (Image, Vec<Bbox>) {
    let cfg = SynthConfig::default();
    let objects = vec![
        SceneObject { shape: Shape::Circle, color: Color::Red, bbox: Bbox::new(14.0, 20.0, 46.0, 52.0).unwrap() },
        SceneObject { shape: Shape::Circle, color: Color::Red, bbox: Bbox::new(78.0, 70.0, 110.0, 102.0).unwrap() },
        SceneObject { shape: Shape::Square, color: Color::Blue, bbox: Bbox::new(80.0, 10.0, 110.0, 40.0).unwrap() },
    ];
    let mut image = Image::filled(cfg.image_size, cfg.image_size, [cfg.background; 3]);
    for o in &objects {
        for y in 0..cfg.image_size {
            for x in 0..cfg.image_size {
                if o.shape.covers(&o.bbox, x as f64 + 0.5, y as f64 + 0.5) {
                    for (c, v) in o.color.rgb().into_iter().enumerate() {
                        image.set(c, y, x, v);
                    }
                }
            }
        }
    }
    (image, objects[..2].iter().map(|o| o.bbox).collect())
}

#[test]
fn single_sample_overfits_and_finds_both_regions() {
    let (image, boxes) = two_red_circles();
    let mut trainer = Trainer::new(model(ModelConfig::desk()));
    let tokens = trainer.model.tokenize("red circle").unwrap();
    let unit = Unit { image: &image, items: vec![(&tokens, boxes.as_slice())] };
    let mut losses = Vec::new();
    for _ in 0..300 {
        losses.push(trainer.step(std::slice::from_ref(&unit)).unwrap().loss);
    }
    let (first, last) = (losses[0], losses[299]);
    assert!(last < 0.2 * first, "loss {first} -> {last}");

    let pred = trainer.model.predict(&image, "red circle").unwrap();
    assert!(pred.detections.len() >= 2, "{:?}", pred.detections);
    for gt in &boxes {
        assert!(pred.detections.iter().any(|d| iou(&d.bbox, gt) >= 0.5), "{gt:?} missed: {:?}", pred.detections);
    }
}
