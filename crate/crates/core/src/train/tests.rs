use super::*;
use crate::gradcheck;
use crate::scene::{build_dataset, generate, preset, Protocol, Rig, RigPattern};
use nalgebra::Vector3;

fn tiny() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.model.planes = 8;
    c.model.mlp_width = 16;
    c.model.mlp_layers = 2;
    c.model.unet = [4, 4, 4];
    c.model.feature_channels = 4;
    c.model.embed = 4;
    c.samples_train = 8;
    c.samples_eval = 8;
    c.iterations = 20;
    c
}

fn narrow() -> Dataset {
    generate("two-planes", "narrow", 0).unwrap()
}

#[test]
fn config_pairs_round_trip() {
    let mut c = TrainConfig::desk();
    c.scenes = vec!["two-planes".into(), "sphere-on-plane".into()];
    c.weights.adv = 0.25;
    let mut d = TrainConfig::default();
    for (k, v) in c.pairs() {
        d.set(k, &v).unwrap();
    }
    assert_eq!(c, d);
    assert!(d.set("bogus", "1").is_err());
    assert!(d.set("iterations", "many").is_err());
    assert!(TrainConfig::preset("desk").unwrap().variant("no-adv-no-dist").unwrap().weights.dist == 0.0);
}

#[test]
fn model_entries_round_trip() {
    let m = Model::<f32>::new(tiny().model, 3).unwrap();
    let back = Model::<f32>::from_entries(&m.to_entries()).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.params.to_entries(), m.params.to_entries());
}

#[test]
fn target_among_sources_is_rejected() {
    let data = narrow();
    let mut t = Trainer::new(tiny()).unwrap();
    assert!(matches!(t.step_on(&data, data.protocol.sources[0]), Err(crate::Error::Contract(_))));
}

#[test]
fn optimizer_isolation_and_end_to_end_updates() {
    let data = narrow();
    let mut t = Trainer::new(tiny()).unwrap();
    let before: Vec<u64> = [Group::Encoder, Group::Volume, Group::Field, Group::Discriminator].iter().map(|&g| t.model.hash_group(g)).collect();
    for _ in 0..3 {
        let r = t.step(core::slice::from_ref(&data)).unwrap();
        assert_eq!(r.hashes[0], r.hashes[1], "D step touched generator weights");
        assert_eq!(r.hashes[2], r.hashes[3], "G step touched discriminator weights");
        assert!(r.total.is_finite());
    }
    let after: Vec<u64> = [Group::Encoder, Group::Volume, Group::Field, Group::Discriminator].iter().map(|&g| t.model.hash_group(g)).collect();
    for k in 0..4 {
        assert_ne!(before[k], after[k], "group {k} did not move");
    }
}

#[test]
fn steps_are_reproducible_and_resumable() {
    let data = narrow();
    let scenes = core::slice::from_ref(&data);
    let mut a = Trainer::new(tiny()).unwrap();
    let mut b = Trainer::new(tiny()).unwrap();
    let ra: Vec<_> = (0..4).map(|_| a.step(scenes).unwrap()).collect();
    let rb: Vec<_> = (0..2).map(|_| b.step(scenes).unwrap()).collect();
    let mut resumed = Trainer::from_entries(tiny(), &b.to_entries()).unwrap();
    assert_eq!(resumed.iteration, 2);
    let rc: Vec<_> = (0..2).map(|_| resumed.step(scenes).unwrap()).collect();
    assert_eq!(ra[..2], rb[..]);
    assert_eq!(ra[2..], rc[..]);
    assert_eq!(a.to_entries(), resumed.to_entries());
}

#[test]
fn no_adversarial_variant_leaves_discriminator_alone() {
    let data = narrow();
    let mut t = Trainer::new(tiny().variant("no-adv").unwrap()).unwrap();
    let d0 = t.model.hash_group(Group::Discriminator);
    let r = t.step(core::slice::from_ref(&data)).unwrap();
    assert_eq!(t.model.hash_group(Group::Discriminator), d0);
    assert_eq!((r.components.d, r.components.adv), (0.0, 0.0));
}

#[test]
fn tiled_render_matches_single_pass() {
    let data = narrow();
    let t = Trainer::new(tiny()).unwrap();
    let target = data.protocol.heldout[0];
    let tiled = t.model.render_dataset_view(&data, target, 8).unwrap();
    let sources = source_indices(&data, 3).unwrap();
    let views: Vec<SourceView> = sources.iter().map(|&i| SourceView { camera: &data.cameras[i], image: &data.views[i].image }).collect();
    let reference = &data.cameras[data.reference_for(&sources, &data.cameras[target])];
    let whole = t.model.render_view(&views, reference, &data.cameras[target], 32, 32, data.near, data.far, 8, 0).unwrap();
    assert_eq!(tiled.image, whole.image);
    assert_eq!(tiled.depth, whole.depth);
    assert_eq!((tiled.image.width, tiled.image.height), (32, 32));
    assert!(tiled.depth.data.iter().all(|&z| (data.near as f32 - 1e-3..=data.far as f32 + 1e-3).contains(&z)));
}

#[test]
fn full_model_patch_loss_gradient_matches_finite_differences() {
    let spec = preset("two-planes", 0).unwrap();
    let rig = Rig { pattern: RigPattern::Arc, n_views: 5, baseline_angle: 4.0, target: Vector3::zeros() };
    let protocol = Protocol { sources: vec![0, 2, 4], train_targets: vec![1, 3], heldout: vec![] };
    let data = build_dataset(&spec, &rig, protocol, 32, 32).unwrap();
    let mut cfg = tiny().model;
    cfg.delta = 2;
    cfg.disc_channels = vec![];
    let model = Model::<f64>::new(cfg, 5).unwrap();
    let sources = [0usize, 2, 4];
    let views: Vec<SourceView> = sources.iter().map(|&i| SourceView { camera: &data.cameras[i], image: &data.views[i].image }).collect();
    let target = &data.cameras[1];
    let reference = &data.cameras[data.reference_for(&sources, target)];
    let patch = patch_grid((15.0, 16.0), 2.0, 2).unwrap();
    let truth = Tensor::from_fn(&[3, 3, 3], |i| 0.2 + (i % 4) as f64 * 0.15);
    let ids = model.generator_ids();
    let f = |g: &mut Graph<f64>, ps: &ParamSet<f64>, bound: &crate::tensor::Bound| {
        let mut f = Forward::new(g, ps, bound, Mode::Train);
        let e = model.embedding(&mut f, &views, reference, data.near, data.far)?;
        let ctx = RenderContext { net: &model.field, embedding: &e, sources: &views, samples: 5 };
        let r = render_patch::<f64, ChaCha8Rng>(&mut f, &ctx, target, &patch, 32, 32, data.near, data.far, None)?;
        let t = g.constant(truth.clone());
        let rec = loss_rec(g, r.color, t)?;
        let rec = g.scale(rec, 20.0);
        let smooth = loss_smooth(g, r.depth, &truth)?;
        let smooth = g.scale(smooth, 0.4);
        let dist = loss_dist(g, r.weights)?;
        let a = g.add(rec, smooth)?;
        g.add(a, dist)
    };
    let report = gradcheck::check_params(&model.params, &ids, 2, f).unwrap();
    assert!(report.checked > 40, "{report:?}");
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
