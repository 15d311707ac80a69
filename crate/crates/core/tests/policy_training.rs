use ofa::camera::{CropConfig, Image, PixelSource};
use ofa::dataset::{build_samples, encode_pose_action, observe_images, Method, Observation, SampleOptions, TrainingSample};
use ofa::env::expert::{scripted_expert, Demonstration, ExpertConfig};
use ofa::env::render::SceneView;
use ofa::env::rollout::{execute_rollout, execute_rollout_recorded, FailureReason, RolloutConfig};
use ofa::env::scene::{build_scene, RigConfig, Scene, SceneConfig};
use ofa::geom::{Pose, Vec3};
use ofa::policy::{infer, reconstruction_mse, train, PolicyConfig, PolicyParams};
use ofa::shape::Primitive;

fn demo(task: &str, seed: u64) -> Demonstration {
    let scene = build_scene(&SceneConfig::new(task, seed)).unwrap();
    scripted_expert(&scene, &RigConfig::default(), &ExpertConfig::default(), seed).unwrap()
}

fn small() -> PolicyConfig {
    PolicyConfig { image_size: 16, conv_channels: vec![8, 8], encoder_hidden: vec![64], decoder_hidden: vec![64, 64], batch_size: 8, ..PolicyConfig::desk() }
}

fn samples(d: &Demonstration, cfg: &PolicyConfig) -> Vec<TrainingSample> {
    let crop = CropConfig { size: cfg.image_size, ..CropConfig::default() };
    build_samples(&d.episodes, &SampleOptions { k: cfg.k, method: Method::Ofa, crop }).unwrap().0
}

fn max_channel_diff(a: &Image, b: &Image) -> u8 {
    let (w, h) = a.size();
    assert_eq!((w, h), b.size());
    let mut m = 0;
    for y in 0..h {
        for x in 0..w {
            for (p, q) in a.pixel(x, y).iter().zip(b.pixel(x, y)) {
                m = m.max(p.abs_diff(q));
            }
        }
    }
    m
}

#[test]
fn single_repeated_sample_is_memorized() {
    let cfg = PolicyConfig { steps: 2000, ..small() };
    let one = samples(&demo("grasp_cup", 0), &cfg).swap_remove(5);
    let set = vec![one; 8];
    let (params, curve) = train(&cfg, &set).unwrap();
    let mse = reconstruction_mse(&params, &set).unwrap();
    assert!(mse < 1e-3, "reconstruction mse {mse:.2e}");
    assert_eq!(curve.last().unwrap().step, 2000);
    let pred = infer(&params, &set[0].observation).unwrap();
    let err = pred.iter().zip(&set[0].target).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max);
    assert!(err < 0.02, "max abs error {err}");
}

#[test]
fn larger_kl_weight_gives_a_smaller_kl_term() {
    let fixture: Vec<TrainingSample> = [0, 1].iter().flat_map(|&s| samples(&demo("pinch_toy", s), &small())).collect();
    let run = |eta: f64| {
        let cfg = PolicyConfig { eta, steps: 300, log_every: 100, ..small() };
        train(&cfg, &fixture).unwrap().1.last().unwrap().kl
    };
    let (free, weighted) = (run(0.0), run(10.0));
    assert!(weighted < free, "kl with eta 10: {weighted}, with eta 0: {free}");
}

/// Translates every body, the arm bases and the cameras by `g`.
fn translated_world(scene: &Scene, g: &Pose) -> Scene {
    let mut out = scene.translated(&g.translation);
    out.table = Primitive::new(scene.table.shape, g.compose(&scene.table.pose));
    for m in &mut out.arms {
        m.base = g.compose(&m.base);
    }
    out
}

#[test]
fn inference_is_invariant_to_translating_the_whole_scene() {
    let d = demo("grasp_cup", 2);
    let ep = &d.episodes[0];
    let cfg = small();
    let crop = CropConfig { size: cfg.image_size, ..CropConfig::default() };
    let mut params = PolicyParams::init(&cfg).unwrap();
    params.trained = true;
    let g = Pose::from_translation(Vec3::new(0.12, -0.07, 0.03));
    let rig = RigConfig::default().build().unwrap();
    let moved_rig = rig.rebased(&g.inverse());
    let moved_scene = translated_world(&d.scene, &g);
    let observe = |scene: &Scene, rig: &ofa::camera::StereoRig, shift: &Pose, i: usize| {
        let mut state = d.states[i].clone();
        state.object = shift.compose(&state.object);
        let a = state.arms[0];
        let model = &scene.arms[0].model;
        let l = SceneView::new(scene, &state, &rig.left);
        let r = SceneView::new(scene, &state, &rig.right);
        let (li, ri) = observe_images(&scene.rig_for_arm(rig, 0), model, &a.q, &a.j, &l, &r, Method::Ofa, &crop).unwrap();
        let wrist = model.wrist_pose_unchecked(&a.q);
        Observation { left: li, right: ri, proprio: encode_pose_action(&wrist, &ep.pre_manip_pose, &a.j) }
    };
    for i in [ep.approach.len(), ep.approach.len() + 6, ep.full_len() - 1] {
        let a = observe(&d.scene, &rig, &Pose::identity(), i);
        let b = observe(&moved_scene, &moved_rig, &g, i);
        assert!(max_channel_diff(&a.left, &b.left) <= 2 && max_channel_diff(&a.right, &b.right) <= 2, "step {i}");
        assert!(a.proprio.iter().zip(&b.proprio).all(|(x, y)| (x - y).abs() < 1e-9));
        let (pa, pb) = (infer(&params, &a).unwrap(), infer(&params, &b).unwrap());
        for (x, y) in pa.iter().zip(&pb) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-5, "step {i}: {u} vs {v}");
            }
        }
    }
}

#[test]
fn rollouts_are_deterministic_and_time_out_without_steps() {
    let d = demo("pinch_toy", 3);
    let mut params = PolicyParams::init(&small()).unwrap();
    params.trained = true;
    let policies = vec![params];
    let rig = RigConfig::default();
    let cfg = RolloutConfig { max_steps: 12, seed: 9, crop: CropConfig { size: 16, ..CropConfig::default() }, ..RolloutConfig::default() };
    let a = execute_rollout_recorded(&d.scene, &policies, Method::Ofa, &rig, &cfg).unwrap();
    let b = execute_rollout_recorded(&d.scene, &policies, Method::Ofa, &rig, &cfg).unwrap();
    assert_eq!(a.result, b.result);
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.approach, b.approach);
    assert!(!a.approach[0].is_empty());

    let zero = execute_rollout(&d.scene, &policies, Method::Ofa, &rig, &RolloutConfig { max_steps: 0, ..cfg }).unwrap();
    assert_eq!((zero.failure, zero.steps, zero.success), (FailureReason::Timeout, 0, false));

    let untrained = PolicyParams::init(&small()).unwrap();
    assert!(execute_rollout(&d.scene, &[untrained], Method::Ofa, &rig, &cfg).is_err());
    assert!(execute_rollout(&d.scene, &[], Method::Ofa, &rig, &cfg).is_err());
}
