use proptest::prelude::*;

use reorient_diff::diffusion::Workspace;
use reorient_diff::harness::ExperimentConfig;
use reorient_diff::scene::{
    generate_scene, load_scene, resolve_reference, save_scene, scene_from_json, scene_to_json, ObjectRef, Stage,
    TaskDescriptor, N_LEVELS, N_OBJECT_TYPES, N_ORIENTATIONS,
};

fn descriptor() -> impl Strategy<Value = TaskDescriptor> {
    let reference = prop_oneof![
        (0..N_OBJECT_TYPES).prop_map(ObjectRef::Absolute),
        Just(ObjectRef::Heaviest),
        Just(ObjectRef::Lightest),
    ];
    (reference, 0..N_ORIENTATIONS, 0..N_LEVELS).prop_map(|(reference, orientation, level)| TaskDescriptor {
        reference,
        orientation,
        level,
    })
}

proptest! {
    #[test]
    fn descriptor_round_trip(d in descriptor()) {
        prop_assert_eq!(TaskDescriptor::decode(&d.encode()).unwrap(), d);
    }

    #[test]
    fn descriptor_rejects_non_one_hot(d in descriptor(), i in 0usize..18, v in prop_oneof![Just(0.5f64), Just(2.0), Just(-1.0)]) {
        let mut e = d.encode();
        e[i] = v;
        prop_assert!(TaskDescriptor::decode(&e).is_err());
    }

    #[test]
    fn generated_scenes_are_consistent(seed in 0u64..2000, n in 2usize..=5) {
        let cfg = ExperimentConfig::default();
        let ws = Workspace::default();
        let Ok((s, oracle)) = generate_scene(seed, n, &cfg.scene, &cfg.oracle, &ws) else {
            return Ok(());
        };
        prop_assert_eq!(s.objects.len(), n);
        let present: Vec<usize> = s.objects.iter().map(|o| o.object_id).collect();
        prop_assert_eq!(
            resolve_reference(s.task.reference, &present, &cfg.scene.catalog),
            Some(s.target_object_id)
        );
        prop_assert!(s.heightmap.grid.iter().all(|h| *h >= 0.0));
        prop_assert!(s.target_mask_fine().iter().any(|m| *m));
        let coarse = s.target_mask_coarse(&cfg.scene);
        prop_assert_eq!(coarse.nrows(), cfg.scene.coarse_cells);
        let fr = oracle.analytic_fraction(Stage::Reorient, &ws);
        prop_assert!((0.0..=1.0).contains(&fr));
    }
}

#[test]
fn scene_files_round_trip() {
    let cfg = ExperimentConfig::default();
    let (s, o) = (0..50)
        .find_map(|seed| generate_scene(seed, 4, &cfg.scene, &cfg.oracle, &Workspace::default()).ok())
        .unwrap();
    let (s2, o2) = scene_from_json(&scene_to_json(&s, &o).unwrap()).unwrap();
    assert_eq!(s, s2);
    assert_eq!(o, o2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.json");
    save_scene(&path, &s, &o).unwrap();
    assert_eq!(load_scene(&path).unwrap().0, s);
    assert!(load_scene(dir.path().join("missing.json")).is_err());
    assert!(scene_from_json("{}").is_err());
}

#[test]
fn generation_is_deterministic() {
    let cfg = ExperimentConfig::default();
    let ws = Workspace::default();
    for seed in [3, 77, 1234] {
        let a = generate_scene(seed, 4, &cfg.scene, &cfg.oracle, &ws);
        let b = generate_scene(seed, 4, &cfg.scene, &cfg.oracle, &ws);
        match (a, b) {
            (Ok(a), Ok(b)) => assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            _ => panic!("seed {seed} not deterministic"),
        }
    }
    assert!(generate_scene(1, 0, &cfg.scene, &cfg.oracle, &ws).is_err());
    assert!(generate_scene(1, N_OBJECT_TYPES + 1, &cfg.scene, &cfg.oracle, &ws).is_err());
}
