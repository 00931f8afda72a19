use std::sync::OnceLock;

use facecorr::mesh::{load_mesh, save_mesh, MeshFormat};
use facecorr::model::{load_model, save_model, train, TrainOptions, TrainedModel, LEFT_SUBALARE, NOSE_TIP, RIGHT_SUBALARE, SUBNASAL};
use facecorr::nalgebra::{Point3, Vector3};
use facecorr::predict::{align_template, predict_landmarks, restrict_regions, PredictOptions};
use facecorr::synth::{generate_dataset, random_pose, Dataset, DatasetOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    data: Dataset,
    model: TrainedModel,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let opts = DatasetOptions {
            train: 6,
            test: 2,
            scan_spacing: 3.0,
            ..DatasetOptions::default()
        };
        let data = generate_dataset(5, &opts).unwrap();
        let annotated: Vec<_> = data.train.iter().map(|f| f.annotated()).collect();
        let model = train(&annotated, &TrainOptions::default()).unwrap();
        Fixture { data, model }
    })
}

#[test]
fn model_round_trips_through_json() {
    let fx = fixture();
    let mut buf = Vec::new();
    save_model(&fx.model, &mut buf).unwrap();
    assert_eq!(load_model(buf.as_slice()).unwrap(), fx.model);
}

#[test]
fn prediction_is_deterministic_and_pose_invariant() {
    let fx = fixture();
    let face = &fx.data.train[0];
    let opts = PredictOptions::default();
    let a = predict_landmarks(&face.mesh, &fx.model, &opts).unwrap();
    let b = predict_landmarks(&face.mesh, &fx.model, &opts).unwrap();
    assert_eq!(a.vertices(), b.vertices());

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pose = random_pose(&mut rng, 60.0, 100.0);
    let moved = face.mesh.map_positions(|p| pose.apply(p)).unwrap();
    let c = predict_landmarks(&moved, &fx.model, &opts).unwrap();
    assert_eq!(a.vertices(), c.vertices());
}

#[test]
fn training_face_landmarks_are_recovered() {
    let fx = fixture();
    let face = &fx.data.train[1];
    let pred = predict_landmarks(&face.mesh, &fx.model, &PredictOptions::default()).unwrap();
    let truth = face.landmark_positions();
    for (k, p) in pred.positions().iter().enumerate() {
        assert!((p - truth[k]).norm() < 10.0, "landmark {} off by {}", k + 1, (p - truth[k]).norm());
    }
}

#[test]
fn template_alignment_resolves_the_subalare_labels() {
    let fx = fixture();
    let face = &fx.data.train[2];
    let lm = face.landmark_positions();
    let tip = lm[NOSE_TIP - 1];
    let sub = lm[SUBNASAL - 1];
    let (r, l) = (lm[RIGHT_SUBALARE - 1], lm[LEFT_SUBALARE - 1]);

    let straight = align_template([tip, sub, r, l], &fx.model, &face.mesh).unwrap();
    assert!(!straight.flipped);
    assert_eq!(straight.subalare_labels, [RIGHT_SUBALARE, LEFT_SUBALARE]);

    let swapped = align_template([tip, sub, l, r], &fx.model, &face.mesh).unwrap();
    assert!(swapped.flipped);
    assert_eq!(swapped.subalare_labels, [LEFT_SUBALARE, RIGHT_SUBALARE]);
    assert!(swapped.d_f[1] < swapped.d_f[0]);

    for (k, p) in straight.initial.iter().enumerate() {
        assert!((p - lm[k]).norm() < 15.0, "aligned landmark {} off by {}", k + 1, (p - lm[k]).norm());
    }
}

#[test]
fn restricted_candidates_respect_radius_order_and_disjointness() {
    let fx = fixture();
    let face = &fx.data.test[0];
    let initial = face.landmark_positions();
    let opts = PredictOptions::default();
    let set = restrict_regions(&initial, &face.mesh, 8.0, &opts).unwrap();
    assert_eq!(set.vertices.len(), initial.len());
    for (k, list) in set.vertices.iter().enumerate() {
        assert!(!list.is_empty());
        assert!(list.len() <= opts.max_candidates);
        assert!(list.windows(2).all(|w| w[0] < w[1]));
        for &v in list {
            assert!((face.mesh.vertex(v) - initial[k]).norm() <= set.radii[k] + 1e-9);
        }
    }
    let (r, l) = (&set.vertices[RIGHT_SUBALARE - 1], &set.vertices[LEFT_SUBALARE - 1]);
    assert!(r.iter().all(|v| l.binary_search(v).is_err()));

    assert!(restrict_regions(&initial, &face.mesh, 0.0, &opts).is_err());
}

#[test]
fn meshes_round_trip_through_every_format() {
    let face = &fixture().data.test[1];
    for format in [MeshFormat::Obj, MeshFormat::PlyAscii, MeshFormat::PlyBinary] {
        let mut buf = Vec::new();
        save_mesh(&mut buf, &face.mesh, format, None).unwrap();
        let back = load_mesh(buf.as_slice(), format).unwrap();
        assert_eq!(back.faces(), face.mesh.faces(), "{format:?}");
        let worst = back
            .vertices()
            .iter()
            .zip(face.mesh.vertices())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(worst < 1e-5, "{format:?} moved a vertex by {worst}");
    }
}

#[test]
fn translated_mesh_keeps_its_prediction_offsets() {
    let fx = fixture();
    let face = &fx.data.train[3];
    let shift = Vector3::new(250.0, -40.0, 13.0);
    let moved = face.mesh.map_positions(|p| Point3::from(p.coords + shift)).unwrap();
    let a = predict_landmarks(&face.mesh, &fx.model, &PredictOptions::default()).unwrap();
    let b = predict_landmarks(&moved, &fx.model, &PredictOptions::default()).unwrap();
    for (p, q) in a.positions().iter().zip(b.positions()) {
        assert!((q - p - shift).norm() < 1e-9);
    }
}
