//! Metric closed forms and symmetries, the clustering detector on scanned
//! scenes, and the match rate against a naive checker.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use t2ldm::annotate::{annotate_scene, orientation_bin, AnnotationRules, Box3D, ObjectClass, SceneMeta, TemplatePart, TimeOfDay, Weather};
use t2ldm::evalmetrics::{bev_histogram, chamfer, detect_objects, earth_movers, jsd, jsd_slices, mmd, nearest_mse, tbr, Detection, EXACT_EMD_LIMIT};
use t2ldm::rangemap::{Point, PointCloud, SensorConfig};
use t2ldm::synthscene::{generate_scene, Appearance, PlacedObject, SceneSpec};

fn flat(pts: &[(f64, f64)]) -> PointCloud {
    PointCloud::new(pts.iter().map(|(x, y)| Point::new(*x, *y, 0.0, 0.0)).collect())
}

#[test]
fn closed_forms() {
    let p = bev_histogram(&flat(&[(1.0, 1.0), (-3.0, 2.0), (7.5, -9.0)]), 10, 10.0).unwrap();
    assert_eq!(jsd(&p, &p).unwrap(), 0.0);
    let q = bev_histogram(&flat(&[(-9.0, -9.0)]), 10, 10.0).unwrap();
    assert!((jsd(&p, &q).unwrap() - 1.0).abs() < 1e-12);
    let a: Vec<&[f64]> = vec![&[0.0, 1.0], &[2.0, 0.5], &[1.0, 1.0]];
    assert!(mmd(&a, &a, None).unwrap().abs() < 1e-15);
    for d in [0.0, 1e-3, 0.37, 12.5] {
        let x = [[0.25, -1.0, 3.0]];
        let y = [[0.25 + d * 0.6, -1.0 - d * 0.8, 3.0]];
        assert!((chamfer(&x, &y) - 2.0 * d * d).abs() <= 1e-9);
        assert!((nearest_mse(&x, &y) - d * d).abs() <= 1e-9);
        assert!((earth_movers(&x, &y) - d).abs() <= 1e-9);
    }
}

#[test]
fn worked_match_rate() {
    let prompts: Vec<String> = ["Two cars.", "One car.", "Five cars."].map(String::from).to_vec();
    let cars = |n: usize| -> Vec<Detection> {
        (0..n).map(|i| Detection { center: [10.0 * i as f64, 0.0], extent: [4.5, 1.9], points: 40, class: Some(ObjectClass::Car), yaw: None }).collect()
    };
    let rate = tbr(&prompts, &[cars(1), cars(3), cars(5)], &AnnotationRules::default()).unwrap();
    assert!((rate - 100.0 / 3.0).abs() <= 0.01, "{rate}");
}

fn random_boxes(rng: &mut ChaCha8Rng) -> Vec<Box3D> {
    let n = rng.gen_range(0..8);
    (0..n)
        .map(|_| {
            let class = if rng.gen_bool(0.6) { ObjectClass::Car } else { ObjectClass::ALL[rng.gen_range(1..8)] };
            let yaw = (rng.gen_range(0..8) as f64 * 45.0 + rng.gen_range(-30.0..30.0)).to_radians();
            Box3D::new([rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), -1.0], [4.0, 2.0, 1.5], yaw, class).unwrap()
        })
        .collect()
}

/// Whether the detected boxes realise every object statement about the
/// captioned boxes, written without parsing any text.
fn naive_match(captioned: &[Box3D], detected: &[Box3D]) -> bool {
    let cars = |s: &[Box3D]| s.iter().filter(|b| b.class == ObjectClass::Car).copied().collect::<Vec<_>>();
    let (want, got) = (cars(captioned), cars(detected));
    let count_ok = if want.len() > 5 { got.len() > 5 } else { got.len() == want.len() };
    if want.is_empty() {
        return count_ok;
    }
    let classes_ok = captioned.iter().filter(|b| b.class != ObjectClass::Car).all(|b| !got.is_empty() && detected.iter().any(|d| d.class == b.class));
    let bins_ok = got.is_empty() || want.iter().all(|w| got.iter().any(|g| orientation_bin(g.yaw) == orientation_bin(w.yaw)));
    count_ok && classes_ok && bins_ok
}

#[test]
fn match_rate_agrees_with_a_naive_checker() {
    let rules = AnnotationRules::default();
    let meta = SceneMeta { weather: Weather::Sunny, time: TimeOfDay::Day };
    let template = [TemplatePart::Weather, TemplatePart::Quantity, TemplatePart::Location, TemplatePart::Orientation];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut prompts, mut dets, mut expected) = (Vec::new(), Vec::new(), 0usize);
    for _ in 0..500 {
        let captioned = random_boxes(&mut rng);
        let detected = match rng.gen_range(0..4) {
            0 => captioned.clone(),
            1 => {
                let mut d = captioned.clone();
                if !d.is_empty() {
                    let k = rng.gen_range(0..d.len());
                    d.remove(k);
                }
                d
            }
            2 => captioned.iter().map(|b| Box3D::new(b.center, b.size, b.yaw + std::f64::consts::FRAC_PI_2, b.class).unwrap()).collect(),
            _ => random_boxes(&mut rng),
        };
        let prompt = annotate_scene(&captioned, &meta, &rules, &template).unwrap();
        let scene_dets: Vec<Detection> = detected.iter().map(Detection::from_box).collect();
        let single = tbr(std::slice::from_ref(&prompt), std::slice::from_ref(&scene_dets), &rules).unwrap();
        let naive = naive_match(&captioned, &detected);
        assert_eq!(single == 100.0, naive, "{prompt} vs {detected:?}");
        expected += naive as usize;
        prompts.push(prompt);
        dets.push(scene_dets);
    }
    let rate = tbr(&prompts, &dets, &rules).unwrap();
    assert!((rate - 100.0 * expected as f64 / 500.0).abs() < 1e-9);
    assert!(expected > 100 && expected < 450, "mix of matches and misses: {expected}");
}

fn scan(objects: Vec<PlacedObject>) -> PointCloud {
    let spec = SceneSpec {
        sensor: SensorConfig::new(32, 1024, 10.0, -30.0, 1.0, 50.0).unwrap(),
        sensor_height: 1.8,
        street_width: None,
        objects,
        meta: SceneMeta { weather: Weather::Sunny, time: TimeOfDay::Day },
        appearance: Appearance::default(),
        seed: 1,
    };
    generate_scene(&spec, &[TemplatePart::Quantity]).unwrap().cloud
}

fn car_at(x: f64, y: f64) -> PlacedObject {
    PlacedObject { class: ObjectClass::Car, x, y, yaw: 0.0, size: [4.5, 1.9, 1.6] }
}

#[test]
fn detector_counts_scanned_cars() {
    assert!(detect_objects(&scan(vec![])).is_empty(), "bare ground has no clusters");
    let one = detect_objects(&scan(vec![car_at(10.0, 3.0)]));
    assert_eq!(one.len(), 1, "{one:?}");
    assert!(one[0].is_car());
    assert!((one[0].center[0] - 10.0).abs() < 2.5 && (one[0].center[1] - 3.0).abs() < 1.5);
    let two = detect_objects(&scan(vec![car_at(10.0, 3.0), car_at(10.0, -7.0)]));
    assert_eq!(two.iter().filter(|d| d.is_car()).count(), 2, "{two:?}");
}

#[test]
fn uniform_points_fill_bins_evenly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 200_000;
    let cloud = PointCloud::new((0..n).map(|_| Point::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), 0.0, 0.0)).collect());
    let h = bev_histogram(&cloud, 10, 10.0).unwrap();
    assert_eq!(h.count, n);
    // Each bin holds a binomial share of 1/100; six standard deviations.
    let sd = (0.01f64 * 0.99 / n as f64).sqrt();
    assert!(h.probs.iter().all(|p| (p - 0.01).abs() < 6.0 * sd), "{:?}", h.probs);
}

#[test]
fn shifting_by_one_bin_moves_the_histogram_by_one_bin() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (grid, range) = (20usize, 10.0);
    let cell = 2.0 * range / grid as f64;
    // Bin centers, kept away from the border column.
    let pts: Vec<(f64, f64)> =
        (0..300).map(|_| (-range + (rng.gen_range(0..grid - 1) as f64 + 0.5) * cell, -range + (rng.gen_range(0..grid) as f64 + 0.5) * cell)).collect();
    let a = bev_histogram(&flat(&pts), grid, range).unwrap();
    let moved: Vec<(f64, f64)> = pts.iter().map(|(x, y)| (x + cell, *y)).collect();
    let b = bev_histogram(&flat(&moved), grid, range).unwrap();
    for i in 0..grid - 1 {
        for j in 0..grid {
            assert_eq!(a.probs[i * grid + j], b.probs[(i + 1) * grid + j]);
        }
    }
    assert!(b.probs[..grid].iter().all(|p| *p == 0.0));
}

fn arb_probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, n).prop_filter_map("nonzero", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
    })
}

fn arb_cloud(max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(x, y, z)| [x, y, z]), 1..max)
}

proptest! {
    #[test]
    fn jsd_is_symmetric_and_bounded(p in arb_probs(16), q in arb_probs(16)) {
        let a = jsd_slices(&p, &q).unwrap();
        prop_assert!((a - jsd_slices(&q, &p).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
    }

    #[test]
    fn mmd_is_symmetric_and_nonnegative(a in prop::collection::vec(arb_probs(6), 1..6), b in prop::collection::vec(arb_probs(6), 1..6)) {
        let ra: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
        let rb: Vec<&[f64]> = b.iter().map(Vec::as_slice).collect();
        let ab = mmd(&ra, &rb, None).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - mmd(&rb, &ra, None).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn chamfer_is_symmetric(a in arb_cloud(30), b in arb_cloud(30)) {
        prop_assert!((chamfer(&a, &b) - chamfer(&b, &a)).abs() < 1e-9);
    }

    #[test]
    fn distances_vanish_exactly_on_equal_multisets(a in arb_cloud(40), seed in 0u64..1000, which in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = a.clone();
        for i in (1..b.len()).rev() {
            b.swap(i, rng.gen_range(0..=i));
        }
        prop_assert_eq!(chamfer(&a, &b), 0.0);
        prop_assert!(earth_movers(&a, &b).abs() < 1e-12);
        let k = which % b.len();
        b[k][2] += 0.5;
        prop_assert!(chamfer(&a, &b) > 0.0);
        prop_assert!(earth_movers(&a, &b) > 0.0);
    }
}

#[test]
fn large_clouds_use_the_approximate_matching_within_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = EXACT_EMD_LIMIT + 44;
    let a: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
    let shift = 0.01;
    let b: Vec<[f64; 3]> = a.iter().map(|p| [p[0] + shift, p[1], p[2]]).collect();
    let emd = earth_movers(&a, &b);
    // The optimum is at most the shift; the auction mean is within ε of it.
    assert!(emd <= shift + 1e-5 + 1e-9, "{emd}");
    assert!(emd > 0.0);
}
