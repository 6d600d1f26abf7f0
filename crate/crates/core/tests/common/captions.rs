//! Direct re-statement of the caption rules, used as an oracle.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use t2ldm::annotate::{Box3D, Lateral, Longitudinal, ObjectClass, Orientation, SceneMeta, TemplatePart, TimeOfDay, Weather};

pub const ALL_PARTS: [TemplatePart; 5] = [TemplatePart::Weather, TemplatePart::Time, TemplatePart::Quantity, TemplatePart::Location, TemplatePart::Orientation];

fn words(n: usize) -> &'static str {
    ["No", "One", "Two", "Three", "Four", "Five"][n]
}

/// Bin from whole degrees, so edge cases need no rounding.
pub fn oracle_bin(deg: i64) -> Orientation {
    match deg.rem_euclid(360) {
        d if !(45..315).contains(&d) => Orientation::Forward,
        d if d < 135 => Orientation::Left,
        d if d < 225 => Orientation::Backward,
        _ => Orientation::Right,
    }
}

pub fn oracle_caption(boxes: &[(Box3D, i64)], meta: &SceneMeta, template: &[TemplatePart]) -> String {
    let cars: Vec<i64> = boxes.iter().filter(|(b, _)| b.class == ObjectClass::Car).map(|(_, d)| *d).collect();
    let mut out: Vec<String> = Vec::new();
    let mut push = |s: String| {
        if !out.contains(&s) {
            out.push(s);
        }
    };
    for part in template {
        match part {
            TemplatePart::Weather => push(if meta.weather == Weather::Sunny { "Sunny." } else { "Rainy." }.into()),
            TemplatePart::Time => push(if meta.time == TimeOfDay::Day { "Day." } else { "Night." }.into()),
            TemplatePart::Quantity => push(match cars.len() {
                0 => "No car.".into(),
                1 => "One car.".into(),
                n if n <= 5 => format!("{} cars.", words(n)),
                _ => "More than five cars.".into(),
            }),
            TemplatePart::Location => {
                if cars.is_empty() {
                    push("No car.".into());
                } else {
                    for c in ObjectClass::ALL.iter().skip(1) {
                        if boxes.iter().any(|(b, _)| b.class == *c) {
                            push(format!("One car is around one {}.", c.noun()));
                        }
                    }
                }
            }
            TemplatePart::Orientation => {
                if cars.is_empty() {
                    push("No car.".into());
                }
                for o in [Orientation::Forward, Orientation::Left, Orientation::Backward, Orientation::Right] {
                    if cars.iter().any(|d| oracle_bin(*d) == o) {
                        push(format!("One car is facing {o}."));
                    }
                }
            }
        }
    }
    out.join(" ")
}

/// Random scene whose yaws are whole degrees, with the bin edges and their
/// neighbours drawn often.
pub fn random_scene(rng: &mut ChaCha8Rng) -> (Vec<(Box3D, i64)>, SceneMeta) {
    let n = rng.gen_range(0..9);
    let boxes = (0..n)
        .map(|_| {
            let class = if rng.gen_bool(0.5) { ObjectClass::Car } else { ObjectClass::ALL[rng.gen_range(0..8)] };
            let deg: i64 = if rng.gen_bool(0.5) { rng.gen_range(-8..=8) * 45 + rng.gen_range(-1..=1) } else { rng.gen_range(-400..400) };
            let center = [rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0), rng.gen_range(-2.0..1.0)];
            let size = [rng.gen_range(0.3..12.0), rng.gen_range(0.3..3.0), rng.gen_range(0.5..4.0)];
            (Box3D::new(center, size, (deg as f64).to_radians(), class).unwrap(), deg)
        })
        .collect();
    let meta = SceneMeta {
        weather: if rng.gen_bool(0.5) { Weather::Sunny } else { Weather::Rainy },
        time: if rng.gen_bool(0.5) { TimeOfDay::Day } else { TimeOfDay::Night },
    };
    (boxes, meta)
}

/// Relation for offsets `dx`, `dy` of the target from the other object,
/// with the 2 m band inclusive on both sides.
pub fn oracle_relation(dx: f64, dy: f64) -> (Longitudinal, Lateral) {
    let long = if dx > 2.0 {
        Longitudinal::Ahead
    } else if dx < -2.0 {
        Longitudinal::Behind
    } else {
        Longitudinal::Aligned
    };
    let lat = if dy > 2.0 {
        Lateral::Left
    } else if dy < -2.0 {
        Lateral::Right
    } else {
        Lateral::Center
    };
    (long, lat)
}
