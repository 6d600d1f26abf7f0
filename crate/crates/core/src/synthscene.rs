//! Procedural LiDAR scenes: a ground plane, optional street walls, car
//! cuboids and pedestrian cylinders, scanned with one ray per pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotate::{annotate_scene, AnnotationRules, Box3D, ObjectClass, SceneMeta, TemplatePart, TimeOfDay, Weather};
use crate::error::{invalid, Result};
use crate::rangemap::{Point, PointCloud, SensorConfig};

/// Point label of the ground plane; walls are 1 and object class `k` is
/// `2 + k` in [`ObjectClass::ALL`] order.
pub const LABEL_GROUND: u32 = 0;
pub const LABEL_WALL: u32 = 1;
pub const LABEL_COUNT: u32 = 2 + ObjectClass::ALL.len() as u32;

pub fn object_label(class: ObjectClass) -> u32 {
    2 + ObjectClass::ALL.iter().position(|c| *c == class).expect("listed") as u32
}

/// Object on the ground: footprint center, heading and `[l, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub class: ObjectClass,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub size: [f64; 3],
}

impl PlacedObject {
    fn footprint_radius(&self) -> f64 {
        0.5 * self.size[0].hypot(self.size[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Appearance {
    pub ground: f64,
    pub wall: f64,
    pub car: f64,
    pub pedestrian: f64,
    pub other: f64,
    /// Half-width of the uniform intensity noise.
    pub intensity_noise: f64,
    pub rain_drop: f64,
    /// Depth noise standard deviation in rain, meters.
    pub rain_jitter: f64,
    pub night_scale: f64,
}

impl Default for Appearance {
    fn default() -> Self {
        Self { ground: 0.2, wall: 0.3, car: 0.6, pedestrian: 0.4, other: 0.5, intensity_noise: 0.05, rain_drop: 0.15, rain_jitter: 0.03, night_scale: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub sensor: SensorConfig,
    /// Height of the sensor above the ground, meters.
    pub sensor_height: f64,
    /// Distance between the two street walls; `None` for open ground.
    pub street_width: Option<f64>,
    pub objects: Vec<PlacedObject>,
    pub meta: SceneMeta,
    pub appearance: Appearance,
    pub seed: u64,
}

/// Ranges for [`SceneSpec::random`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomScene {
    pub sensor_height: f64,
    pub street_width: Option<f64>,
    pub cars: (usize, usize),
    pub pedestrians: (usize, usize),
    pub barriers: (usize, usize),
    /// Horizontal distance of object centers from the sensor.
    pub distance: (f64, f64),
    pub rain_probability: f64,
    pub night_probability: f64,
}

impl Default for RandomScene {
    fn default() -> Self {
        Self {
            sensor_height: 1.8,
            street_width: Some(16.0),
            cars: (0, 7),
            pedestrians: (0, 2),
            barriers: (0, 1),
            distance: (4.0, 25.0),
            rain_probability: 0.3,
            night_probability: 0.3,
        }
    }
}

fn size_for(class: ObjectClass, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match class {
        ObjectClass::Car => [rng.gen_range(3.8..4.8), rng.gen_range(1.7..2.0), rng.gen_range(1.4..1.7)],
        ObjectClass::Pedestrian => {
            let d = rng.gen_range(0.5..0.7);
            [d, d, rng.gen_range(1.6..1.9)]
        }
        ObjectClass::Truck | ObjectClass::Bus => [rng.gen_range(7.0..10.0), rng.gen_range(2.4..2.6), rng.gen_range(2.8..3.4)],
        ObjectClass::Barrier => [rng.gen_range(1.5..2.5), 0.4, 1.0],
        ObjectClass::TrafficCone => [0.4, 0.4, 0.7],
        ObjectClass::Bicycle | ObjectClass::Motorcycle => [1.8, 0.6, 1.3],
    }
}

impl SceneSpec {
    /// Samples counts, poses and sizes; footprints never overlap and keep
    /// clear of the walls. Objects that find no free spot in 200 tries
    /// are left out.
    pub fn random(sensor: SensorConfig, ranges: &RandomScene, seed: u64) -> Result<Self> {
        sensor.validate()?;
        if !(ranges.distance.0 > 0.0 && ranges.distance.0 < ranges.distance.1) {
            return invalid("distance range must be increasing and positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let meta = SceneMeta {
            weather: if rng.gen_bool(ranges.rain_probability) { Weather::Rainy } else { Weather::Sunny },
            time: if rng.gen_bool(ranges.night_probability) { TimeOfDay::Night } else { TimeOfDay::Day },
        };
        let mut wanted = Vec::new();
        for (class, (lo, hi)) in [(ObjectClass::Car, ranges.cars), (ObjectClass::Pedestrian, ranges.pedestrians), (ObjectClass::Barrier, ranges.barriers)] {
            let n = rng.gen_range(lo..=hi.max(lo));
            wanted.extend(std::iter::repeat_n(class, n));
        }
        let max_dist = ranges.distance.1.min(0.75 * sensor.depth_max);
        let mut objects: Vec<PlacedObject> = Vec::new();
        for class in wanted {
            let size = size_for(class, &mut rng);
            for _ in 0..200 {
                let r = rng.gen_range(ranges.distance.0..max_dist.max(ranges.distance.0 + 1e-3));
                let a = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let cand = PlacedObject { class, x: r * a.cos(), y: r * a.sin(), yaw, size };
                let rad = cand.footprint_radius();
                let inside = ranges.street_width.is_none_or(|w| cand.y.abs() + rad < 0.5 * w - 0.2);
                let free = objects.iter().all(|o| (o.x - cand.x).hypot(o.y - cand.y) > o.footprint_radius() + rad + 0.3);
                if inside && free && r > rad + 1.0 {
                    objects.push(cand);
                    break;
                }
            }
        }
        let spec =
            Self { sensor, sensor_height: ranges.sensor_height, street_width: ranges.street_width, objects, meta, appearance: Appearance::default(), seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        if !(self.sensor_height > 0.0) {
            return invalid("sensor height must be positive");
        }
        if let Some(w) = self.street_width {
            if !(w > 0.0) {
                return invalid("street width must be positive");
            }
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !o.size.iter().all(|s| *s > 0.0) {
                return invalid(format!("object {i} has a non-positive size"));
            }
            if o.x.hypot(o.y) + o.footprint_radius() > self.sensor.depth_max {
                return invalid(format!("object {i} lies beyond the maximum range"));
            }
            for (j, p) in self.objects.iter().enumerate().skip(i + 1) {
                if (o.x - p.x).hypot(o.y - p.y) < o.footprint_radius() + p.footprint_radius() {
                    return invalid(format!("objects {i} and {j} overlap"));
                }
            }
        }
        Ok(())
    }

    pub fn ground_z(&self) -> f64 {
        -self.sensor_height
    }

    /// Boxes of every placed object, bottoms resting on the ground.
    pub fn boxes(&self) -> Vec<Box3D> {
        self.objects.iter().map(|o| Box3D::new([o.x, o.y, self.ground_z() + 0.5 * o.size[2]], o.size, o.yaw, o.class).expect("validated sizes")).collect()
    }

    pub fn geometry(&self) -> Geometry {
        let g = self.ground_z();
        let primitives = self
            .objects
            .iter()
            .map(|o| match o.class {
                ObjectClass::Pedestrian => Primitive::Cylinder { center: [o.x, o.y], radius: 0.5 * o.size[0].max(o.size[1]), z: [g, g + o.size[2]] },
                _ => Primitive::Cuboid { center: [o.x, o.y, g + 0.5 * o.size[2]], size: o.size, yaw: o.yaw },
            })
            .collect();
        Geometry { ground_z: Some(g), wall_y: self.street_width.map(|w| 0.5 * w), primitives, depth_max: self.sensor.depth_max }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Box rotated by `yaw` about the vertical axis through its center.
    Cuboid { center: [f64; 3], size: [f64; 3], yaw: f64 },
    /// Vertical cylinder between heights `z[0]` and `z[1]`.
    Cylinder { center: [f64; 2], radius: f64, z: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub ground_z: Option<f64>,
    /// Walls at `y = ±wall_y`.
    pub wall_y: Option<f64>,
    pub primitives: Vec<Primitive>,
    pub depth_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Ground,
    Wall,
    Object(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub depth: f64,
    pub surface: Surface,
}

const T_MIN: f64 = 1e-9;

fn cuboid_hit(o: [f64; 3], d: [f64; 3], center: [f64; 3], size: [f64; 3], yaw: f64) -> Option<f64> {
    let (s, c) = yaw.sin_cos();
    let rel = [o[0] - center[0], o[1] - center[1], o[2] - center[2]];
    let po = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]];
    let pd = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        let half = 0.5 * size[k];
        if pd[k].abs() < 1e-15 {
            if po[k].abs() > half {
                return None;
            }
            continue;
        }
        let a = (-half - po[k]) / pd[k];
        let b = (half - po[k]) / pd[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    if t0 > t1 {
        return None;
    }
    [t0, t1].into_iter().find(|t| *t > T_MIN)
}

fn cylinder_hit(o: [f64; 3], d: [f64; 3], center: [f64; 2], radius: f64, z: [f64; 2]) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut take = |t: f64| {
        if t > T_MIN && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    let (px, py) = (o[0] - center[0], o[1] - center[1]);
    let a = d[0] * d[0] + d[1] * d[1];
    if a > 1e-15 {
        let b = 2.0 * (px * d[0] + py * d[1]);
        let c = px * px + py * py - radius * radius;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            for t in [(-b - disc.sqrt()) / (2.0 * a), (-b + disc.sqrt()) / (2.0 * a)] {
                let h = o[2] + t * d[2];
                if h >= z[0] && h <= z[1] {
                    take(t);
                }
            }
        }
    }
    if d[2].abs() > 1e-15 {
        for zc in z {
            let t = (zc - o[2]) / d[2];
            let (x, y) = (px + t * d[0], py + t * d[1]);
            if x * x + y * y <= radius * radius {
                take(t);
            }
        }
    }
    best
}

/// Nearest surface along a unit ray, or `None` beyond `depth_max`.
pub fn raycast(origin: [f64; 3], direction: [f64; 3], geometry: &Geometry) -> Result<Option<Hit>> {
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !((norm - 1.0).abs() <= 1e-9) {
        return invalid(format!("ray direction must be a unit vector, |d| = {norm}"));
    }
    let (o, d) = (origin, direction);
    let mut best: Option<Hit> = None;
    let mut consider = |t: Option<f64>, surface: Surface| {
        if let Some(t) = t {
            if t > T_MIN && t <= geometry.depth_max && best.is_none_or(|b| t < b.depth) {
                best = Some(Hit { depth: t, surface });
            }
        }
    };
    if let Some(g) = geometry.ground_z {
        if d[2] < 0.0 && o[2] > g {
            consider(Some((g - o[2]) / d[2]), Surface::Ground);
        }
    }
    if let Some(w) = geometry.wall_y {
        if d[1].abs() > 1e-15 {
            let target = if d[1] > 0.0 { w } else { -w };
            consider(Some((target - o[1]) / d[1]), Surface::Wall);
        }
    }
    for (i, p) in geometry.primitives.iter().enumerate() {
        let t = match *p {
            Primitive::Cuboid { center, size, yaw } => cuboid_hit(o, d, center, size, yaw),
            Primitive::Cylinder { center, radius, z } => cylinder_hit(o, d, center, radius, z),
        };
        consider(t, Surface::Object(i));
    }
    Ok(best)
}

/// A generated scene with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    /// Points carry surface labels, see [`LABEL_GROUND`].
    pub cloud: PointCloud,
    pub boxes: Vec<Box3D>,
    pub meta: SceneMeta,
    pub prompt: String,
}

/// Sidecar written next to each scene's point file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSidecar {
    pub id: String,
    pub boxes: Vec<Box3D>,
    pub weather: Weather,
    pub time: TimeOfDay,
    pub prompt: String,
    pub labels: Vec<u32>,
}

impl SceneRecord {
    pub fn sidecar(&self, id: &str) -> SceneSidecar {
        SceneSidecar {
            id: id.to_owned(),
            boxes: self.boxes.clone(),
            weather: self.meta.weather,
            time: self.meta.time,
            prompt: self.prompt.clone(),
            labels: self.cloud.labels.clone().unwrap_or_default(),
        }
    }
}

/// Scans the scene: one ray per pixel center, with per-surface intensity,
/// rain dropout and jitter, and night dimming. The prompt uses `template`.
pub fn generate_scene(spec: &SceneSpec, template: &[TemplatePart]) -> Result<SceneRecord> {
    spec.validate()?;
    let geometry = spec.geometry();
    let app = &spec.appearance;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5ce7_e5ca_a11e_d000);
    let jitter = Normal::new(0.0, app.rain_jitter.max(0.0)).map_err(|e| crate::error::Error::InvalidArgument(e.to_string()))?;
    let rainy = spec.meta.weather == Weather::Rainy;
    let night = spec.meta.time == TimeOfDay::Night;
    let cfg = &spec.sensor;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for h in 0..cfg.height {
        let (sp, cp) = cfg.row_pitch(h).sin_cos();
        for w in 0..cfg.width {
            let (sa, ca) = cfg.column_azimuth(w).sin_cos();
            let dir = [cp * ca, cp * sa, sp];
            let Some(hit) = raycast([0.0; 3], dir, &geometry)? else { continue };
            let (base, label) = match hit.surface {
                Surface::Ground => (app.ground, LABEL_GROUND),
                Surface::Wall => (app.wall, LABEL_WALL),
                Surface::Object(i) => {
                    let class = spec.objects[i].class;
                    let v = match class {
                        ObjectClass::Car => app.car,
                        ObjectClass::Pedestrian => app.pedestrian,
                        _ => app.other,
                    };
                    (v, object_label(class))
                }
            };
            let noise = rng.gen_range(-1.0..=1.0) * app.intensity_noise;
            let mut depth = hit.depth;
            if rainy {
                let drop = rng.gen_bool(app.rain_drop);
                let dz = jitter.sample(&mut rng);
                if drop {
                    continue;
                }
                depth += dz;
            }
            if depth < cfg.depth_min || depth > cfg.depth_max {
                continue;
            }
            let mut intensity = (base + noise).clamp(0.0, 1.0);
            if night {
                intensity *= app.night_scale;
            }
            points.push(Point::new(depth * dir[0], depth * dir[1], depth * dir[2], intensity));
            labels.push(label);
        }
    }
    let boxes = spec.boxes();
    let prompt = annotate_scene(&boxes, &spec.meta, &AnnotationRules::default(), template)?;
    Ok(SceneRecord { cloud: PointCloud::with_labels(points, labels)?, boxes, meta: spec.meta, prompt })
}
