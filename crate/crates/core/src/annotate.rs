//! Rule-based scene captions from 3D boxes: quantity, co-occurrence,
//! orientation and scene-level words, composed by template.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Barrier,
    Truck,
    Bus,
    Bicycle,
    Motorcycle,
    TrafficCone,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 8] = [Self::Car, Self::Pedestrian, Self::Barrier, Self::Truck, Self::Bus, Self::Bicycle, Self::Motorcycle, Self::TrafficCone];

    /// Singular noun as it appears in captions.
    pub fn noun(self) -> &'static str {
        match self {
            Self::Car => "car",
            Self::Pedestrian => "pedestrian",
            Self::Barrier => "barrier",
            Self::Truck => "truck",
            Self::Bus => "bus",
            Self::Bicycle => "bicycle",
            Self::Motorcycle => "motorcycle",
            Self::TrafficCone => "traffic cone",
        }
    }

    pub fn plural(self) -> String {
        match self {
            Self::Bus => "buses".into(),
            c => format!("{}s", c.noun()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct RawBox {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
    class: ObjectClass,
}

/// Oriented box: center and size in meters, yaw in `(−π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct Box3D {
    pub center: [f64; 3],
    /// Length, width, height.
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: ObjectClass,
}

impl TryFrom<RawBox> for Box3D {
    type Error = Error;
    fn try_from(r: RawBox) -> Result<Self> {
        Box3D::new(r.center, r.size, r.yaw, r.class)
    }
}

impl From<Box3D> for RawBox {
    fn from(b: Box3D) -> Self {
        RawBox { center: b.center, size: b.size, yaw: b.yaw, class: b.class }
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class: ObjectClass) -> Result<Self> {
        if !size.iter().all(|s| *s > 0.0 && s.is_finite()) || !center.iter().all(|c| c.is_finite()) || !yaw.is_finite() {
            return invalid(format!("box needs finite center/yaw and positive size, got {size:?}"));
        }
        Ok(Self { center, size, yaw: wrap_angle(yaw), class })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Sunny,
    Rainy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeOfDay {
    Day,
    Night,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub weather: Weather,
    pub time: TimeOfDay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotationRules {
    /// Meters; relative offsets within ± this are "aligned"/"center".
    pub distance_threshold: f64,
    /// Counts above this collapse to "More than five".
    pub quantity_pivot: usize,
    /// Lower edges in degrees of left, backward, right and forward.
    pub orientation_edges: [f64; 4],
    pub target_class: ObjectClass,
}

impl Default for AnnotationRules {
    fn default() -> Self {
        Self { distance_threshold: 2.0, quantity_pivot: 5, orientation_edges: [45.0, 135.0, 225.0, 315.0], target_class: ObjectClass::Car }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Forward,
    Left,
    Backward,
    Right,
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Forward => "forward",
            Self::Left => "left",
            Self::Backward => "backward",
            Self::Right => "right",
        })
    }
}

/// Degrees in `[0, 360)`, snapped to 1e−9° so that edge values given in
/// radians land on the edge itself.
pub fn yaw_degrees(yaw: f64) -> f64 {
    let d = (yaw.to_degrees() * 1e9).round() / 1e9;
    d.rem_euclid(360.0)
}

pub fn orientation_bin_with(yaw: f64, edges: &[f64; 4]) -> Orientation {
    let d = yaw_degrees(yaw);
    if d >= edges[3] || d < edges[0] {
        Orientation::Forward
    } else if d < edges[1] {
        Orientation::Left
    } else if d < edges[2] {
        Orientation::Backward
    } else {
        Orientation::Right
    }
}

pub fn orientation_bin(yaw: f64) -> Orientation {
    orientation_bin_with(yaw, &AnnotationRules::default().orientation_edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Longitudinal {
    Ahead,
    Behind,
    Aligned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lateral {
    Left,
    Right,
    Center,
}

/// Position of `target` relative to `other` along x and y.
pub fn relation_text(target: &Box3D, other: &Box3D, rules: &AnnotationRules) -> (Longitudinal, Lateral) {
    let th = rules.distance_threshold;
    let cx = target.center[0] - other.center[0];
    let cy = target.center[1] - other.center[1];
    let p1 = if cx > th {
        Longitudinal::Ahead
    } else if cx < -th {
        Longitudinal::Behind
    } else {
        Longitudinal::Aligned
    };
    let p2 = if cy > th {
        Lateral::Left
    } else if cy < -th {
        Lateral::Right
    } else {
        Lateral::Center
    };
    (p1, p2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplatePart {
    Quantity,
    Location,
    Orientation,
    Weather,
    Time,
}

/// Parses a template such as `wea_loc` or `weather,quantity`. Parts are
/// separated by `,`, `+` or `_`; short aliases are accepted.
pub fn parse_template(spec: &str) -> Result<Vec<TemplatePart>> {
    let mut parts = Vec::new();
    for key in spec.split([',', '+', '_']).map(str::trim).filter(|k| !k.is_empty()) {
        let part = match key.to_ascii_lowercase().as_str() {
            "quantity" | "qty" | "num" => TemplatePart::Quantity,
            "location" | "loc" => TemplatePart::Location,
            "orientation" | "ori" => TemplatePart::Orientation,
            "weather" | "wea" => TemplatePart::Weather,
            "time" => TemplatePart::Time,
            other => return invalid(format!("unknown template key '{other}'")),
        };
        parts.push(part);
    }
    if parts.is_empty() {
        return invalid("empty template");
    }
    Ok(parts)
}

const NUMBER_WORDS: [&str; 11] = ["No", "One", "Two", "Three", "Four", "Five", "Six", "Seven", "Eight", "Nine", "Ten"];

fn count_word(n: usize) -> String {
    NUMBER_WORDS.get(n).map_or_else(|| n.to_string(), |w| (*w).to_owned())
}

pub fn quantity_clause(count: usize, rules: &AnnotationRules) -> String {
    let c = rules.target_class;
    match count {
        0 => format!("No {}.", c.noun()),
        1 => format!("One {}.", c.noun()),
        n if n <= rules.quantity_pivot => format!("{} {}.", count_word(n), c.plural()),
        _ => format!("More than {} {}.", count_word(rules.quantity_pivot).to_lowercase(), c.plural()),
    }
}

fn no_target(rules: &AnnotationRules) -> String {
    format!("No {}.", rules.target_class.noun())
}

/// One clause per non-target class present, in class order.
pub fn location_clauses(boxes: &[Box3D], rules: &AnnotationRules) -> Vec<String> {
    let t = rules.target_class;
    if !boxes.iter().any(|b| b.class == t) {
        return vec![no_target(rules)];
    }
    ObjectClass::ALL
        .iter()
        .filter(|c| **c != t && boxes.iter().any(|b| b.class == **c))
        .map(|c| format!("One {} is around one {}.", t.noun(), c.noun()))
        .collect()
}

/// One clause per distinct orientation among target boxes.
pub fn orientation_clauses(boxes: &[Box3D], rules: &AnnotationRules) -> Vec<String> {
    let t = rules.target_class;
    let mut bins: Vec<Orientation> = boxes.iter().filter(|b| b.class == t).map(|b| orientation_bin_with(b.yaw, &rules.orientation_edges)).collect();
    if bins.is_empty() {
        return vec![no_target(rules)];
    }
    bins.sort();
    bins.dedup();
    bins.iter().map(|o| format!("One {} is facing {o}.", t.noun())).collect()
}

pub fn weather_clause(meta: &SceneMeta) -> &'static str {
    match meta.weather {
        Weather::Sunny => "Sunny.",
        Weather::Rainy => "Rainy.",
    }
}

pub fn time_clause(meta: &SceneMeta) -> &'static str {
    match meta.time {
        TimeOfDay::Day => "Day.",
        TimeOfDay::Night => "Night.",
    }
}

/// Text of one template part (possibly several clauses joined by spaces,
/// or empty).
pub fn part_text(part: TemplatePart, boxes: &[Box3D], meta: &SceneMeta, rules: &AnnotationRules) -> String {
    match part {
        TemplatePart::Quantity => quantity_clause(boxes.iter().filter(|b| b.class == rules.target_class).count(), rules),
        TemplatePart::Location => location_clauses(boxes, rules).join(" "),
        TemplatePart::Orientation => orientation_clauses(boxes, rules).join(" "),
        TemplatePart::Weather => weather_clause(meta).to_owned(),
        TemplatePart::Time => time_clause(meta).to_owned(),
    }
}

/// Caption for a scene: template parts in order, joined by single spaces.
/// A clause already emitted by an earlier part is not repeated.
pub fn annotate_scene(boxes: &[Box3D], meta: &SceneMeta, rules: &AnnotationRules, template: &[TemplatePart]) -> Result<String> {
    if template.is_empty() {
        return invalid("empty template");
    }
    let mut clauses: Vec<String> = Vec::new();
    for part in template {
        for clause in split_clauses(&part_text(*part, boxes, meta, rules)) {
            if !clauses.contains(&clause) {
                clauses.push(clause);
            }
        }
    }
    Ok(clauses.join(" "))
}

/// Splits a caption into its sentences, each keeping its final period.
pub fn split_clauses(text: &str) -> Vec<String> {
    text.split_inclusive('.').map(str::trim).filter(|s| !s.is_empty()).map(str::to_owned).collect()
}

/// Input record of the annotation tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInput {
    #[serde(default)]
    pub id: Option<String>,
    pub boxes: Vec<Box3D>,
    pub weather: Weather,
    pub time: TimeOfDay,
}

/// Output record: the composed prompt and every part on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub prompt: String,
    pub parts: std::collections::BTreeMap<String, String>,
}

pub fn annotate_record(input: &SceneInput, index: usize, rules: &AnnotationRules, template: &[TemplatePart]) -> Result<AnnotationRecord> {
    let meta = SceneMeta { weather: input.weather, time: input.time };
    let prompt = annotate_scene(&input.boxes, &meta, rules, template)?;
    let parts = [
        ("quantity", TemplatePart::Quantity),
        ("location", TemplatePart::Location),
        ("orientation", TemplatePart::Orientation),
        ("weather", TemplatePart::Weather),
        ("time", TemplatePart::Time),
    ]
    .into_iter()
    .map(|(k, p)| (k.to_owned(), part_text(p, &input.boxes, &meta, rules)))
    .collect();
    Ok(AnnotationRecord { id: input.id.clone().unwrap_or_else(|| format!("{index:06}")), prompt, parts })
}
