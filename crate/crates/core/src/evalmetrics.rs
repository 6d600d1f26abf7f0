//! Generation metrics over bird's-eye-view histograms, point-set distances
//! for upsampling, a clustering detector and the text-to-box match rate.

use std::collections::{BTreeMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::{orientation_bin_with, split_clauses, AnnotationRules, ObjectClass, Orientation};
use crate::error::{invalid, Error, Result};
use crate::rangemap::PointCloud;

/// `G × G` occupancy over `[−R, R]²`, normalised to sum to 1 unless empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevHistogram {
    pub grid: usize,
    pub range: f64,
    /// Row-major by x bin, then y bin.
    pub probs: Vec<f64>,
    /// Points that fell inside the square.
    pub count: usize,
}

impl BevHistogram {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

fn bev_bin(v: f64, grid: usize, range: f64) -> Option<usize> {
    if !(v.abs() <= range) {
        return None;
    }
    Some((((v + range) / (2.0 * range) * grid as f64).floor() as usize).min(grid - 1))
}

pub fn bev_histogram(cloud: &PointCloud, grid: usize, range: f64) -> Result<BevHistogram> {
    if grid < 2 || !(range > 0.0) {
        return invalid(format!("BEV grid needs G >= 2 and R > 0, got {grid}, {range}"));
    }
    let mut counts = vec![0.0; grid * grid];
    let mut count = 0;
    for p in &cloud.points {
        if let (Some(i), Some(j)) = (bev_bin(p.x, grid, range), bev_bin(p.y, grid, range)) {
            counts[i * grid + j] += 1.0;
            count += 1;
        }
    }
    if count > 0 {
        counts.iter_mut().for_each(|c| *c /= count as f64);
    }
    Ok(BevHistogram { grid, range, probs: counts, count })
}

/// Pools several clouds into one histogram.
pub fn pooled_histogram(clouds: &[PointCloud], grid: usize, range: f64) -> Result<BevHistogram> {
    if grid < 2 || !(range > 0.0) {
        return invalid(format!("BEV grid needs G >= 2 and R > 0, got {grid}, {range}"));
    }
    let mut acc = vec![0.0; grid * grid];
    let mut total = 0;
    for c in clouds {
        let h = bev_histogram(c, grid, range)?;
        for (a, p) in acc.iter_mut().zip(&h.probs) {
            *a += p * h.count as f64;
        }
        total += h.count;
    }
    if total > 0 {
        acc.iter_mut().for_each(|a| *a /= total as f64);
    }
    Ok(BevHistogram { grid, range, probs: acc, count: total })
}

/// Jensen–Shannon divergence in bits.
pub fn jsd(p: &BevHistogram, q: &BevHistogram) -> Result<f64> {
    jsd_slices(&p.probs, &q.probs)
}

pub fn jsd_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return invalid(format!("histograms of {} and {} bins", p.len(), q.len()));
    }
    let kl = |a: f64, m: f64| if a > 0.0 { a * (a / m).log2() } else { 0.0 };
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        total += 0.5 * kl(a, m) + 0.5 * kl(b, m);
    }
    Ok(total.max(0.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of the nonzero pairwise distances, or 1 when there are none.
pub fn median_bandwidth(items: &[&[f64]]) -> f64 {
    let mut d = Vec::new();
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let v = sq_dist(items[i], items[j]).sqrt();
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Biased squared MMD with a Gaussian kernel. `bandwidth = None` uses the
/// median pairwise distance over both lists.
pub fn mmd(a: &[&[f64]], b: &[&[f64]], bandwidth: Option<f64>) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return invalid("MMD needs two nonempty lists");
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != dim) {
        return invalid("MMD inputs differ in length");
    }
    let bw = match bandwidth {
        Some(s) if s > 0.0 => s,
        Some(s) => return invalid(format!("bandwidth must be positive, got {s}")),
        None => {
            let all: Vec<&[f64]> = a.iter().chain(b).copied().collect();
            median_bandwidth(&all)
        }
    };
    let k = |x: &[f64], y: &[f64]| (-sq_dist(x, y) / (2.0 * bw * bw)).exp();
    let mean_k = |xs: &[&[f64]], ys: &[&[f64]]| {
        let s: f64 = xs.iter().map(|x| ys.iter().map(|y| k(x, y)).sum::<f64>()).sum();
        s / (xs.len() * ys.len()) as f64
    };
    Ok((mean_k(a, a) + mean_k(b, b) - 2.0 * mean_k(a, b)).max(0.0))
}

pub fn mmd_histograms(a: &[BevHistogram], b: &[BevHistogram], bandwidth: Option<f64>) -> Result<f64> {
    let a: Vec<&[f64]> = a.iter().map(|h| h.probs.as_slice()).collect();
    let b: Vec<&[f64]> = b.iter().map(|h| h.probs.as_slice()).collect();
    mmd(&a, &b, bandwidth)
}

/// Unscaled upsampling distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpsampleMetrics {
    pub cd: f64,
    pub mse: f64,
    pub emd: f64,
}

fn nearest_sq(p: &[f64; 3], set: &[[f64; 3]]) -> f64 {
    set.iter().map(|q| sq_dist(p, q)).fold(f64::INFINITY, f64::min)
}

/// Symmetric Chamfer distance with squared norms.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let ab: f64 = a.par_iter().map(|p| nearest_sq(p, b)).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.par_iter().map(|p| nearest_sq(p, a)).sum::<f64>() / b.len() as f64;
    ab + ba
}

/// Mean squared distance from each predicted point to its nearest target.
pub fn nearest_mse(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    pred.par_iter().map(|p| nearest_sq(p, gt)).sum::<f64>() / pred.len() as f64
}

/// Minimum-cost perfect matching of a square cost matrix (Hungarian
/// method with potentials). Returns the column of each row.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Auction algorithm with ε-scaling; the matching cost is within `n·eps`
/// of optimal.
pub fn auction_assignment(cost: &[f64], n: usize, eps_final: f64) -> Vec<usize> {
    let max_c = cost.iter().copied().fold(0.0, f64::max);
    let mut prices = vec![0.0; n];
    let mut eps = (max_c / 4.0).max(eps_final);
    loop {
        let mut owner: Vec<Option<usize>> = vec![None; n];
        let mut assigned: Vec<Option<usize>> = vec![None; n];
        let mut queue: VecDeque<usize> = (0..n).collect();
        while let Some(i) = queue.pop_front() {
            let row = &cost[i * n..(i + 1) * n];
            let (mut best, mut second, mut bj) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
            for j in 0..n {
                let val = -row[j] - prices[j];
                if val > best {
                    second = best;
                    best = val;
                    bj = j;
                } else if val > second {
                    second = val;
                }
            }
            let incr = if second.is_finite() { best - second + eps } else { eps };
            prices[bj] += incr;
            if let Some(prev) = owner[bj] {
                assigned[prev] = None;
                queue.push_back(prev);
            }
            owner[bj] = Some(i);
            assigned[i] = Some(bj);
        }
        if eps <= eps_final {
            return assigned.into_iter().map(|a| a.expect("auction assigns every row")).collect();
        }
        eps = (eps / 5.0).max(eps_final);
    }
}

/// Evenly strided subset of at most `max` points.
fn stride_subsample(points: &[[f64; 3]], max: usize) -> Vec<[f64; 3]> {
    if points.len() <= max {
        return points.to_vec();
    }
    (0..max).map(|k| points[k * points.len() / max]).collect()
}

/// Largest point count solved exactly by the Hungarian method.
pub const EXACT_EMD_LIMIT: usize = 256;
/// Point count both sides are subsampled to before matching.
pub const EMD_MAX_POINTS: usize = 2048;

/// Mean matched distance between equal-size subsamples of both clouds.
/// Exact up to [`EXACT_EMD_LIMIT`] points, auction-approximate above.
pub fn earth_movers(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let m = a.len().min(b.len()).min(EMD_MAX_POINTS);
    let (a, b) = (stride_subsample(a, m), stride_subsample(b, m));
    let cost: Vec<f64> = a.iter().flat_map(|p| b.iter().map(move |q| sq_dist(p, q).sqrt())).collect();
    let assign = if m <= EXACT_EMD_LIMIT { min_cost_assignment(&cost, m) } else { auction_assignment(&cost, m, 1e-5) };
    assign.iter().enumerate().map(|(i, j)| cost[i * m + j]).sum::<f64>() / m as f64
}

/// Distances on coordinates used as given.
pub fn point_metrics(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<UpsampleMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return invalid("upsampling metrics need two nonempty clouds");
    }
    Ok(UpsampleMetrics { cd: chamfer(pred, gt), mse: nearest_mse(pred, gt), emd: earth_movers(pred, gt) })
}

/// Min–max normalises both clouds jointly, per axis, into `[0, 1]³`
/// (a flat axis maps to 0), then measures.
pub fn upsample_metrics(pred: &PointCloud, gt: &PointCloud) -> Result<UpsampleMetrics> {
    let coords = |c: &PointCloud| c.points.iter().map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>();
    let (mut a, mut b) = (coords(pred), coords(gt));
    for k in 0..3 {
        let lo = a.iter().chain(&b).map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = a.iter().chain(&b).map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for p in a.iter_mut().chain(b.iter_mut()) {
            p[k] = if span > 0.0 { (p[k] - lo) / span } else { 0.0 };
        }
    }
    point_metrics(&a, &b)
}

/// An object found by [`detect_objects`]. `class` is `Some(Car)` for
/// car-sized clusters and `None` for anything else; boxes converted from
/// annotations carry their real class and yaw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub center: [f64; 2],
    /// Length then width, meters.
    pub extent: [f64; 2],
    pub points: usize,
    pub class: Option<ObjectClass>,
    pub yaw: Option<f64>,
}

impl Detection {
    pub fn from_box(b: &crate::annotate::Box3D) -> Self {
        Self { center: [b.center[0], b.center[1]], extent: [b.size[0], b.size[1]], points: 0, class: Some(b.class), yaw: Some(b.yaw) }
    }

    pub fn is_car(&self) -> bool {
        self.class == Some(ObjectClass::Car)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Points this close to the ground plane are removed, meters.
    pub ground_margin: f64,
    pub cell: f64,
    pub car_length: (f64, f64),
    pub car_width: (f64, f64),
    pub min_car_points: usize,
    /// Smaller clusters are treated as noise.
    pub min_cluster_points: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { ground_margin: 0.3, cell: 0.5, car_length: (2.5, 6.0), car_width: (1.2, 2.5), min_car_points: 10, min_cluster_points: 3 }
    }
}

/// Least-squares plane `z = a x + b y + c` through the lowest points,
/// refined three times on inliers within 0.5 m.
pub fn fit_ground(points: &[[f64; 3]]) -> [f64; 3] {
    if points.is_empty() {
        return [0.0; 3];
    }
    let mut zs: Vec<f64> = points.iter().map(|p| p[2]).collect();
    zs.sort_by(f64::total_cmp);
    let mut plane = [0.0, 0.0, zs[zs.len() / 10]];
    for _ in 0..3 {
        let inliers: Vec<&[f64; 3]> = points.iter().filter(|p| (p[2] - (plane[0] * p[0] + plane[1] * p[1] + plane[2])).abs() < 0.5).collect();
        if inliers.len() < 3 {
            break;
        }
        let mut m = [[0.0; 3]; 3];
        let mut r = [0.0; 3];
        for p in &inliers {
            let row = [p[0], p[1], 1.0];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += row[i] * row[j];
                }
                r[i] += row[i] * p[2];
            }
        }
        match solve3(m, r) {
            Some(s) => plane = s,
            None => {
                plane = [0.0, 0.0, inliers.iter().map(|p| p[2]).sum::<f64>() / inliers.len() as f64];
                break;
            }
        }
    }
    plane
}

fn solve3(m: [[f64; 3]; 3], r: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&m);
    let scale = m.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
    if d.abs() <= 1e-12 * scale.powi(3).max(1e-300) {
        return None;
    }
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut mk = m;
        for i in 0..3 {
            mk[i][k] = r[i];
        }
        *o = det(&mk) / d;
    }
    Some(out)
}

/// Ground removal, 8-connected clustering on an x–y grid and
/// axis-aligned footprints.
pub fn detect_objects_with(cloud: &PointCloud, cfg: &DetectorConfig) -> Vec<Detection> {
    let pts: Vec<[f64; 3]> = cloud.points.iter().map(|p| [p.x, p.y, p.z]).collect();
    if pts.is_empty() {
        return Vec::new();
    }
    let g = fit_ground(&pts);
    let above: Vec<&[f64; 3]> = pts.iter().filter(|p| p[2] - (g[0] * p[0] + g[1] * p[1] + g[2]) > cfg.ground_margin).collect();
    let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in above.iter().enumerate() {
        let key = ((p[0] / cfg.cell).floor() as i64, (p[1] / cfg.cell).floor() as i64);
        cells.entry(key).or_default().push(i);
    }
    let mut seen: BTreeMap<(i64, i64), bool> = cells.keys().map(|k| (*k, false)).collect();
    let mut out = Vec::new();
    let keys: Vec<(i64, i64)> = cells.keys().copied().collect();
    for start in keys {
        if seen[&start] {
            continue;
        }
        seen.insert(start, true);
        let mut queue = VecDeque::from([start]);
        let mut members = Vec::new();
        while let Some(c) = queue.pop_front() {
            members.extend_from_slice(&cells[&c]);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let n = (c.0 + dx, c.1 + dy);
                    if let Some(s) = seen.get_mut(&n) {
                        if !*s {
                            *s = true;
                            queue.push_back(n);
                        }
                    }
                }
            }
        }
        if members.len() < cfg.min_cluster_points {
            continue;
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for &i in &members {
            for k in 0..2 {
                lo[k] = lo[k].min(above[i][k]);
                hi[k] = hi[k].max(above[i][k]);
            }
        }
        let (dx, dy) = ((hi[0] - lo[0]).max(cfg.cell), (hi[1] - lo[1]).max(cfg.cell));
        let (l, w) = (dx.max(dy), dx.min(dy));
        let car = l >= cfg.car_length.0 && l <= cfg.car_length.1 && w >= cfg.car_width.0 && w <= cfg.car_width.1 && members.len() >= cfg.min_car_points;
        out.push(Detection {
            center: [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])],
            extent: [l, w],
            points: members.len(),
            class: car.then_some(ObjectClass::Car),
            yaw: None,
        });
    }
    out
}

pub fn detect_objects(cloud: &PointCloud) -> Vec<Detection> {
    detect_objects_with(cloud, &DetectorConfig::default())
}

/// Object-level requirement read back from a caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clause {
    Count(usize),
    MoreThan(usize),
    CoOccurs(ObjectClass),
    Facing(Orientation),
}

fn number_of(word: &str) -> Option<usize> {
    const WORDS: [&str; 11] = ["no", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];
    WORDS.iter().position(|w| *w == word).or_else(|| word.parse().ok())
}

/// Object clauses of a caption; scene words are ignored.
pub fn parse_clauses(prompt: &str, rules: &AnnotationRules) -> Vec<Clause> {
    let t = rules.target_class;
    let (one, many) = (t.noun().to_owned(), t.plural());
    let mut out = Vec::new();
    for sentence in split_clauses(prompt) {
        let s = sentence.trim_end_matches('.').to_lowercase();
        if let Some(rest) = s.strip_prefix(&format!("one {one} is around one ")) {
            if let Some(c) = ObjectClass::ALL.iter().find(|c| c.noun() == rest) {
                out.push(Clause::CoOccurs(*c));
            }
        } else if let Some(rest) = s.strip_prefix(&format!("one {one} is facing ")) {
            let o = match rest {
                "forward" => Some(Orientation::Forward),
                "left" => Some(Orientation::Left),
                "backward" => Some(Orientation::Backward),
                "right" => Some(Orientation::Right),
                _ => None,
            };
            out.extend(o.map(Clause::Facing));
        } else if let Some(rest) = s.strip_prefix("more than ") {
            if let Some((n, noun)) = rest.split_once(' ') {
                if noun == many {
                    out.extend(number_of(n).map(Clause::MoreThan));
                }
            }
        } else if let Some((n, noun)) = s.split_once(' ') {
            if noun == one || noun == many {
                out.extend(number_of(n).map(Clause::Count));
            }
        }
    }
    out
}

/// Whether `detections` satisfy every clause. Facing clauses are checked
/// only when some target detection carries a yaw.
pub fn scene_matches(clauses: &[Clause], detections: &[Detection], rules: &AnnotationRules) -> bool {
    let t = rules.target_class;
    let targets: Vec<&Detection> = detections.iter().filter(|d| d.class == Some(t)).collect();
    let others: Vec<&Detection> = detections.iter().filter(|d| d.class != Some(t)).collect();
    clauses.iter().all(|c| match *c {
        Clause::Count(n) => targets.len() == n,
        Clause::MoreThan(n) => targets.len() > n,
        Clause::CoOccurs(class) => !targets.is_empty() && others.iter().any(|d| d.class.is_none() || d.class == Some(class)),
        Clause::Facing(o) => {
            let yaws: Vec<f64> = targets.iter().filter_map(|d| d.yaw).collect();
            yaws.is_empty() || yaws.iter().any(|y| orientation_bin_with(*y, &rules.orientation_edges) == o)
        }
    })
}

/// Percentage of scenes whose detections satisfy their prompt.
pub fn tbr(prompts: &[String], detections: &[Vec<Detection>], rules: &AnnotationRules) -> Result<f64> {
    if prompts.len() != detections.len() {
        return Err(Error::InvalidArgument(format!("{} prompts for {} scenes", prompts.len(), detections.len())));
    }
    if prompts.is_empty() {
        return invalid("no scenes to score");
    }
    let matched = prompts.iter().zip(detections).filter(|(p, d)| scene_matches(&parse_clauses(p, rules), d, rules)).count();
    Ok(100.0 * matched as f64 / prompts.len() as f64)
}

/// Evaluation summary written by the command-line tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub jsd: f64,
    pub mmd_e4: f64,
    pub cd_e5: Option<f64>,
    pub mse_e5: Option<f64>,
    pub emd_e3: Option<f64>,
    pub tbr_pct: Option<f64>,
    pub n_generated: usize,
    pub n_reference: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub grid: usize,
    pub range: f64,
    pub bandwidth: Option<f64>,
    /// Score the upsampling distances on clouds paired by position.
    pub paired: bool,
    /// Rules that read the generated prompts for the matching rate.
    pub rules: AnnotationRules,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { grid: 100, range: 50.0, bandwidth: None, paired: true, rules: AnnotationRules::default() }
    }
}

/// Distribution metrics between two sets, upsampling distances when both
/// sets have equal length and `paired` is set, and TBR when prompts for
/// the generated set are given.
pub fn evaluate(generated: &[PointCloud], reference: &[PointCloud], prompts: Option<&[String]>, cfg: &EvalConfig) -> Result<EvalReport> {
    if generated.is_empty() || reference.is_empty() {
        return invalid("evaluation needs nonempty generated and reference sets");
    }
    let jsd_v = jsd(&pooled_histogram(generated, cfg.grid, cfg.range)?, &pooled_histogram(reference, cfg.grid, cfg.range)?)?;
    let hist = |set: &[PointCloud]| set.iter().map(|c| bev_histogram(c, cfg.grid, cfg.range)).collect::<Result<Vec<_>>>();
    let mmd_v = mmd_histograms(&hist(generated)?, &hist(reference)?, cfg.bandwidth)?;
    let pairs: Option<Vec<UpsampleMetrics>> = if cfg.paired && generated.len() == reference.len() {
        generated
            .iter()
            .zip(reference)
            .filter(|(g, r)| !g.is_empty() && !r.is_empty())
            .map(|(g, r)| upsample_metrics(g, r))
            .collect::<Result<Vec<_>>>()
            .ok()
            .filter(|v| !v.is_empty())
    } else {
        None
    };
    let mean = |f: fn(&UpsampleMetrics) -> f64| pairs.as_ref().map(|v| v.iter().map(f).sum::<f64>() / v.len() as f64);
    let tbr_pct = match prompts {
        Some(p) => {
            let dets: Vec<Vec<Detection>> = generated.par_iter().map(detect_objects).collect();
            Some(tbr(p, &dets, &cfg.rules)?)
        }
        None => None,
    };
    Ok(EvalReport {
        jsd: jsd_v,
        mmd_e4: mmd_v * 1e4,
        cd_e5: mean(|m| m.cd).map(|v| v * 1e5),
        mse_e5: mean(|m| m.mse).map(|v| v * 1e5),
        emd_e3: mean(|m| m.emd).map(|v| v * 1e3),
        tbr_pct,
        n_generated: generated.len(),
        n_reference: reference.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rangemap::Point;

    fn cloud(pts: &[(f64, f64)]) -> PointCloud {
        PointCloud::new(pts.iter().map(|(x, y)| Point::new(*x, *y, 0.0, 0.0)).collect())
    }

    #[test]
    fn histogram_center_and_shift() {
        let h = bev_histogram(&cloud(&[(0.0, 0.0)]), 4, 2.0).unwrap();
        assert_eq!(h.probs[2 * 4 + 2], 1.0);
        let a = bev_histogram(&cloud(&[(0.3, -0.7)]), 10, 5.0).unwrap();
        let b = bev_histogram(&cloud(&[(1.3, -0.7)]), 10, 5.0).unwrap();
        let ia = a.probs.iter().position(|p| *p == 1.0).unwrap();
        let ib = b.probs.iter().position(|p| *p == 1.0).unwrap();
        assert_eq!(ib, ia + 10);
        let empty = bev_histogram(&PointCloud::default(), 4, 2.0).unwrap();
        assert!(empty.is_empty() && empty.probs.iter().all(|p| *p == 0.0));
        assert!(bev_histogram(&PointCloud::default(), 1, 2.0).is_err());
    }

    #[test]
    fn jsd_examples() {
        let p = [1.0, 0.0];
        let q = [0.5, 0.5];
        let expected = 0.5 * (4.0f64 / 3.0).log2() + 0.5 * (0.5 * (2.0f64 / 3.0).log2() + 0.5);
        assert!((jsd_slices(&p, &q).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.3113).abs() < 1e-4);
        assert_eq!(jsd_slices(&p, &p).unwrap(), 0.0);
        assert!((jsd_slices(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(jsd_slices(&p, &[1.0]).is_err());
    }

    #[test]
    fn mmd_singletons() {
        let p = [0.2, 0.8];
        let q = [0.6, 0.4];
        let bw: f64 = 0.5;
        let k = (-(0.16 + 0.16) / (2.0 * bw * bw)).exp();
        let v = mmd(&[&p], &[&q], Some(bw)).unwrap();
        assert!((v - (2.0 - 2.0 * k)).abs() < 1e-12);
        assert!(mmd(&[&p, &q], &[&p, &q], None).unwrap().abs() < 1e-12);
    }

    #[test]
    fn singleton_point_metrics() {
        let d = 0.37;
        let m = point_metrics(&[[0.1, 0.2, 0.3]], &[[0.1 + d, 0.2, 0.3]]).unwrap();
        assert!((m.cd - 2.0 * d * d).abs() < 1e-9);
        assert!((m.mse - d * d).abs() < 1e-9);
        assert!((m.emd - d).abs() < 1e-9);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let a = min_cost_assignment(&cost, 3);
        let total: f64 = a.iter().enumerate().map(|(i, j)| cost[i * 3 + j]).sum();
        assert_eq!(total, 5.0);
        let b = auction_assignment(&cost, 3, 1e-6);
        let total_b: f64 = b.iter().enumerate().map(|(i, j)| cost[i * 3 + j]).sum();
        assert!((total_b - 5.0).abs() < 3e-6);
    }

    #[test]
    fn tbr_worked_example() {
        let rules = AnnotationRules::default();
        let prompts: Vec<String> = ["Two cars.", "One car.", "Five cars."].iter().map(|s| s.to_string()).collect();
        let car = Detection { center: [0.0; 2], extent: [4.0, 1.8], points: 20, class: Some(ObjectClass::Car), yaw: None };
        let dets = vec![vec![car], vec![car; 3], vec![car; 5]];
        assert!((tbr(&prompts, &dets, &rules).unwrap() - 100.0 / 3.0).abs() < 1e-9);
        assert!(tbr(&prompts, &dets[..2], &rules).is_err());
    }

    #[test]
    fn clause_parsing() {
        let rules = AnnotationRules::default();
        assert_eq!(
            parse_clauses("Rainy. One car is around one traffic cone. More than five cars. No car. One car is facing left.", &rules),
            vec![Clause::CoOccurs(ObjectClass::TrafficCone), Clause::MoreThan(5), Clause::Count(0), Clause::Facing(Orientation::Left)]
        );
    }
}
