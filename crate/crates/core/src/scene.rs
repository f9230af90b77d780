//! Scene model, masked goal conditioning, a synthetic scene generator and
//! the line-delimited dataset format.
//!
//! Every element (road polyline, agent history, the ego history, or the goal
//! built from a masked future) is a small set of point tokens plus a shared
//! context vector. Coordinates are meters in an ego-centric frame: the ego's
//! current observed position is the origin and its heading is `+x`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{MaskBits, Matrix, Vector};

/// Width of per-point token features.
pub const D_IN: usize = 8;
/// Width of the per-element context vector.
pub const D_CTX: usize = 8;

pub const DATASET_FORMAT: &str = "mnm-scenes";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Road,
    Agent,
    Ego,
    Goal,
}

impl ElementKind {
    pub const ALL: [ElementKind; 4] = [
        ElementKind::Road,
        ElementKind::Agent,
        ElementKind::Ego,
        ElementKind::Goal,
    ];

    pub fn index(self) -> usize {
        match self {
            ElementKind::Road => 0,
            ElementKind::Agent => 1,
            ElementKind::Ego => 2,
            ElementKind::Goal => 3,
        }
    }
}

/// Context slot layout: kind one-hot in `0..4`, then road type.
const CTX_LANE: usize = 4;
const CTX_CROSSING: usize = 5;
const CTX_CURVATURE: usize = 6;

fn kind_tag(kind: ElementKind, d_ctx: usize) -> Vector {
    let mut v = Vector::zeros(d_ctx);
    v.0[kind.index()] = 1.0;
    v
}

/// One polyline or trajectory history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneElement {
    pub kind: ElementKind,
    /// `P x d_in` point features; columns 0 and 1 are x, y in meters.
    pub tokens: Matrix,
    pub mask: MaskBits,
    pub context: Vector,
}

impl SceneElement {
    pub fn validate(&self) -> Result<()> {
        if self.mask.dim() != self.tokens.rows() {
            return Err(Error::dims(
                "scene element mask",
                self.tokens.shape(),
                (self.mask.dim(), 1),
            ));
        }
        if !self.tokens.is_finite() || self.context.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericInstability("scene element holds non-finite values".into()));
        }
        Ok(())
    }

    pub fn has_valid_token(&self) -> bool {
        self.mask.any()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub ego: SceneElement,
    pub agents: Vec<SceneElement>,
    pub roads: Vec<SceneElement>,
    /// `T x 2` ground-truth ego positions.
    pub future: Matrix,
    pub future_mask: MaskBits,
}

impl Scene {
    pub fn horizon(&self) -> usize {
        self.future.rows()
    }

    pub fn validate(&self) -> Result<()> {
        self.ego.validate()?;
        if !self.ego.has_valid_token() {
            return Err(Error::EmptySet("ego history has no valid point".into()));
        }
        for e in self.agents.iter().chain(&self.roads) {
            e.validate()?;
        }
        if self.future.cols() != 2 || self.future_mask.dim() != self.future.rows() {
            return Err(Error::dims(
                "scene future",
                self.future.shape(),
                (self.future_mask.dim(), 2),
            ));
        }
        Ok(())
    }

    /// Observed ego history positions (valid points only), oldest first.
    pub fn ego_history(&self) -> Vec<[f64; 2]> {
        self.ego
            .mask
            .valid_indices()
            .map(|i| [self.ego.tokens.get(i, 0), self.ego.tokens.get(i, 1)])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalPlacement {
    AgentsSet,
    RoadsSet,
}

/// A masked copy of the target trajectory fed back as an input element.
#[derive(Clone, Debug, PartialEq)]
pub struct GoalConditioning {
    /// `T x 2`, zero at masked steps.
    pub masked_future: Matrix,
    /// `true` = visible. At most one bit is set.
    pub step_mask: MaskBits,
    pub placement: GoalPlacement,
    /// The visible step, removed from the regression loss.
    pub exclusion_index: Option<usize>,
}

impl GoalConditioning {
    /// Everything hidden: the plain prediction task.
    pub fn fully_masked(horizon: usize, placement: GoalPlacement) -> Self {
        Self {
            masked_future: Matrix::zeros(horizon, 2),
            step_mask: MaskBits::all_invalid(horizon),
            placement,
            exclusion_index: None,
        }
    }

    /// Only step `t` visible.
    pub fn reveal_step(future: &Matrix, t: usize, placement: GoalPlacement) -> Self {
        let mut gc = Self::fully_masked(future.rows(), placement);
        gc.masked_future.set(t, 0, future.get(t, 0));
        gc.masked_future.set(t, 1, future.get(t, 1));
        gc.step_mask.0[t] = true;
        gc.exclusion_index = Some(t);
        gc
    }
}

/// Masks the future trajectory for goal conditioning.
///
/// Each step is independently left visible with probability
/// `1 - mask_ratio` (steps invalid in `future_mask` never are); if several
/// survive, one is kept uniformly at random. The placement is a fair coin.
/// The random stream is consumed identically for every `mask_ratio`.
pub fn apply_goal_masking<R: Rng + ?Sized>(
    future: &Matrix,
    future_mask: &MaskBits,
    rng: &mut R,
    mask_ratio: f64,
) -> Result<GoalConditioning> {
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(Error::Config(format!("mask_ratio {mask_ratio} outside [0, 1]")));
    }
    let t = future.rows();
    let survivors: Vec<usize> = (0..t)
        .filter(|&i| {
            let u: f64 = rng.random();
            u >= mask_ratio && future_mask.is_valid(i)
        })
        .collect();
    let pick: f64 = rng.random();
    let coin: bool = rng.random();
    let placement = if coin {
        GoalPlacement::AgentsSet
    } else {
        GoalPlacement::RoadsSet
    };
    if survivors.is_empty() {
        return Ok(GoalConditioning::fully_masked(t, placement));
    }
    let idx = ((pick * survivors.len() as f64) as usize).min(survivors.len() - 1);
    Ok(GoalConditioning::reveal_step(future, survivors[idx], placement))
}

/// Goal token layout: `(x, y, visible, t / T)`, zero padded to `d_in`.
pub fn encode_goal_element(gc: &GoalConditioning, d_in: usize, d_ctx: usize) -> Result<SceneElement> {
    if d_in < 4 || d_ctx < 4 {
        return Err(Error::Config(format!(
            "goal encoding needs d_in >= 4 and d_ctx >= 4, got {d_in} and {d_ctx}"
        )));
    }
    let t = gc.masked_future.rows();
    let mut tokens = Matrix::zeros(t, d_in);
    for i in 0..t {
        let row = tokens.row_mut(i);
        if gc.step_mask.is_valid(i) {
            row[0] = gc.masked_future.get(i, 0);
            row[1] = gc.masked_future.get(i, 1);
            row[2] = 1.0;
        }
        row[3] = i as f64 / t as f64;
    }
    Ok(SceneElement {
        kind: ElementKind::Goal,
        tokens,
        mask: MaskBits::all_valid(t),
        context: kind_tag(ElementKind::Goal, d_ctx),
    })
}

/// Visible `(step, [x, y])` pairs read back from a goal element.
pub fn decode_goal_element(e: &SceneElement) -> Vec<(usize, [f64; 2])> {
    (0..e.tokens.rows())
        .filter(|&i| e.tokens.get(i, 2) == 1.0)
        .map(|i| (i, [e.tokens.get(i, 0), e.tokens.get(i, 1)]))
        .collect()
}

/// Synthetic scene generator settings. Ranges are inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub num_scenes: usize,
    pub roads_min: usize,
    pub roads_max: usize,
    pub agents_min: usize,
    pub agents_max: usize,
    pub points_per_polyline: usize,
    pub history_steps: usize,
    pub horizon: usize,
    /// Seconds between steps.
    pub dt: f64,
    /// m/s
    pub speed_min: f64,
    pub speed_max: f64,
    /// Jitter standard deviation in meters; each jitter is clipped to `2·noise`.
    pub noise: f64,
    /// 1/m
    pub max_curvature: f64,
    /// Probability that a road polyline is truncated or an agent history
    /// starts late.
    pub partial_prob: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_scenes: 256,
            roads_min: 3,
            roads_max: 6,
            agents_min: 0,
            agents_max: 4,
            points_per_polyline: 20,
            history_steps: 10,
            horizon: 16,
            dt: 0.5,
            speed_min: 2.0,
            speed_max: 12.0,
            noise: 0.2,
            max_curvature: 0.01,
            partial_prob: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.roads_min == 0 || self.roads_min > self.roads_max {
            return bad("data.roads_min must be >= 1 and <= data.roads_max");
        }
        if self.agents_min > self.agents_max {
            return bad("data.agents_min must be <= data.agents_max");
        }
        if self.points_per_polyline < 2 {
            return bad("data.points_per_polyline must be >= 2");
        }
        if self.history_steps < 2 {
            return bad("data.history_steps must be >= 2");
        }
        if self.horizon == 0 {
            return bad("data.horizon must be >= 1");
        }
        if !(self.dt > 0.0) {
            return bad("data.dt must be positive");
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max) {
            return bad("data.speed_min must be in [0, data.speed_max]");
        }
        if !(self.noise >= 0.0) || !(self.max_curvature >= 0.0) {
            return bad("data.noise and data.max_curvature must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.partial_prob) {
            return bad("data.partial_prob must be in [0, 1]");
        }
        Ok(())
    }
}

/// Constant-curvature path: start point, heading, curvature.
#[derive(Clone, Copy, Debug)]
struct Arc {
    x0: f64,
    y0: f64,
    heading: f64,
    curvature: f64,
}

impl Arc {
    fn point(&self, s: f64) -> [f64; 2] {
        if self.curvature == 0.0 {
            [
                self.x0 + s * self.heading.cos(),
                self.y0 + s * self.heading.sin(),
            ]
        } else {
            let k = self.curvature;
            let th = self.heading + k * s;
            [
                self.x0 + (th.sin() - self.heading.sin()) / k,
                self.y0 - (th.cos() - self.heading.cos()) / k,
            ]
        }
    }

    fn tangent(&self, s: f64) -> [f64; 2] {
        let th = self.heading + self.curvature * s;
        [th.cos(), th.sin()]
    }
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> [f64; 2] {
    let dx: f64 = StandardNormal.sample(rng);
    let dy: f64 = StandardNormal.sample(rng);
    let (mut dx, mut dy) = (dx * sigma, dy * sigma);
    let norm = (dx * dx + dy * dy).sqrt();
    let cap = 2.0 * sigma;
    if norm > cap {
        dx *= cap / norm;
        dy *= cap / norm;
    }
    [dx, dy]
}

struct Track {
    positions: Vec<[f64; 2]>,
    mask: Vec<bool>,
}

fn trajectory_tokens(track: &Track, history: usize, dt: f64) -> Matrix {
    let mut tokens = Matrix::zeros(history, D_IN);
    for i in 0..history {
        if !track.mask[i] {
            continue;
        }
        let [x, y] = track.positions[i];
        let prev = (0..i).rev().find(|&j| track.mask[j]);
        let next = (i + 1..history).find(|&j| track.mask[j]);
        let (vx, vy) = match (prev, next) {
            (Some(j), _) => {
                let steps = (i - j) as f64 * dt;
                ((x - track.positions[j][0]) / steps, (y - track.positions[j][1]) / steps)
            }
            (None, Some(j)) => {
                let steps = (j - i) as f64 * dt;
                ((track.positions[j][0] - x) / steps, (track.positions[j][1] - y) / steps)
            }
            (None, None) => (0.0, 0.0),
        };
        let offset = (i as f64 - (history - 1) as f64) * dt;
        tokens
            .row_mut(i)
            .copy_from_slice(&[x, y, vx, vy, offset, 1.0, 0.0, 0.0]);
    }
    tokens
}

/// Generates one scene. Deterministic given `cfg` and the state of `rng`.
pub fn generate_synthetic_scene<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Result<Scene> {
    cfg.validate()?;
    let (h, t, dt) = (cfg.history_steps, cfg.horizon, cfg.dt);
    let curvature = |rng: &mut R| -> f64 {
        if cfg.max_curvature == 0.0 || rng.random_bool(0.3) {
            0.0
        } else {
            rng.random_range(-cfg.max_curvature..=cfg.max_curvature)
        }
    };

    // Ego lane passes through the origin heading +x.
    let ego_arc = Arc {
        x0: 0.0,
        y0: 0.0,
        heading: 0.0,
        curvature: curvature(rng),
    };
    let mut lanes: Vec<(Arc, bool)> = vec![(ego_arc, true)];
    let num_roads = rng.random_range(cfg.roads_min..=cfg.roads_max);
    for _ in 1..num_roads {
        if rng.random_bool(0.6) {
            let offset = [-7.0, -3.5, 3.5, 7.0][rng.random_range(0..4)];
            lanes.push((
                Arc {
                    x0: 0.0,
                    y0: offset,
                    heading: if rng.random_bool(0.8) { 0.0 } else { std::f64::consts::PI },
                    curvature: ego_arc.curvature,
                },
                true,
            ));
        } else {
            let xc = rng.random_range(10.0..60.0);
            let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            lanes.push((
                Arc {
                    x0: xc,
                    y0: -40.0 * dir,
                    heading: dir * std::f64::consts::FRAC_PI_2,
                    curvature: 0.0,
                },
                false,
            ));
        }
    }

    let back = cfg.speed_max * h as f64 * dt + 5.0;
    let ahead = cfg.speed_max * t as f64 * dt + 10.0;
    let span = |arc: &Arc, is_lane: bool| -> (f64, f64) {
        if is_lane && arc.heading == 0.0 && arc.x0 == 0.0 {
            (-back, ahead)
        } else if is_lane {
            (-ahead, back)
        } else {
            (0.0, 80.0)
        }
    };

    // Ego motion.
    let v_ego = rng.random_range(cfg.speed_min..=cfg.speed_max);
    let mut ego_hist = Track {
        positions: Vec::with_capacity(h),
        mask: vec![true; h],
    };
    for i in 0..h {
        let s = v_ego * (i as f64 - (h - 1) as f64) * dt;
        let p = ego_arc.point(s);
        let j = jitter(rng, cfg.noise);
        ego_hist.positions.push([p[0] + j[0], p[1] + j[1]]);
    }
    let mut future = Matrix::zeros(t, 2);
    for k in 0..t {
        let p = ego_arc.point(v_ego * (k + 1) as f64 * dt);
        let j = jitter(rng, cfg.noise);
        future.set(k, 0, p[0] + j[0]);
        future.set(k, 1, p[1] + j[1]);
    }
    let origin = ego_hist.positions[h - 1];
    let shift = |p: [f64; 2]| [p[0] - origin[0], p[1] - origin[1]];

    // Roads.
    let p = cfg.points_per_polyline;
    let mut roads = Vec::with_capacity(lanes.len());
    for (arc, is_lane) in &lanes {
        let (s0, s1) = span(arc, *is_lane);
        let mut tokens = Matrix::zeros(p, D_IN);
        let mut mask = vec![true; p];
        if rng.random_bool(cfg.partial_prob) {
            let cut = rng.random_range(1..p);
            for m in mask.iter_mut().skip(cut) {
                *m = false;
            }
        }
        for i in 0..p {
            if !mask[i] {
                continue;
            }
            let s = s0 + (s1 - s0) * i as f64 / (p - 1) as f64;
            let [x, y] = shift(arc.point(s));
            let [tx, ty] = arc.tangent(s);
            tokens
                .row_mut(i)
                .copy_from_slice(&[x, y, tx, ty, 0.0, 0.0, 0.0, 0.0]);
        }
        let mut context = kind_tag(ElementKind::Road, D_CTX);
        context.0[if *is_lane { CTX_LANE } else { CTX_CROSSING }] = 1.0;
        context.0[CTX_CURVATURE] = arc.curvature * 50.0;
        roads.push(SceneElement {
            kind: ElementKind::Road,
            tokens,
            mask: MaskBits(mask),
            context,
        });
    }

    // Other agents ride a random road.
    let num_agents = rng.random_range(cfg.agents_min..=cfg.agents_max);
    let mut agents = Vec::with_capacity(num_agents);
    for _ in 0..num_agents {
        let (arc, is_lane) = lanes[rng.random_range(0..lanes.len())];
        let (s0, s1) = span(&arc, is_lane);
        let v = rng.random_range(cfg.speed_min..=cfg.speed_max);
        let s_now = rng.random_range((s0 + 0.3 * (s1 - s0))..=(s1 - 0.1 * (s1 - s0)));
        let mut track = Track {
            positions: Vec::with_capacity(h),
            mask: vec![true; h],
        };
        if rng.random_bool(cfg.partial_prob) {
            let late = rng.random_range(1..h);
            for m in track.mask.iter_mut().take(late) {
                *m = false;
            }
        }
        for i in 0..h {
            let s = s_now + v * (i as f64 - (h - 1) as f64) * dt;
            let q = arc.point(s);
            let j = jitter(rng, cfg.noise);
            track.positions.push(shift([q[0] + j[0], q[1] + j[1]]));
        }
        agents.push(SceneElement {
            kind: ElementKind::Agent,
            tokens: trajectory_tokens(&track, h, dt),
            mask: MaskBits(track.mask),
            context: kind_tag(ElementKind::Agent, D_CTX),
        });
    }

    for pos in &mut ego_hist.positions {
        *pos = shift(*pos);
    }
    for k in 0..t {
        let [x, y] = shift([future.get(k, 0), future.get(k, 1)]);
        future.set(k, 0, x);
        future.set(k, 1, y);
    }
    let ego = SceneElement {
        kind: ElementKind::Ego,
        tokens: trajectory_tokens(&ego_hist, h, dt),
        mask: MaskBits(ego_hist.mask),
        context: kind_tag(ElementKind::Ego, D_CTX),
    };

    Ok(Scene {
        ego,
        agents,
        roads,
        future,
        future_mask: MaskBits::all_valid(t),
    })
}

/// Random stream for scene `index`, independent of every other index.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `cfg.num_scenes` scenes, scene `i` drawn from [`scene_rng`]`(cfg.seed, i)`.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Vec<Scene>> {
    (0..cfg.num_scenes)
        .map(|i| generate_synthetic_scene(cfg, &mut scene_rng(cfg.seed, i as u64)))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize)]
struct RecordRef<'a> {
    version: u32,
    ego: &'a SceneElement,
    agents: &'a [SceneElement],
    roads: &'a [SceneElement],
    future: &'a Matrix,
    future_mask: &'a MaskBits,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    version: u32,
    ego: SceneElement,
    agents: Vec<SceneElement>,
    roads: Vec<SceneElement>,
    future: Matrix,
    future_mask: MaskBits,
}

/// Writes the dataset to any writer.
pub fn write_scenes<W: Write>(scenes: &[Scene], mut w: W) -> Result<()> {
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    for s in scenes {
        let rec = RecordRef {
            version: DATASET_VERSION,
            ego: &s.ego,
            agents: &s.agents,
            roads: &s.roads,
            future: &s.future,
            future_mask: &s.future_mask,
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scenes<R: BufRead>(r: R) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    let mut saw_header = false;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            let header: Header = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            if header.format != DATASET_FORMAT {
                return Err(Error::Format(format!(
                    "expected format `{DATASET_FORMAT}`, found `{}`",
                    header.format
                )));
            }
            if header.version != DATASET_VERSION {
                return Err(Error::Format(format!(
                    "unsupported dataset version {} (expected {DATASET_VERSION})",
                    header.version
                )));
            }
            saw_header = true;
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if rec.version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "record on line {lineno} has version {} (expected {DATASET_VERSION})",
                rec.version
            )));
        }
        let scene = Scene {
            ego: rec.ego,
            agents: rec.agents,
            roads: rec.roads,
            future: rec.future,
            future_mask: rec.future_mask,
        };
        scene.validate().map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn write_dataset(scenes: &[Scene], path: impl AsRef<Path>) -> Result<()> {
    write_scenes(scenes, BufWriter::new(File::create(path)?))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    read_scenes(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight_future(t: usize) -> Matrix {
        let mut m = Matrix::zeros(t, 2);
        for i in 0..t {
            m.set(i, 0, i as f64 + 1.0);
            m.set(i, 1, 0.5 * i as f64);
        }
        m
    }

    #[test]
    fn full_mask_hides_everything() {
        let f = straight_future(16);
        let gc = apply_goal_masking(&f, &MaskBits::all_valid(16), &mut scene_rng(1, 0), 1.0)
            .unwrap();
        assert_eq!(gc.step_mask.count_valid(), 0);
        assert_eq!(gc.exclusion_index, None);
        assert!(gc.masked_future.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_mask_still_reveals_one_step() {
        let f = straight_future(8);
        let gc = apply_goal_masking(&f, &MaskBits::all_valid(8), &mut scene_rng(1, 0), 0.0)
            .unwrap();
        let t = gc.exclusion_index.unwrap();
        assert_eq!(gc.step_mask.count_valid(), 1);
        assert_eq!(gc.masked_future.row(t), f.row(t));
    }

    #[test]
    fn invalid_future_steps_are_never_revealed() {
        let f = straight_future(4);
        let valid = MaskBits(vec![false, false, true, false]);
        for s in 0..50 {
            let gc = apply_goal_masking(&f, &valid, &mut scene_rng(2, s), 0.0).unwrap();
            assert_eq!(gc.exclusion_index, Some(2));
        }
    }

    #[test]
    fn mask_ratio_out_of_range_is_rejected() {
        let f = straight_future(4);
        assert!(apply_goal_masking(&f, &MaskBits::all_valid(4), &mut scene_rng(0, 0), 1.5).is_err());
    }

    #[test]
    fn goal_tokens_follow_layout() {
        let f = Matrix::from_rows(&[&[1.0, 1.0], &[3.0, 4.0], &[5.0, 5.0], &[6.0, 6.0]]);
        let gc = GoalConditioning::reveal_step(&f, 1, GoalPlacement::RoadsSet);
        let e = encode_goal_element(&gc, D_IN, D_CTX).unwrap();
        assert_eq!(e.kind, ElementKind::Goal);
        assert_eq!(&e.tokens.row(1)[..4], &[3.0, 4.0, 1.0, 0.25]);
        for i in [0, 2, 3] {
            assert_eq!(&e.tokens.row(i)[..3], &[0.0, 0.0, 0.0]);
            assert_eq!(e.tokens.get(i, 3), i as f64 / 4.0);
        }
        assert_eq!(e.mask.count_valid(), 4);
        assert_eq!(e.context.0[ElementKind::Goal.index()], 1.0);

        let hidden = encode_goal_element(
            &GoalConditioning::fully_masked(4, GoalPlacement::AgentsSet),
            D_IN,
            D_CTX,
        )
        .unwrap();
        assert!(decode_goal_element(&hidden).is_empty());
        assert!((0..4).all(|i| hidden.tokens.get(i, 2) == 0.0));
    }

    #[test]
    fn generator_config_validation() {
        let bad = GeneratorConfig {
            roads_min: 5,
            roads_max: 2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(GeneratorConfig::default().validate().is_ok());
    }

    #[test]
    fn empty_input_is_an_empty_dataset() {
        assert!(read_scenes(std::io::Cursor::new("")).unwrap().is_empty());
    }

    #[test]
    fn wrong_version_is_a_format_error() {
        let text = "{\"format\":\"mnm-scenes\",\"version\":2}\n";
        assert!(matches!(
            read_scenes(std::io::Cursor::new(text)),
            Err(Error::Format(_))
        ));
        let text = "{\"format\":\"other\",\"version\":1}\n";
        assert!(matches!(
            read_scenes(std::io::Cursor::new(text)),
            Err(Error::Format(_))
        ));
    }
}
