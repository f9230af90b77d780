//! The golfer trajectory predictor.
//!
//! Each scene element is projected to width `d` and refined by stacked
//! feature-extractor blocks (query-variant MnM, max-pool mix, concat match);
//! its latent is the element-wise max of the pooled tokens and the final
//! context. Road and agent latents then interact with the ego latent through
//! product-match blocks, giving `f_R` and `f_A`. A fusion MLP over
//! `[f_E | f_R | f_A]` yields `f_enc`, and independent MLP branches decode
//! `K` Gaussian trajectory modes and their logits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mnm::{init_weight, MnmBlock, MnmConfig};
use crate::numerics::{
    masked_softmax, random_matrix, Activation, Graph, MaskBits, Matrix, ParamId, ParamStore, Var, Vector,
};
use crate::scene::{
    encode_goal_element, ElementKind, GoalConditioning, GoalPlacement, Scene, SceneElement, D_CTX,
    D_IN,
};

pub const LOG_SIGMA_MIN: f64 = -5.0;
pub const LOG_SIGMA_MAX: f64 = 5.0;

pub const MODEL_MAGIC: &[u8; 4] = b"MNMG";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GolferConfig {
    pub d: usize,
    pub heads: usize,
    pub fe_depth: usize,
    pub interact_depth: usize,
    /// Number of predicted modes.
    pub k: usize,
    /// Future steps.
    pub horizon: usize,
    /// Feed-forward width inside MnM blocks; `None` means `4d`.
    pub d_ff: Option<usize>,
    /// Hidden width of the fusion and decoder MLPs; `None` means `2d`.
    pub decoder_hidden: Option<usize>,
    pub activation: Activation,
    pub seed: u64,
    pub d_in: usize,
    pub d_ctx: usize,
    /// Meters per unit of network output; input positions are divided by it.
    pub position_scale: f64,
    /// Keep the (identity-initialised) projection after the product match.
    pub interact_projection: bool,
}

impl Default for GolferConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            fe_depth: 2,
            interact_depth: 1,
            k: 6,
            horizon: 16,
            d_ff: None,
            decoder_hidden: None,
            activation: Activation::Gelu,
            seed: 0,
            d_in: D_IN,
            d_ctx: D_CTX,
            position_scale: 10.0,
            interact_projection: true,
        }
    }
}

impl GolferConfig {
    /// The small configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            d: 16,
            heads: 2,
            fe_depth: 1,
            k: 3,
            horizon: 4,
            ..Self::default()
        }
    }

    pub fn ffn_width(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d)
    }

    pub fn hidden_width(&self) -> usize {
        self.decoder_hidden.unwrap_or(2 * self.d)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!(
                "model.d = {} must be a positive multiple of model.heads = {}",
                self.d, self.heads
            ));
        }
        if self.k == 0 {
            return bad("model.k must be >= 1".into());
        }
        if self.horizon == 0 {
            return bad("model.horizon must be >= 1".into());
        }
        if self.interact_depth == 0 {
            return bad("model.interact_depth must be >= 1".into());
        }
        if self.ffn_width() == 0 || self.hidden_width() == 0 {
            return bad("model.d_ff and model.decoder_hidden must be positive".into());
        }
        if self.d_in < 4 || self.d_ctx < 4 {
            return bad("model.d_in and model.d_ctx must be >= 4".into());
        }
        if !(self.position_scale > 0.0 && self.position_scale.is_finite()) {
            return bad("model.position_scale must be positive".into());
        }
        Ok(())
    }

    fn block(&self, base: MnmConfig) -> MnmConfig {
        MnmConfig {
            d_ff: self.ffn_width(),
            activation: self.activation,
            product_projection: self.interact_projection,
            ..base
        }
    }
}

/// Affine map `x W + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.add(format!("{name}.w"), init_weight(rng, d_in, d_out)),
            b: store.add(format!("{name}.b"), Matrix::zeros(1, d_out)),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Two affine layers with an activation in between.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    fn new(
        store: &mut ParamStore,
        name: &str,
        widths: (usize, usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), widths.0, widths.1, rng),
            out: Linear::new(store, &format!("{name}.1"), widths.1, widths.2, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, act: Activation) -> Result<Var> {
        let h = self.hidden.apply(g, store, x)?;
        let h = g.activation(h, act)?;
        self.out.apply(g, store, h)
    }
}

/// Input projections for one element kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KindProjection {
    pub tokens: Linear,
    pub context: Linear,
}

/// All golfer weights plus the ids that locate them in the store.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: GolferConfig,
    pub store: ParamStore,
    /// Indexed by [`ElementKind::index`].
    pub projections: Vec<KindProjection>,
    pub fe_blocks: Vec<MnmBlock>,
    pub road_blocks: Vec<MnmBlock>,
    pub agent_blocks: Vec<MnmBlock>,
    /// Stand-in latents for an empty road or agent set.
    pub null_road: ParamId,
    pub null_agent: ParamId,
    pub fusion: Mlp,
    pub regression: Vec<Mlp>,
    pub classification: Mlp,
}

/// Output of the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `K` matrices of shape `T x 2`, meters.
    pub means: Vec<Matrix>,
    /// `K` matrices of shape `T x 2`.
    pub log_sigmas: Vec<Matrix>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn horizon(&self) -> usize {
        self.means.first().map_or(0, Matrix::rows)
    }

    /// Builds a prediction from `K x 2T` means and log-sigmas (row layout
    /// `x0 y0 x1 y1 ...`) and a `1 x K` logit row.
    pub fn from_rows(means: &Matrix, log_sigmas: &Matrix, logits: &Matrix) -> Result<Self> {
        let (k, w) = means.shape();
        if log_sigmas.shape() != (k, w) || logits.shape() != (1, k) || w % 2 != 0 {
            return Err(Error::dims("prediction", means.shape(), log_sigmas.shape()));
        }
        let split = |m: &Matrix| -> Vec<Matrix> {
            (0..k)
                .map(|i| Matrix::from_vec(w / 2, 2, m.row(i).to_vec()).expect("even width"))
                .collect()
        };
        let logits = logits.row(0).to_vec();
        let probs = masked_softmax(&logits, &MaskBits::all_valid(k))?;
        Ok(Self {
            means: split(means),
            log_sigmas: split(log_sigmas),
            logits,
            probs,
        })
    }
}

/// Decoder outputs still on the tape.
#[derive(Clone, Copy, Debug)]
pub struct GraphPrediction {
    /// `K x 2T`, meters.
    pub means: Var,
    /// `K x 2T`, clamped.
    pub log_sigmas: Var,
    /// `1 x K`.
    pub logits: Var,
}

impl GraphPrediction {
    pub fn value(&self, g: &Graph) -> Result<Prediction> {
        Prediction::from_rows(g.value(self.means), g.value(self.log_sigmas), g.value(self.logits))
    }
}

/// Columns holding metric quantities for each kind.
fn metric_columns(kind: ElementKind) -> &'static [usize] {
    match kind {
        ElementKind::Road | ElementKind::Goal => &[0, 1],
        ElementKind::Agent | ElementKind::Ego => &[0, 1, 2, 3],
    }
}

impl ModelParams {
    /// Freshly initialised weights; a pure function of `config`.
    pub fn new(config: GolferConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (d, h) = (config.d, config.hidden_width());

        let projections = ElementKind::ALL
            .iter()
            .map(|kind| {
                let name = format!("{kind:?}").to_lowercase();
                KindProjection {
                    tokens: Linear::new(&mut store, &format!("proj.{name}.tokens"), config.d_in, d, &mut rng),
                    context: Linear::new(&mut store, &format!("proj.{name}.context"), config.d_ctx, d, &mut rng),
                }
            })
            .collect();

        let fe_cfg = config.block(MnmConfig::feature_extractor(d, config.heads));
        let fe_blocks = (0..config.fe_depth)
            .map(|i| MnmBlock::new(&mut store, &format!("fe.{i}"), fe_cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let int_cfg = config.block(MnmConfig::interaction(d, config.heads));
        let road_blocks = (0..config.interact_depth)
            .map(|i| MnmBlock::new(&mut store, &format!("interact.road.{i}"), int_cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let agent_blocks = (0..config.interact_depth)
            .map(|i| MnmBlock::new(&mut store, &format!("interact.agent.{i}"), int_cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;

        let null_scale = 1.0 / (d as f64).sqrt();
        let null_road = store.add("null.road", random_matrix(&mut rng, 1, d, null_scale));
        let null_agent = store.add("null.agent", random_matrix(&mut rng, 1, d, null_scale));

        let fusion = Mlp::new(&mut store, "fusion", (3 * d, h, d), &mut rng);
        let regression = (0..config.k)
            .map(|i| Mlp::new(&mut store, &format!("decoder.mode.{i}"), (d, h, 4 * config.horizon), &mut rng))
            .collect();
        let classification = Mlp::new(&mut store, "decoder.class", (d, h, config.k), &mut rng);

        Ok(Self {
            config,
            store,
            projections,
            fe_blocks,
            road_blocks,
            agent_blocks,
            null_road,
            null_agent,
            fusion,
            regression,
            classification,
        })
    }

    pub fn scalar_count(&self) -> usize {
        self.store.scalar_count()
    }

    fn scaled_tokens(&self, e: &SceneElement) -> Result<Matrix> {
        if e.tokens.cols() != self.config.d_in || e.context.dim() != self.config.d_ctx {
            return Err(Error::Shape {
                tensor: format!("{:?} element", e.kind),
                expected: (e.tokens.rows(), self.config.d_in),
                found: e.tokens.shape(),
            });
        }
        let inv = 1.0 / self.config.position_scale;
        let mut t = e.tokens.clone();
        let cols = metric_columns(e.kind);
        for r in 0..t.rows() {
            let row = t.row_mut(r);
            for &c in cols {
                row[c] *= inv;
            }
        }
        Ok(t)
    }

    /// Projects an element's tokens (`P x d`) and context (`1 x d`).
    pub fn project(&self, g: &mut Graph, store: &ParamStore, e: &SceneElement) -> Result<(Var, Var)> {
        e.validate()?;
        let proj = self.projections[e.kind.index()];
        let tokens = g.constant(self.scaled_tokens(e)?);
        let context = g.constant(e.context.to_row());
        let x = proj.tokens.apply(g, store, tokens)?;
        let c = proj.context.apply(g, store, context)?;
        Ok((x, c))
    }

    /// One feature-extractor block.
    pub fn fe_block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        tokens: Var,
        context: Var,
        mask: &MaskBits,
    ) -> Result<(Var, Var)> {
        self.fe_blocks[layer].query(g, store, tokens, context, mask)
    }

    /// Element latent, `1 x d`.
    pub fn encode_element(&self, g: &mut Graph, store: &ParamStore, e: &SceneElement) -> Result<Var> {
        if !e.has_valid_token() {
            return Err(Error::EmptySet(format!("{:?} element has no valid token", e.kind)));
        }
        let (mut x, mut c) = self.project(g, store, e)?;
        for layer in 0..self.fe_blocks.len() {
            (x, c) = self.fe_block(g, store, layer, x, c, &e.mask)?;
        }
        let pooled = g.masked_max_pool(x, &e.mask)?;
        g.max(pooled, c)
    }

    /// Product-match interaction of `latents` (`N x d`) with the ego latent;
    /// returns the final context (`1 x d`).
    pub fn interact(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        blocks: &[MnmBlock],
        ego: Var,
        latents: Var,
        mask: &MaskBits,
    ) -> Result<Var> {
        if !mask.any() {
            return Err(Error::EmptySet("interaction over an empty set".into()));
        }
        let (mut x, mut c) = (latents, ego);
        for b in blocks {
            (x, c) = b.query(g, store, x, c, mask)?;
        }
        Ok(c)
    }

    /// Stacks latents of a set; elements without valid tokens become masked
    /// zero rows and an empty set falls back to the learned null latent.
    fn set_latents(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        elements: &[&SceneElement],
        null: ParamId,
    ) -> Result<(Var, MaskBits)> {
        let mut rows = Vec::with_capacity(elements.len() + 1);
        let mut mask = Vec::with_capacity(elements.len() + 1);
        if !elements.iter().any(|e| e.has_valid_token()) {
            rows.push(g.param(store, null));
            mask.push(true);
        }
        for e in elements {
            if e.has_valid_token() {
                rows.push(self.encode_element(g, store, e)?);
                mask.push(true);
            } else {
                rows.push(g.constant(Matrix::zeros(1, self.config.d)));
                mask.push(false);
            }
        }
        Ok((g.stack_rows(&rows)?, MaskBits(mask)))
    }

    /// `f_enc`, `1 x d`. The goal element joins the agents or roads set
    /// according to its placement.
    pub fn encode_scene(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        scene: &Scene,
        goal: Option<(&SceneElement, GoalPlacement)>,
    ) -> Result<Var> {
        let f_e = self.encode_element(g, store, &scene.ego)?;
        let mut roads: Vec<&SceneElement> = scene.roads.iter().collect();
        let mut agents: Vec<&SceneElement> = scene.agents.iter().collect();
        match goal {
            Some((e, GoalPlacement::RoadsSet)) => roads.push(e),
            Some((e, GoalPlacement::AgentsSet)) => agents.push(e),
            None => {}
        }
        let (road_lat, road_mask) = self.set_latents(g, store, &roads, self.null_road)?;
        let (agent_lat, agent_mask) = self.set_latents(g, store, &agents, self.null_agent)?;
        let f_r = self.interact(g, store, &self.road_blocks, f_e, road_lat, &road_mask)?;
        let f_a = self.interact(g, store, &self.agent_blocks, f_e, agent_lat, &agent_mask)?;
        let joined = g.concat_cols(&[f_e, f_r, f_a])?;
        self.fusion.apply(g, store, joined, self.config.activation)
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, f_enc: Var) -> Result<GraphPrediction> {
        let t2 = 2 * self.config.horizon;
        let act = self.config.activation;
        let branches = self
            .regression
            .iter()
            .map(|m| m.apply(g, store, f_enc, act))
            .collect::<Result<Vec<_>>>()?;
        let modes = g.stack_rows(&branches)?;
        let means = g.slice_cols(modes, 0, t2)?;
        let means = g.scale(means, self.config.position_scale)?;
        // Sigmas are predicted in units of `position_scale`.
        let log_sigmas = g.slice_cols(modes, t2, t2)?;
        let offset = g.constant(Matrix::filled(1, t2, self.config.position_scale.ln()));
        let log_sigmas = g.add_row(log_sigmas, offset)?;
        let log_sigmas = g.clamp(log_sigmas, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
        let logits = self.classification.apply(g, store, f_enc, act)?;
        Ok(GraphPrediction {
            means,
            log_sigmas,
            logits,
        })
    }

    /// Full forward pass on the tape.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        scene: &Scene,
        goal: Option<&GoalConditioning>,
    ) -> Result<GraphPrediction> {
        if scene.horizon() != self.config.horizon {
            return Err(Error::Shape {
                tensor: "scene.future".into(),
                expected: (self.config.horizon, 2),
                found: scene.future.shape(),
            });
        }
        let goal_element = goal
            .map(|gc| encode_goal_element(gc, self.config.d_in, self.config.d_ctx))
            .transpose()?;
        let goal_ref = goal_element.as_ref().zip(goal.map(|gc| gc.placement));
        let f_enc = self.encode_scene(g, store, scene, goal_ref)?;
        self.decode(g, store, f_enc)
    }

    /// Prediction with the current weights.
    pub fn forward(&self, scene: &Scene, goal: Option<&GoalConditioning>) -> Result<Prediction> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, &self.store, scene, goal)?;
        out.value(&g)
    }

    /// Prediction for plain forecasting: fully masked goal in the agents set.
    pub fn predict(&self, scene: &Scene) -> Result<Prediction> {
        let gc = GoalConditioning::fully_masked(self.config.horizon, GoalPlacement::AgentsSet);
        self.forward(scene, Some(&gc))
    }

    /// `f_enc` as a plain vector.
    pub fn encode_scene_value(
        &self,
        scene: &Scene,
        goal: Option<(&SceneElement, GoalPlacement)>,
    ) -> Result<Vector> {
        let mut g = Graph::new();
        let v = self.encode_scene(&mut g, &self.store, scene, goal)?;
        Ok(Vector::from_row(g.value(v)))
    }

    pub fn encode_element_value(&self, e: &SceneElement) -> Result<Vector> {
        let mut g = Graph::new();
        let v = self.encode_element(&mut g, &self.store, e)?;
        Ok(Vector::from_row(g.value(v)))
    }

    /// Writes the model file.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let config = serde_json::to_vec(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&u32_len(config.len())?.to_le_bytes())?;
        w.write_all(&config)?;
        w.write_all(&u32_len(self.store.len())?.to_le_bytes())?;
        for p in self.store.iter() {
            w.write_all(&u32_len(p.value.rows())?.to_le_bytes())?;
            w.write_all(&u32_len(p.value.cols())?.to_le_bytes())?;
            for v in p.value.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a model file. With `expected`, the weights are loaded into that
    /// configuration's layout: tensor shapes must match, and the embedded
    /// configuration must equal `expected` unless `force` is set.
    pub fn read_from<R: Read>(mut r: R, expected: Option<&GolferConfig>, force: bool) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("not a model file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {version} (expected {MODEL_VERSION})"
            )));
        }
        let len = read_u32(&mut r)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(truncated)?;
        let embedded: GolferConfig =
            serde_json::from_slice(&buf).map_err(|e| Error::Format(format!("model config: {e}")))?;
        let config = expected.cloned().unwrap_or_else(|| embedded.clone());
        let mut model = Self::new(config)?;

        let count = read_u32(&mut r)? as usize;
        for (i, p) in model.store.iter_mut().enumerate() {
            if i >= count {
                return Err(Error::Format(format!(
                    "model file holds {count} tensors, layout needs more (missing `{}`)",
                    p.name
                )));
            }
            let shape = (read_u32(&mut r)? as usize, read_u32(&mut r)? as usize);
            if shape != p.value.shape() {
                return Err(Error::Shape {
                    tensor: p.name.clone(),
                    expected: p.value.shape(),
                    found: shape,
                });
            }
            let mut bytes = [0u8; 8];
            for v in p.value.as_mut_slice() {
                r.read_exact(&mut bytes).map_err(truncated)?;
                *v = f64::from_le_bytes(bytes);
            }
        }
        if count != model.store.len() {
            return Err(Error::Format(format!(
                "model file holds {count} tensors, layout has {}",
                model.store.len()
            )));
        }
        if !force && embedded != model.config {
            return Err(Error::Format(
                "embedded model configuration differs from the requested one".into(),
            ));
        }
        Ok(model)
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("model file is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_params(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    params.write_to(BufWriter::new(File::create(path)?))
}

/// Loads a model using its embedded configuration.
pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    ModelParams::read_from(BufReader::new(File::open(path)?), None, false)
}

/// Loads a model into the layout of `expected`; see [`ModelParams::read_from`].
pub fn load_params_as(
    path: impl AsRef<Path>,
    expected: &GolferConfig,
    force: bool,
) -> Result<ModelParams> {
    ModelParams::read_from(BufReader::new(File::open(path)?), Some(expected), force)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_depends_only_on_config() {
        let a = ModelParams::new(GolferConfig::tiny()).unwrap();
        let b = ModelParams::new(GolferConfig::tiny()).unwrap();
        assert_eq!(a.scalar_count(), b.scalar_count());
        assert_eq!(a.store, b.store);
        let other_seed = ModelParams::new(GolferConfig {
            seed: 9,
            ..GolferConfig::tiny()
        })
        .unwrap();
        assert_eq!(a.scalar_count(), other_seed.scalar_count());
        assert_ne!(a.store, other_seed.store);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            GolferConfig { d: 10, heads: 4, ..GolferConfig::default() },
            GolferConfig { k: 0, ..GolferConfig::default() },
            GolferConfig { horizon: 0, ..GolferConfig::default() },
        ] {
            assert!(matches!(ModelParams::new(cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let bytes = b"NOPE\x01\0\0\0".to_vec();
        assert!(matches!(
            ModelParams::read_from(&bytes[..], None, false),
            Err(Error::Format(_))
        ));
    }
}
