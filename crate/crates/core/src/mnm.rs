//! Mix-and-Match blocks.
//!
//! A block mixes token information into either an attention matrix or a
//! pooled vector (`Mix`), then matches it back onto every token (`Match`),
//! followed by a residual feed-forward layer. Two variants exist:
//!
//! - basic: `C = Mix(Norm(X)); S = Match(C, X) + X; X = σ(Norm(S)W1)W2 + S`
//! - query: `S = Match(C, X) + X; C = Mix(Norm(S)); X = σ(Norm(S)W1)W2 + S;
//!   C = σ(Norm(C)W3)W4 + C`
//!
//! With several heads, the normalized channels are split into contiguous
//! groups and Mix/Match run per group; feed-forward layers stay full width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    random_matrix, Activation, Graph, MaskBits, Matrix, ParamId, ParamStore, Var, Vector,
    LAYER_NORM_EPS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixKind {
    /// Row-wise softmax of `(XQ)(XK)ᵀ/√d_head` → `n x n` per head.
    Attention,
    /// Masked column-wise max → one `d` vector.
    MaxPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    /// `C · X` with `C` the attention matrix.
    AttentionMatmul,
    /// `[x_i | c] W_m` per token.
    Concat,
    /// `(x_i ⊙ c) W_m` per token.
    Product,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MnmConfig {
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub mix: MixKind,
    pub matching: MatchKind,
    pub activation: Activation,
    /// Query variant: carries a context vector and owns `W3`, `W4`.
    pub query: bool,
    /// Learned per-head Q/K projections for attention mixing (identity otherwise).
    pub learned_qk: bool,
    /// Output projection after a Product match. Concat always projects.
    pub product_projection: bool,
}

impl MnmConfig {
    /// Pooling mixer with concatenation match on the query variant.
    pub fn feature_extractor(d: usize, heads: usize) -> Self {
        Self {
            d,
            d_ff: 4 * d,
            heads,
            mix: MixKind::MaxPool,
            matching: MatchKind::Concat,
            activation: Activation::Gelu,
            query: true,
            learned_qk: false,
            product_projection: true,
        }
    }

    /// Pooling mixer with element-wise product match on the query variant.
    pub fn interaction(d: usize, heads: usize) -> Self {
        Self {
            matching: MatchKind::Product,
            ..Self::feature_extractor(d, heads)
        }
    }

    /// The self-attention instantiation of the basic block.
    pub fn attention(d: usize, heads: usize) -> Self {
        Self {
            d,
            d_ff: 4 * d,
            heads,
            mix: MixKind::Attention,
            matching: MatchKind::AttentionMatmul,
            activation: Activation::Gelu,
            query: false,
            learned_qk: false,
            product_projection: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_ff == 0 {
            return Err(Error::Config("block widths must be positive".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        match (self.mix, self.matching) {
            (MixKind::Attention, MatchKind::AttentionMatmul)
            | (MixKind::MaxPool, MatchKind::Concat | MatchKind::Product) => {}
            (mix, matching) => {
                return Err(Error::Config(format!(
                    "mix {mix:?} cannot be combined with match {matching:?}"
                )))
            }
        }
        if self.query && self.mix == MixKind::Attention {
            return Err(Error::Config(
                "the query variant needs a vector-valued mix (MaxPool)".into(),
            ));
        }
        Ok(())
    }
}

/// Layer-norm scale and shift.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, d, 1.0)),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, d)),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// `uniform(-1/√fan_in, 1/√fan_in)` initialised weight.
pub(crate) fn init_weight<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    random_matrix(rng, rows, cols, 1.0 / (rows as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryParams {
    pub norm: NormParams,
    pub w3: ParamId,
    pub w4: ParamId,
}

/// One MnM block and the ids of its parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MnmBlock {
    pub config: MnmConfig,
    pub norm_mix: NormParams,
    pub norm_ffn: NormParams,
    pub w1: ParamId,
    pub w2: ParamId,
    pub query: Option<QueryParams>,
    /// Per-head match projection `W_m` (empty for attention, or for a
    /// Product match without projection).
    pub match_proj: Vec<ParamId>,
    /// Per-head attention projections (empty when identity).
    pub attn_q: Vec<ParamId>,
    pub attn_k: Vec<ParamId>,
}

/// Output of [`MnmBlock::mix`].
#[derive(Clone, Debug)]
pub enum Mixed {
    /// `1 x d` pooled row.
    Pooled(Var),
    /// One `n x n` attention matrix per head.
    Attention(Vec<Var>),
}

impl MnmBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: MnmConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (d, dh, h) = (config.d, config.head_dim(), config.heads);
        let norm_mix = NormParams::new(store, &format!("{name}.norm_mix"), d);
        let norm_ffn = NormParams::new(store, &format!("{name}.norm_ffn"), d);
        let w1 = store.add(format!("{name}.w1"), init_weight(rng, d, config.d_ff));
        let w2 = store.add(format!("{name}.w2"), init_weight(rng, config.d_ff, d));
        let query = if config.query {
            let norm = NormParams::new(store, &format!("{name}.norm_query"), d);
            let w3 = store.add(format!("{name}.w3"), init_weight(rng, d, config.d_ff));
            let w4 = store.add(format!("{name}.w4"), init_weight(rng, config.d_ff, d));
            Some(QueryParams { norm, w3, w4 })
        } else {
            None
        };
        let match_proj = match config.matching {
            MatchKind::Concat => (0..h)
                .map(|i| store.add(format!("{name}.match.{i}"), init_weight(rng, 2 * dh, dh)))
                .collect(),
            MatchKind::Product if config.product_projection => (0..h)
                .map(|i| store.add(format!("{name}.match.{i}"), Matrix::identity(dh)))
                .collect(),
            _ => Vec::new(),
        };
        let (attn_q, attn_k) = if config.mix == MixKind::Attention && config.learned_qk {
            (
                (0..h)
                    .map(|i| store.add(format!("{name}.attn_q.{i}"), Matrix::identity(dh)))
                    .collect(),
                (0..h)
                    .map(|i| store.add(format!("{name}.attn_k.{i}"), Matrix::identity(dh)))
                    .collect(),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(Self {
            config,
            norm_mix,
            norm_ffn,
            w1,
            w2,
            query,
            match_proj,
            attn_q,
            attn_k,
        })
    }

    fn head(&self, g: &mut Graph, x: Var, h: usize) -> Result<Var> {
        if self.config.heads == 1 {
            return Ok(x);
        }
        let dh = self.config.head_dim();
        g.slice_cols(x, h * dh, dh)
    }

    fn join_heads(&self, g: &mut Graph, parts: Vec<Var>) -> Result<Var> {
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_cols(&parts)
        }
    }

    /// Mix over already-normalized tokens.
    pub fn mix(&self, g: &mut Graph, store: &ParamStore, xn: Var, mask: &MaskBits) -> Result<Mixed> {
        if g.value(xn).rows() != mask.dim() {
            return Err(Error::dims("mix", g.value(xn).shape(), (mask.dim(), 1)));
        }
        if !mask.any() {
            return Err(Error::EmptySet("mix: every token is masked".into()));
        }
        match self.config.mix {
            // Max is coordinate-wise, so per-head pooling equals full-width pooling.
            MixKind::MaxPool => Ok(Mixed::Pooled(g.masked_max_pool(xn, mask)?)),
            MixKind::Attention => {
                let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
                let mut mats = Vec::with_capacity(self.config.heads);
                for h in 0..self.config.heads {
                    let xh = self.head(g, xn, h)?;
                    let (q, k) = if self.attn_q.is_empty() {
                        (xh, xh)
                    } else {
                        let wq = g.param(store, self.attn_q[h]);
                        let wk = g.param(store, self.attn_k[h]);
                        (g.matmul(xh, wq)?, g.matmul(xh, wk)?)
                    };
                    let kt = g.transpose(k)?;
                    let scores = g.matmul(q, kt)?;
                    let scores = g.scale(scores, scale)?;
                    mats.push(g.masked_softmax_rows(scores, mask, mask)?);
                }
                Ok(Mixed::Attention(mats))
            }
        }
    }

    /// Match mixed information back onto the (un-normalized) tokens `x`.
    pub fn matching(&self, g: &mut Graph, store: &ParamStore, mixed: &Mixed, x: Var) -> Result<Var> {
        let (n, d) = g.value(x).shape();
        let mut parts = Vec::with_capacity(self.config.heads);
        match (self.config.matching, mixed) {
            (MatchKind::AttentionMatmul, Mixed::Attention(mats)) => {
                for (h, &a) in mats.iter().enumerate() {
                    if g.value(a).shape() != (n, n) {
                        return Err(Error::dims("match", g.value(a).shape(), (n, n)));
                    }
                    let xh = self.head(g, x, h)?;
                    parts.push(g.matmul(a, xh)?);
                }
            }
            (kind @ (MatchKind::Concat | MatchKind::Product), Mixed::Pooled(c)) => {
                if g.value(*c).shape() != (1, d) {
                    return Err(Error::dims("match", g.value(*c).shape(), (1, d)));
                }
                for h in 0..self.config.heads {
                    let xh = self.head(g, x, h)?;
                    let ch = self.head(g, *c, h)?;
                    let joined = if kind == MatchKind::Concat {
                        g.concat_row(xh, ch)?
                    } else {
                        g.mul_row(xh, ch)?
                    };
                    parts.push(match self.match_proj.get(h) {
                        Some(&w) => {
                            let w = g.param(store, w);
                            g.matmul(joined, w)?
                        }
                        None => joined,
                    });
                }
            }
            (kind, _) => {
                return Err(Error::Config(format!(
                    "match {kind:?} received an incompatible mix output"
                )))
            }
        }
        self.join_heads(g, parts)
    }

    fn ffn(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        norm: NormParams,
        w_in: ParamId,
        w_out: ParamId,
        x: Var,
    ) -> Result<Var> {
        let xn = norm.apply(g, store, x)?;
        let w_in = g.param(store, w_in);
        let w_out = g.param(store, w_out);
        let h = g.matmul(xn, w_in)?;
        let h = g.activation(h, self.config.activation)?;
        let h = g.matmul(h, w_out)?;
        g.add(h, x)
    }

    /// Basic variant on the tape.
    pub fn basic(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: &MaskBits) -> Result<Var> {
        if self.config.query {
            return Err(Error::Config("block was built for the query variant".into()));
        }
        let xn = self.norm_mix.apply(g, store, x)?;
        let mixed = self.mix(g, store, xn, mask)?;
        let matched = self.matching(g, store, &mixed, x)?;
        let s = g.add(matched, x)?;
        self.ffn(g, store, self.norm_ffn, self.w1, self.w2, s)
    }

    /// Query variant on the tape; `c` is a `1 x d` row. Returns `(X', C')`.
    pub fn query(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        c: Var,
        mask: &MaskBits,
    ) -> Result<(Var, Var)> {
        let q = self
            .query
            .ok_or_else(|| Error::Config("block was built for the basic variant".into()))?;
        let matched = self.matching(g, store, &Mixed::Pooled(c), x)?;
        let s = g.add(matched, x)?;
        let sn = self.norm_mix.apply(g, store, s)?;
        let Mixed::Pooled(c_new) = self.mix(g, store, sn, mask)? else {
            unreachable!("query variant validated to pool")
        };
        let x_out = self.ffn(g, store, self.norm_ffn, self.w1, self.w2, s)?;
        let c_out = self.ffn(g, store, q.norm, q.w3, q.w4, c_new)?;
        Ok((x_out, c_out))
    }

    /// Evaluates the basic variant without recording gradients.
    pub fn forward_basic(&self, store: &ParamStore, x: &Matrix, mask: &MaskBits) -> Result<Matrix> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.basic(&mut g, store, xv, mask)?;
        Ok(g.value(out).clone())
    }

    /// Evaluates the query variant without recording gradients.
    pub fn forward_query(
        &self,
        store: &ParamStore,
        x: &Matrix,
        c: &Vector,
        mask: &MaskBits,
    ) -> Result<(Matrix, Vector)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let cv = g.constant(c.to_row());
        let (xo, co) = self.query(&mut g, store, xv, cv, mask)?;
        Ok((g.value(xo).clone(), Vector::from_row(g.value(co))))
    }

    /// Mix applied to `Norm(x)` using this block's mix norm. Returns the
    /// pooled vector as a `1 x d` matrix or the head-0 attention matrix
    /// followed by the remaining heads stacked below it.
    pub fn mix_value(&self, store: &ParamStore, x: &Matrix, mask: &MaskBits) -> Result<Vec<Matrix>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let xn = self.norm_mix.apply(&mut g, store, xv)?;
        Ok(match self.mix(&mut g, store, xn, mask)? {
            Mixed::Pooled(c) => vec![g.value(c).clone()],
            Mixed::Attention(mats) => mats.into_iter().map(|m| g.value(m).clone()).collect(),
        })
    }

    /// Match applied to a precomputed mix output (`1 x d` for pooling, one
    /// `n x n` matrix per head for attention).
    pub fn match_value(&self, store: &ParamStore, mixed: &[Matrix], x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let m = match self.config.mix {
            MixKind::MaxPool => Mixed::Pooled(g.constant(mixed[0].clone())),
            MixKind::Attention => {
                Mixed::Attention(mixed.iter().map(|m| g.constant(m.clone())).collect())
            }
        };
        let out = self.matching(&mut g, store, &m, xv)?;
        Ok(g.value(out).clone())
    }
}
