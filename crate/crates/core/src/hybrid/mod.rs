//! Full deep model: GCN stack, attention encoder, gated fusion and a linear
//! forecast head, plus stage-1 training.

mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::{uniform_init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::preprocess::{NormStats, WindowSet};
use crate::spatial::{gcn_stack_tape, GcnConfig};
use crate::temporal::{encoder_tape, lookup_param, EncoderConfig, EncoderParams};

pub use train::{predict_normalized, train_stage1, EpochRecord, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// GCN → projection → encoder, fused with the time-averaged projection.
    #[default]
    Hybrid,
    /// GCN stack with the head reading every step's embedding.
    GcnOnly,
    /// Encoder on projected raw inputs.
    TransformerOnly,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Hybrid => "hybridst",
            Variant::GcnOnly => "gcn_only",
            Variant::TransformerOnly => "transformer_only",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub gcn: GcnConfig,
    pub encoder: EncoderConfig,
}

/// Data-dependent sizes fixed when the model is created.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub nodes: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub features: usize,
}

impl ModelDims {
    pub fn of(ws: &WindowSet) -> Self {
        Self {
            nodes: ws.nodes,
            input_len: ws.input_len,
            horizon: ws.horizon,
            features: ws.features,
        }
    }

    /// Rejects window sets cut with a different shape.
    pub fn check(&self, ws: &WindowSet) -> Result<()> {
        let other = Self::of(ws);
        if *self != other {
            return Err(Error::Incompatible(format!(
                "model expects {self:?}, dataset has {other:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub gcn: Vec<ParamId>,
    pub proj: Option<(ParamId, ParamId)>,
    pub encoder: Option<EncoderParams>,
    pub fusion: Option<(ParamId, ParamId)>,
    pub head: (ParamId, ParamId),
}

/// Learnable state of the deep model together with everything needed to
/// reproduce and apply it.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridModel {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub seed: u64,
    pub store: ParamStore,
    pub layout: Layout,
    pub sensor_ids: Vec<String>,
    pub norm: Option<NormStats>,
    /// Canonical JSON of the settings that produced the model.
    pub provenance: String,
}

/// Where layout construction gets its tensors: fresh draws or a restored store.
trait ParamSource {
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId>;
    fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId>;
    fn encoder(&mut self, cfg: &EncoderConfig) -> Result<EncoderParams>;
}

struct Fresh<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl ParamSource for Fresh<'_> {
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        self.store.add(name, uniform_init(self.rng, shape, fan_in))
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape))
    }

    fn encoder(&mut self, cfg: &EncoderConfig) -> Result<EncoderParams> {
        EncoderParams::register(cfg, self.store, self.rng)
    }
}

struct Restored<'a>(&'a ParamStore);

impl ParamSource for Restored<'_> {
    fn weight(&mut self, name: &str, shape: &[usize], _: usize) -> Result<ParamId> {
        lookup_param(self.0, name, shape)
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        lookup_param(self.0, name, shape)
    }

    fn encoder(&mut self, cfg: &EncoderConfig) -> Result<EncoderParams> {
        EncoderParams::lookup(cfg, self.0)
    }
}

fn build_layout(config: &ModelConfig, dims: &ModelDims, src: &mut dyn ParamSource) -> Result<Layout> {
    let (f, h) = (dims.features, dims.horizon);
    let hidden = config.gcn.hidden_dim;
    let d = config.encoder.model_dim;
    let mut gcn = Vec::new();
    if config.variant != Variant::TransformerOnly {
        config.gcn.validate()?;
        let mut d_in = f;
        for l in 0..config.gcn.layers {
            gcn.push(src.weight(&format!("gcn.w{l}"), &[d_in, hidden], d_in)?);
            d_in = hidden;
        }
    }
    let (proj, enc, fusion, head_in) = match config.variant {
        Variant::GcnOnly => (None, None, None, dims.input_len * hidden),
        Variant::TransformerOnly | Variant::Hybrid => {
            // the hybrid projection also sees the raw features so a node's own
            // reading survives the neighborhood mixing
            let p_in = if config.variant == Variant::Hybrid {
                f + hidden
            } else {
                f
            };
            let proj = (src.weight("proj.w", &[p_in, d], p_in)?, src.zeros("proj.b", &[d])?);
            let enc = src.encoder(&config.encoder)?;
            let fusion = if config.variant == Variant::Hybrid {
                Some((
                    src.weight("fusion.w", &[2 * d, 1], 2 * d)?,
                    src.zeros("fusion.b", &[1])?,
                ))
            } else {
                None
            };
            (Some(proj), Some(enc), fusion, d)
        }
    };
    let head = (
        src.weight("head.w", &[head_in, h], head_in)?,
        src.zeros("head.b", &[h])?,
    );
    Ok(Layout {
        gcn,
        proj,
        encoder: enc,
        fusion,
        head,
    })
}

impl HybridModel {
    /// Creates a model with parameters drawn from a generator seeded by `seed`.
    pub fn init(config: ModelConfig, dims: ModelDims, sensor_ids: Vec<String>, seed: u64) -> Result<Self> {
        if sensor_ids.len() != dims.nodes {
            return Err(Error::Dimension(format!(
                "{} sensor ids for {} nodes",
                sensor_ids.len(),
                dims.nodes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layout = build_layout(
            &config,
            &dims,
            &mut Fresh {
                store: &mut store,
                rng: &mut rng,
            },
        )?;
        Ok(Self {
            config,
            dims,
            seed,
            store,
            layout,
            sensor_ids,
            norm: None,
            provenance: "{}".into(),
        })
    }

    /// Rebuilds the layout of a restored parameter store.
    pub fn from_store(
        config: ModelConfig,
        dims: ModelDims,
        seed: u64,
        store: ParamStore,
        sensor_ids: Vec<String>,
        norm: Option<NormStats>,
        provenance: String,
    ) -> Result<Self> {
        let layout = build_layout(&config, &dims, &mut Restored(&store))?;
        let expected = layout_len(&layout);
        if expected != store.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint holds {} tensors, the configured model uses {expected}",
                store.len()
            )));
        }
        Ok(Self {
            config,
            dims,
            seed,
            store,
            layout,
            sensor_ids,
            norm,
            provenance,
        })
    }

    /// Forward pass on a tape; `x` is `[N, T, F]` and the result `[N, H]`.
    pub fn forward_tape<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var, a_hat: Var) -> Result<Var> {
        let ModelDims {
            nodes: n,
            input_len: t,
            features: f,
            ..
        } = self.dims;
        if tape.value(x).shape() != [n, t, f] {
            return Err(Error::Dimension(format!(
                "model expects input [{n}, {t}, {f}], got {:?}",
                tape.value(x).shape()
            )));
        }
        let l = &self.layout;
        let gcn_out = if l.gcn.is_empty() {
            None
        } else {
            let ws: Vec<Var> = l.gcn.iter().map(|&id| tape.param(store, id)).collect();
            Some(gcn_stack_tape(tape, x, a_hat, &ws)?)
        };
        let rep = match (self.config.variant, gcn_out) {
            (Variant::GcnOnly, Some(g)) => tape.reshape(g, &[n, t * self.config.gcn.hidden_dim])?,
            (variant, g) => {
                let (pw, pb) = l.proj.expect("projection present for encoder variants");
                let raw = tape.reshape(x, &[n * t, f])?;
                let inp = match g {
                    Some(g) => {
                        let g = tape.reshape(g, &[n * t, self.config.gcn.hidden_dim])?;
                        tape.concat_last_dim(raw, g)?
                    }
                    None => raw,
                };
                let (pw, pb) = (tape.param(store, pw), tape.param(store, pb));
                let z = tape.matmul(inp, pw).map_err(|e| e.in_layer("projection"))?;
                let z = tape.add_row(z, pb).map_err(|e| e.in_layer("projection"))?;
                let enc = l.encoder.as_ref().expect("encoder present for encoder variants");
                let out = encoder_tape(tape, store, enc, &self.config.encoder, z, n, t)?;
                match (variant, l.fusion) {
                    (Variant::Hybrid, Some((fw, fb))) => {
                        let hs = tape.mean_groups(z, t)?;
                        let (fw, fb) = (tape.param(store, fw), tape.param(store, fb));
                        fusion_tape(tape, hs, out.pooled, fw, fb).map_err(|e| e.in_layer("fusion"))?
                    }
                    _ => out.pooled,
                }
            }
        };
        let (hw, hb) = (tape.param(store, l.head.0), tape.param(store, l.head.1));
        let y = tape.matmul(rep, hw).map_err(|e| e.in_layer("head"))?;
        tape.add_row(y, hb).map_err(|e| e.in_layer("head"))
    }

    /// Normalized-scale forecast `[N, H]` for one input window `[N, T, F]`.
    pub fn forward(&self, x: &Tensor, a_hat: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let av = tape.constant_ref(a_hat);
        let y = self.forward_tape(&mut tape, &self.store, xv, av)?;
        Ok(tape.value(y).clone())
    }

    /// Input window of sample `s` as an f64 tensor.
    pub fn input_tensor(&self, ws: &WindowSet, s: usize) -> Result<Tensor> {
        self.dims.check(ws)?;
        Tensor::new(
            vec![ws.nodes, ws.input_len, ws.features],
            ws.input(s).iter().map(|&v| v as f64).collect(),
        )
    }
}

fn layout_len(l: &Layout) -> usize {
    l.gcn.len()
        + l.proj.map_or(0, |_| 2)
        + l.encoder.as_ref().map_or(0, |e| 13 * e.blocks.len() + 2)
        + l.fusion.map_or(0, |_| 2)
        + 2
}

/// `g = σ([hs, ht]·w + b)` per node, then `g⊙hs + (1−g)⊙ht`, evaluated as
/// `ht + g⊙(hs − ht)`.
pub fn fusion_tape(tape: &mut Tape<'_>, hs: Var, ht: Var, w: Var, b: Var) -> Result<Var> {
    if tape.value(hs).shape() != tape.value(ht).shape() {
        return Err(Error::Dimension(format!(
            "fusion: spatial {:?} vs temporal {:?}",
            tape.value(hs).shape(),
            tape.value(ht).shape()
        )));
    }
    let both = tape.concat_last_dim(hs, ht)?;
    let logit = tape.matmul(both, w)?;
    let logit = tape.add_row(logit, b)?;
    let g = tape.sigmoid(logit)?;
    let diff = tape.sub(hs, ht)?;
    let mixed = tape.mul_col(diff, g)?;
    tape.add(ht, mixed)
}

/// Pure fusion: returns the fused `[N, d]` representation and the gate `[N, 1]`.
pub fn fusion_forward(hs: &Tensor, ht: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let (hv, tv) = (tape.constant(hs.clone()), tape.constant(ht.clone()));
    let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
    let out = fusion_tape(&mut tape, hv, tv, wv, bv)?;
    let both = tape.concat_last_dim(hv, tv)?;
    let logit = tape.matmul(both, wv)?;
    let logit = tape.add_row(logit, bv)?;
    let g = tape.sigmoid(logit)?;
    Ok((tape.value(out).clone(), tape.value(g).clone()))
}
