//! Pre-norm self-attention encoder over each node's sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::{tensor, uniform_init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub blocks: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    /// Sinusoidal positional encodings; disabling them makes the blocks
    /// permutation-equivariant in time.
    pub positional: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            heads: 4,
            model_dim: 64,
            ffn_dim: 128,
            positional: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.heads == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Validation(format!("encoder counts must be ≥ 1, got {self:?}")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Validation(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Weight(usize),
    Zero,
    One,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    pub blocks: Vec<BlockParams>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
}

impl EncoderParams {
    fn build(cfg: &EncoderConfig, mut make: impl FnMut(&str, &[usize], Init) -> Result<ParamId>) -> Result<Self> {
        cfg.validate()?;
        let (d, f) = (cfg.model_dim, cfg.ffn_dim);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let p = |s: &str| format!("enc.b{b}.{s}");
            blocks.push(BlockParams {
                ln1_gain: make(&p("ln1.g"), &[d], Init::One)?,
                ln1_bias: make(&p("ln1.b"), &[d], Init::Zero)?,
                wq: make(&p("wq"), &[d, d], Init::Weight(d))?,
                wk: make(&p("wk"), &[d, d], Init::Weight(d))?,
                wv: make(&p("wv"), &[d, d], Init::Weight(d))?,
                wo: make(&p("wo"), &[d, d], Init::Weight(d))?,
                bo: make(&p("bo"), &[d], Init::Zero)?,
                ln2_gain: make(&p("ln2.g"), &[d], Init::One)?,
                ln2_bias: make(&p("ln2.b"), &[d], Init::Zero)?,
                ff1_w: make(&p("ff1.w"), &[d, f], Init::Weight(d))?,
                ff1_b: make(&p("ff1.b"), &[f], Init::Zero)?,
                ff2_w: make(&p("ff2.w"), &[f, d], Init::Weight(f))?,
                ff2_b: make(&p("ff2.b"), &[d], Init::Zero)?,
            });
        }
        Ok(Self {
            blocks,
            final_gain: make("enc.ln.g", &[d], Init::One)?,
            final_bias: make("enc.ln.b", &[d], Init::Zero)?,
        })
    }

    /// Adds freshly initialized encoder parameters to `store`.
    pub fn register<R: Rng>(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        Self::build(cfg, |name, shape, init| {
            let t = match init {
                Init::Weight(fan_in) => uniform_init(rng, shape, fan_in),
                Init::Zero => Tensor::zeros(shape),
                Init::One => Tensor::filled(shape, 1.0),
            };
            store.add(name, t)
        })
    }

    /// Finds the encoder parameters of a restored store by name.
    pub fn lookup(cfg: &EncoderConfig, store: &ParamStore) -> Result<Self> {
        Self::build(cfg, |name, shape, _| lookup_param(store, name, shape))
    }
}

pub(crate) fn lookup_param(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Incompatible(format!("parameter {name} missing")))?;
    if store.get(id).shape() != shape {
        return Err(Error::Incompatible(format!(
            "parameter {name} has shape {:?}, expected {shape:?}",
            store.get(id).shape()
        )));
    }
    Ok(id)
}

/// `softmax(Q·Kᵀ/√d_k)·V` for a single head.
pub fn scaled_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.shape().len() != 2
        || k.shape().len() != 2
        || v.shape().len() != 2
        || q.cols() != k.cols()
        || k.rows() != v.rows()
    {
        return Err(Error::Dimension(format!(
            "attention: Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let scores = tensor::scale(
        &tensor::matmul(q, &tensor::transpose(k)?)?,
        1.0 / (q.cols() as f64).sqrt(),
    )?;
    tensor::matmul(&tensor::softmax_rows(&scores)?, v)
}

/// Sinusoidal encodings `[T, d]`: even columns sin, odd columns cos, with
/// wavelengths growing geometrically from 2π to 10000·2π.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64 * 2.0;
            let angle = pos as f64 / 10000f64.powf(pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("shape and data agree")
}

pub struct EncoderOutput {
    /// `[N·T, d]` after the final layer norm, before pooling.
    pub sequence: Var,
    /// `[N, d]`, the final time step of each node.
    pub pooled: Var,
    /// Attention nodes, one per block; see [`Tape::attention_probs`].
    pub attention: Vec<Var>,
}

fn affine_norm(tape: &mut Tape<'_>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layer_norm_rows(x)?;
    let g = tape.mul_row(n, gain)?;
    tape.add_row(g, bias)
}

fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// Runs the encoder on `z: [N·T, d]` holding `nodes` sequences of `steps`.
pub fn encoder_tape<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    z: Var,
    nodes: usize,
    steps: usize,
) -> Result<EncoderOutput> {
    let d = cfg.model_dim;
    if tape.value(z).shape() != [nodes * steps, d] {
        return Err(Error::Dimension(format!(
            "encoder expects [{}, {d}], got {:?}",
            nodes * steps,
            tape.value(z).shape()
        )));
    }
    let mut x = z;
    if cfg.positional {
        let pe = positional_encoding(steps, d);
        let mut tiled = Vec::with_capacity(nodes * steps * d);
        for _ in 0..nodes {
            tiled.extend_from_slice(pe.data());
        }
        let pe = tape.constant(Tensor::new(vec![nodes * steps, d], tiled)?);
        x = tape.add(x, pe)?;
    }
    let mut attention = Vec::with_capacity(params.blocks.len());
    for (i, b) in params.blocks.iter().enumerate() {
        let mut block = |tape: &mut Tape<'p>| -> Result<Var> {
            let g1 = tape.param(store, b.ln1_gain);
            let b1 = tape.param(store, b.ln1_bias);
            let a = affine_norm(tape, x, g1, b1)?;
            let wq = tape.param(store, b.wq);
            let wk = tape.param(store, b.wk);
            let wv = tape.param(store, b.wv);
            let q = tape.matmul(a, wq)?;
            let k = tape.matmul(a, wk)?;
            let v = tape.matmul(a, wv)?;
            let att = tape.attention(q, k, v, nodes, cfg.heads)?;
            attention.push(att);
            let wo = tape.param(store, b.wo);
            let bo = tape.param(store, b.bo);
            let o = linear(tape, att, wo, Some(bo))?;
            let x1 = tape.add(x, o)?;
            let g2 = tape.param(store, b.ln2_gain);
            let b2 = tape.param(store, b.ln2_bias);
            let c = affine_norm(tape, x1, g2, b2)?;
            let w1 = tape.param(store, b.ff1_w);
            let bb1 = tape.param(store, b.ff1_b);
            let h = linear(tape, c, w1, Some(bb1))?;
            let h = tape.relu(h)?;
            let w2 = tape.param(store, b.ff2_w);
            let bb2 = tape.param(store, b.ff2_b);
            let f = linear(tape, h, w2, Some(bb2))?;
            tape.add(x1, f)
        };
        x = block(tape).map_err(|e| e.in_layer(&format!("encoder block {i}")))?;
    }
    let g = tape.param(store, params.final_gain);
    let b = tape.param(store, params.final_bias);
    let sequence = affine_norm(tape, x, g, b).map_err(|e| e.in_layer("encoder final norm"))?;
    let last: Vec<usize> = (0..nodes).map(|i| i * steps + steps - 1).collect();
    let pooled = tape.select_rows(sequence, last)?;
    Ok(EncoderOutput {
        sequence,
        pooled,
        attention,
    })
}

/// Evaluates the encoder on `z: [N, T, d]` and returns `[N, d]`.
pub fn encoder_forward(z: &Tensor, store: &ParamStore, params: &EncoderParams, cfg: &EncoderConfig) -> Result<Tensor> {
    let &[n, t, d] = z.shape() else {
        return Err(Error::Dimension(format!(
            "encoder expects [N, T, d], got {:?}",
            z.shape()
        )));
    };
    let mut tape = Tape::new();
    let zv = tape.constant(z.reshape(&[n * t, d])?);
    let out = encoder_tape(&mut tape, store, params, cfg, zv, n, t)?;
    Ok(tape.value(out.pooled).clone())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffnum::{gradcheck, GRADCHECK_STEP};

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn toy(positional: bool, seed: u64) -> (EncoderConfig, ParamStore, EncoderParams) {
        let cfg = EncoderConfig {
            blocks: 2,
            heads: 2,
            model_dim: 4,
            ffn_dim: 6,
            positional,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = EncoderParams::register(&cfg, &mut store, &mut rng).unwrap();
        // move layer-norm affine terms off their trivial values so they are exercised
        for id in store.ids().collect::<Vec<_>>() {
            if store.names()[id.index()].contains(".g") || store.names()[id.index()].contains("ln.b") {
                for v in store.get_mut(id).data_mut() {
                    *v += 0.3 * rng.random_range(-1.0..1.0);
                }
            }
        }
        (cfg, store, params)
    }

    #[test]
    fn attention_examples() {
        let v = Tensor::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let q = Tensor::from_rows(&[vec![0.3]]).unwrap();
        let k = Tensor::from_rows(&[vec![-1.2]]).unwrap();
        assert_eq!(scaled_attention(&q, &k, &v).unwrap(), v);

        let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 1.0]]).unwrap();
        let out = scaled_attention(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3, 3]), &v).unwrap();
        for r in 0..2 {
            assert!((out.at(r, 0) - 3.0).abs() < 1e-12);
            assert!((out.at(r, 1) - 3.0).abs() < 1e-12);
        }

        let q = Tensor::from_rows(&[vec![0.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![0.0], vec![3f64.ln()]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0], vec![5.0]]).unwrap();
        // q = 0 gives equal scores; use q = 1 to get weights 1:3
        let q1 = Tensor::from_rows(&[vec![1.0]]).unwrap();
        assert!((scaled_attention(&q, &k, &v).unwrap().item() - 3.0).abs() < 1e-12);
        assert!((scaled_attention(&q1, &k, &v).unwrap().item() - 4.0).abs() < 1e-12);

        assert!(scaled_attention(
            &Tensor::zeros(&[1, 2]),
            &Tensor::zeros(&[2, 3]),
            &Tensor::zeros(&[2, 1])
        )
        .is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig {
            model_dim: 6,
            heads: 4,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(EncoderConfig {
            blocks: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        EncoderConfig::default().validate().unwrap();
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (cfg, store, params) = toy(true, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = random(&mut rng, &[3 * 5, 4], 1.0);
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let out = encoder_tape(&mut tape, &store, &params, &cfg, zv, 3, 5).unwrap();
        assert_eq!(out.attention.len(), 2);
        for &a in &out.attention {
            let probs = tape.attention_probs(a).unwrap();
            assert_eq!(probs.len(), 3 * 2 * 5 * 5);
            for row in probs.chunks(5) {
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(tape.value(out.pooled).shape(), &[3, 4]);
    }

    #[test]
    fn constant_sequences_without_positions_are_time_constant() {
        let (cfg, store, params) = toy(false, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let token = random(&mut rng, &[1, 4], 1.0);
        let z = Tensor::new(vec![6, 4], token.data().repeat(6)).unwrap();
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let out = encoder_tape(&mut tape, &store, &params, &cfg, zv, 1, 6).unwrap();
        let seq = tape.value(out.sequence);
        for r in 1..6 {
            for c in 0..4 {
                assert!((seq.at(r, c) - seq.at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn content_shift_changes_output() {
        let (cfg, store, params) = toy(true, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z = random(&mut rng, &[1, 5, 4], 1.0);
        let base = encoder_forward(&z, &store, &params, &cfg).unwrap();
        let mut shifted = z.data()[4..].to_vec();
        shifted.extend_from_slice(&z.data()[..4]);
        let moved = encoder_forward(&Tensor::new(vec![1, 5, 4], shifted).unwrap(), &store, &params, &cfg).unwrap();
        assert_ne!(base, moved);
    }

    #[test]
    fn large_inputs_stay_finite() {
        let (cfg, store, params) = toy(true, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z = random(&mut rng, &[2, 4, 4], 1e3);
        let out = encoder_forward(&z, &store, &params, &cfg).unwrap();
        assert!(out.is_finite());
    }

    #[test]
    fn toy_encoder_passes_gradcheck() {
        let (cfg, store, params) = toy(true, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let z = random(&mut rng, &[2 * 4, 4], 1.0);
        let target: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = gradcheck(
            |tape, st| {
                let zv = tape.constant(z.clone());
                let out = encoder_tape(tape, st, &params, &cfg, zv, 2, 4)?;
                tape.masked_sse(out.pooled, &target, &[true; 8])
            },
            &store,
            GRADCHECK_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "encoder gradcheck {err}");
    }

    #[test]
    fn lookup_finds_registered_parameters() {
        let (cfg, store, params) = toy(true, 6);
        assert_eq!(EncoderParams::lookup(&cfg, &store).unwrap(), params);
        let bigger = EncoderConfig { model_dim: 8, ..cfg };
        assert!(matches!(
            EncoderParams::lookup(&bigger, &store),
            Err(Error::Incompatible(_))
        ));
    }

    mod props {
        use proptest::prelude::*;
        use rand::seq::SliceRandom;
        use rand::SeedableRng;

        use super::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn time_permutation_equivariance_without_positions(seed in any::<u64>(), steps in 2usize..7) {
                let (cfg, store, params) = toy(false, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                let z = random(&mut rng, &[2 * steps, 4], 1.0);
                let mut perm: Vec<usize> = (0..steps).collect();
                perm.shuffle(&mut rng);
                let mut pz = Vec::with_capacity(z.len());
                for node in 0..2 {
                    for &p in &perm {
                        pz.extend_from_slice(z.row(node * steps + p));
                    }
                }
                let run = |z: Tensor| {
                    let mut tape = Tape::new();
                    let zv = tape.constant(z);
                    let out = encoder_tape(&mut tape, &store, &params, &cfg, zv, 2, steps).unwrap();
                    tape.value(out.sequence).clone()
                };
                let base = run(z.clone());
                let permuted = run(Tensor::new(vec![2 * steps, 4], pz).unwrap());
                for node in 0..2 {
                    for (i, &p) in perm.iter().enumerate() {
                        for c in 0..4 {
                            let d = permuted.at(node * steps + i, c) - base.at(node * steps + p, c);
                            prop_assert!(d.abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}
