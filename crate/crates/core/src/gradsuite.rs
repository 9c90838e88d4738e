//! Finite-difference checks of every differentiable piece, from single
//! tape primitives up to the full model loss on a four-node toy graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::{gradcheck, ParamStore, Tape, Tensor, Var, GRADCHECK_STEP};
use crate::error::Result;
use crate::graph::normalize_adjacency;
use crate::hybrid::{fusion_tape, HybridModel, ModelConfig, ModelDims, Variant};
use crate::spatial::{gcn_stack_tape, GcnConfig};
use crate::temporal::{encoder_tape, EncoderConfig, EncoderParams};

/// Pass mark for the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteCase {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], away_from_zero: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            // keeps relu inputs clear of the kink
            if away_from_zero {
                v.signum() * (0.2 + 0.8 * v.abs())
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn target(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn case(name: &str, err: f64) -> SuiteCase {
    SuiteCase {
        name: name.to_string(),
        max_rel_error: err,
        passed: err < GRADCHECK_TOLERANCE,
    }
}

type Build = fn(&mut Tape<'_>, [Var; 5]) -> Result<Var>;

fn primitives(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let ids = [
        s.add("a", random(&mut rng, &[3, 4], false))?,
        s.add("b", random(&mut rng, &[4, 2], false))?,
        s.add("c", random(&mut rng, &[3, 4], true))?,
        s.add("row", random(&mut rng, &[4], false))?,
        s.add("col", random(&mut rng, &[3, 1], false))?,
    ];
    let cases: Vec<(&str, Build)> = vec![
        ("matmul", |t, [a, b, ..]| t.matmul(a, b)),
        ("add", |t, [a, _, c, ..]| t.add(a, c)),
        ("sub", |t, [a, _, c, ..]| t.sub(a, c)),
        ("scale", |t, [a, ..]| t.scale(a, -1.7)),
        ("relu", |t, [_, _, c, ..]| t.relu(c)),
        ("sigmoid", |t, [a, ..]| t.sigmoid(a)),
        ("softmax_rows", |t, [a, ..]| t.softmax_rows(a)),
        ("layer_norm_rows", |t, [a, ..]| t.layer_norm_rows(a)),
        ("concat_last_dim", |t, [a, _, c, ..]| t.concat_last_dim(a, c)),
        ("add_row", |t, [a, _, _, r, _]| t.add_row(a, r)),
        ("mul_row", |t, [a, _, _, r, _]| t.mul_row(a, r)),
        ("mul_col", |t, [a, _, _, _, k]| t.mul_col(a, k)),
        ("transpose", |t, [a, ..]| t.transpose(a)),
        ("reshape", |t, [a, b, ..]| {
            let r = t.reshape(a, &[6, 2])?;
            let bt = t.transpose(b)?;
            t.matmul(r, bt)
        }),
        ("mean_groups", |t, [a, ..]| {
            let r = t.reshape(a, &[6, 2])?;
            t.mean_groups(r, 3)
        }),
        ("select_rows", |t, [a, ..]| t.select_rows(a, vec![2, 0, 2])),
        ("attention", |t, [a, _, c, ..]| {
            let q = t.reshape(a, &[6, 2])?;
            let k = t.reshape(c, &[6, 2])?;
            let v = t.add(q, k)?;
            let k2 = t.scale(k, 0.5)?;
            t.attention(q, k2, v, 2, 2)
        }),
        ("sum", |t, [a, _, c, ..]| {
            let p = t.sub(a, c)?;
            let s = t.sum(p)?;
            let s2 = t.reshape(s, &[1, 1])?;
            t.matmul(s2, s2)
        }),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (k, (name, build)) in cases.into_iter().enumerate() {
        let tgt = target(&mut ChaCha8Rng::seed_from_u64(seed ^ (k as u64 + 1)), 64);
        let err = gradcheck(
            |t, st| {
                let vars = ids.map(|id| t.param(st, id));
                let y = build(t, vars)?;
                let n = t.value(y).len();
                t.masked_sse(y, &tgt[..n], &vec![true; n])
            },
            &s,
            GRADCHECK_STEP,
        )?;
        out.push(case(&format!("primitive {name}"), err));
    }
    Ok(out)
}

fn ring(n: usize) -> Tensor {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        let j = (i + 1) % n;
        a[i * n + j] = 1.0;
        a[j * n + i] = 1.0;
    }
    normalize_adjacency(&Tensor::new(vec![n, n], a).expect("square")).expect("valid adjacency")
}

fn gcn_layer(seed: u64) -> Result<SuiteCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = ring(4);
    let x = random(&mut rng, &[4, 3, 2], false);
    let mut store = ParamStore::new();
    let ids = GcnConfig {
        layers: 1,
        hidden_dim: 3,
    }
    .register(&mut store, 2, &mut rng)?;
    let tgt = target(&mut rng, 4 * 3 * 3);
    let err = gradcheck(
        |t, st| {
            let xv = t.constant(x.clone());
            let av = t.constant(a.clone());
            let w: Vec<Var> = ids.iter().map(|&id| t.param(st, id)).collect();
            let y = gcn_stack_tape(t, xv, av, &w)?;
            t.masked_sse(y, &tgt, &vec![true; tgt.len()])
        },
        &store,
        GRADCHECK_STEP,
    )?;
    Ok(case("gcn layer", err))
}

fn attention_block(seed: u64) -> Result<SuiteCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        blocks: 1,
        heads: 2,
        model_dim: 4,
        ffn_dim: 6,
        positional: true,
    };
    let mut store = ParamStore::new();
    let params = EncoderParams::register(&cfg, &mut store, &mut rng)?;
    let z = random(&mut rng, &[2 * 4, 4], false);
    let tgt = target(&mut rng, 2 * 4 * 4);
    let err = gradcheck(
        |t, st| {
            let zv = t.constant(z.clone());
            let out = encoder_tape(t, st, &params, &cfg, zv, 2, 4)?;
            t.masked_sse(out.sequence, &tgt, &vec![true; tgt.len()])
        },
        &store,
        GRADCHECK_STEP,
    )?;
    Ok(case("attention block", err))
}

fn fusion_layer(seed: u64) -> Result<SuiteCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let hs = s.add("hs", random(&mut rng, &[4, 3], false))?;
    let ht = s.add("ht", random(&mut rng, &[4, 3], false))?;
    let w = s.add("w", random(&mut rng, &[6, 1], false))?;
    let b = s.add("b", random(&mut rng, &[1], false))?;
    let tgt = target(&mut rng, 12);
    let err = gradcheck(
        |t, st| {
            let [h, g, wv, bv] = [hs, ht, w, b].map(|id| t.param(st, id));
            let y = fusion_tape(t, h, g, wv, bv)?;
            t.masked_sse(y, &tgt, &[true; 12])
        },
        &s,
        GRADCHECK_STEP,
    )?;
    Ok(case("fusion layer", err))
}

fn full_model(seed: u64, variant: Variant) -> Result<SuiteCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        variant,
        gcn: GcnConfig {
            layers: 2,
            hidden_dim: 3,
        },
        encoder: EncoderConfig {
            blocks: 1,
            heads: 2,
            model_dim: 4,
            ffn_dim: 6,
            positional: true,
        },
    };
    let dims = ModelDims {
        nodes: 4,
        input_len: 4,
        horizon: 2,
        features: 3,
    };
    let ids = (0..4).map(|i| format!("n{i}")).collect();
    let model = HybridModel::init(cfg, dims, ids, seed)?;
    let a = ring(4);
    let x = random(&mut rng, &[4, 4, 3], false);
    let tgt = target(&mut rng, 8);
    let mut mask = vec![true; 8];
    mask[3] = false;
    let err = gradcheck(
        |t, st| {
            let xv = t.constant(x.clone());
            let av = t.constant(a.clone());
            let y = model.forward_tape(t, st, xv, av)?;
            t.masked_sse(y, &tgt, &mask)
        },
        &model.store,
        GRADCHECK_STEP,
    )?;
    Ok(case(&format!("model loss {}", variant.name()), err))
}

/// Runs every check; a case fails when its error reaches the tolerance.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut out = primitives(seed)?;
    out.push(gcn_layer(seed + 1)?);
    out.push(attention_block(seed + 2)?);
    out.push(fusion_layer(seed + 3)?);
    for v in [Variant::Hybrid, Variant::GcnOnly, Variant::TransformerOnly] {
        out.push(full_model(seed + 4, v)?);
    }
    Ok(out)
}
