//! Finite-difference suite: every differentiable primitive on random points,
//! plus the full clip-to-loss composite at tiny dimensions. Double precision.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, BackboneVariant};
use crate::data::derive_rng;
use crate::error::Result;
use crate::heads::Head;
use crate::model::{ModelConfig, StepNet};
use crate::nn::Gru;
use crate::params::ParamStore;
use crate::spatial::{attend, SpatialConfig};
use crate::temporal::TemporalConfig;
use crate::tensor::{finite_diff_check, numel, Padding, Tape, Tensor, Var};

pub const EPS: f64 = 1e-5;
/// Random points per primitive.
pub const POINTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub points: usize,
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Primitive {
    name: &'static str,
    inputs: Vec<Vec<usize>>,
    build: Builder,
}

fn prim(
    name: &'static str,
    inputs: &[&[usize]],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> Primitive {
    Primitive {
        name,
        inputs: inputs.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

/// Values in `±[0.2, 1]`, away from the kink of `relu`.
fn draw(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn primitives() -> Vec<Primitive> {
    vec![
        prim("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        prim("transpose", &[&[3, 4]], |t, v| t.transpose(v[0])),
        prim("affine", &[&[3, 4], &[4, 2], &[2]], |t, v| t.affine(v[0], v[1], v[2])),
        prim("add", &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1])),
        prim("sub", &[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1])),
        prim("mul", &[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1])),
        prim("scale", &[&[5]], |t, v| t.scale(v[0], -1.7)),
        prim("sigmoid", &[&[2, 3]], |t, v| t.sigmoid(v[0])),
        prim("tanh", &[&[2, 3]], |t, v| t.tanh(v[0])),
        prim("relu", &[&[2, 3]], |t, v| t.relu(v[0])),
        prim("softmax_rows", &[&[3, 4]], |t, v| t.softmax_rows(v[0])),
        prim("mean", &[&[2, 3, 4]], |t, v| t.mean(v[0], &[0, 2])),
        prim("narrow", &[&[4, 3]], |t, v| t.narrow(v[0], 0, 1, 2)),
        prim("concat", &[&[2, 3], &[1, 3]], |t, v| t.concat(&[v[0], v[1]], 0)),
        prim("reshape", &[&[2, 3]], |t, v| t.reshape(v[0], &[3, 2])),
        prim("sum", &[&[2, 3]], |t, v| t.sum(v[0])),
        prim("cross_entropy", &[&[5]], |t, v| t.cross_entropy(v[0], 3)),
        prim("conv2d", &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], |t, v| {
            t.conv2d(v[0], v[1], v[2], Padding::Zero)
        }),
        prim("conv2d_circular", &[&[2, 2, 4, 5], &[3, 2, 3, 3], &[3]], |t, v| {
            t.conv2d(v[0], v[1], v[2], Padding::Circular)
        }),
        prim("avg_pool", &[&[2, 3, 4, 6]], |t, v| t.avg_pool(v[0], 2)),
        prim("temporal_shift", &[&[4, 8, 2, 2]], |t, v| t.temporal_shift(v[0], 2)),
        prim(
            "attention",
            &[&[3, 4], &[2, 4], &[3, 4], &[2, 4], &[3, 4], &[3, 4]],
            |t, v| Ok(attend(t, v[0], &[v[1], v[2]], &[v[3], v[4]], v[5])?.output),
        ),
    ]
}

/// Scalar probe `Σ out ⊙ r` so every output coordinate contributes.
fn probe(tape: &mut Tape<f64>, out: Var, weights: &[f64]) -> Result<Var> {
    if tape.shape(out) == [1] {
        return Ok(out);
    }
    let r = tape.constant(&Tensor::new(tape.shape(out).to_vec(), weights.to_vec())?);
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

fn check_primitive(p: &Primitive, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let sizes: Vec<usize> = p.inputs.iter().map(|s| numel(s)).collect();
    let total: usize = sizes.iter().sum();
    let eval = |x: &[f64], weights: &[f64], grad: bool| -> Result<(f64, Vec<f64>, Vec<usize>)> {
        let mut tape = Tape::new();
        let mut vars = Vec::new();
        let mut off = 0;
        for (shape, &n) in p.inputs.iter().zip(&sizes) {
            vars.push(tape.param(&Tensor::new(shape.clone(), x[off..off + n].to_vec())?));
            off += n;
        }
        let out = (p.build)(&mut tape, &vars)?;
        let out_shape = tape.shape(out).to_vec();
        if weights.is_empty() {
            return Ok((0.0, Vec::new(), out_shape));
        }
        let s = probe(&mut tape, out, weights)?;
        let value = tape.item(s);
        let mut g = Vec::new();
        if grad {
            let grads = tape.backward(s)?;
            for v in &vars {
                g.extend(grads.get_or_zero(*v).into_data());
            }
        }
        Ok((value, g, out_shape))
    };
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let x = draw(rng, total);
        let (_, _, out_shape) = eval(&x, &[], false)?;
        let weights = draw(rng, numel(&out_shape));
        let (_, analytic, _) = eval(&x, &weights, true)?;
        let r = finite_diff_check(|y| Ok(eval(y, &weights, false)?.0), &analytic, &x, EPS)?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(CheckReport {
        name: p.name.to_string(),
        max_rel_error: worst,
        coordinates: total,
        points: POINTS,
    })
}

fn check_gru(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let mut store = ParamStore::<f64>::seeded(rng.random());
    let gru = Gru::new(&mut store, "gru", 3, 4);
    let seq = Tensor::new(vec![5, 3], draw(rng, 15))?;
    let weights = draw(rng, 20);
    let eval = |store: &ParamStore<f64>, grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape)?;
        let x = tape.constant(&seq);
        let h = gru.sequence(&mut tape, &p, x)?;
        let s = probe(&mut tape, h, &weights)?;
        let g = if grad {
            store.flat_gradient(&p, &tape.backward(s)?)
        } else {
            Vec::new()
        };
        Ok((tape.item(s), g))
    };
    let point = store.flatten();
    let (_, analytic) = eval(&store, true)?;
    let mut probe_store = store.clone();
    let r = finite_diff_check(
        |y| {
            probe_store.unflatten(y)?;
            Ok(eval(&probe_store, false)?.0)
        },
        &analytic,
        &point,
        EPS,
    )?;
    Ok(CheckReport {
        name: "gru_sequence".into(),
        max_rel_error: r.max_rel_error,
        coordinates: r.coordinates,
        points: 1,
    })
}

/// Tiny full model: T=4, C=8 on a 4×4 map, 3 classes, segments (3, 2).
pub fn tiny_model_config() -> ModelConfig {
    let backbone = BackboneConfig {
        variant: BackboneVariant::ShiftCnn,
        in_channels: 3,
        widths: vec![8, 8],
        shift_fraction: 0.125,
        output_size: [4, 4],
        kernel: 3,
        padding: Padding::Zero,
    };
    let mut temporal = TemporalConfig::for_channels(8);
    temporal.segments = 3;
    temporal.segment_len = 2;
    ModelConfig {
        spatial: Some(SpatialConfig::for_channels(8)),
        temporal: Some(temporal),
        fuse_width: 8,
        num_classes: 3,
        backbone,
    }
}

/// Every trainable parameter of the full model against `clip → total_loss`.
pub fn check_composite(seed: u64) -> Result<CheckReport> {
    let cfg = tiny_model_config();
    let mut store = ParamStore::<f64>::seeded(seed);
    let net = StepNet::new(&mut store, &cfg)?;
    let mut rng = derive_rng("gradcheck-clip", &[seed]);
    let clip = Tensor::new(
        vec![4, 3, 16, 16],
        (0..4 * 3 * 256).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;
    let label = 1;
    let eval = |store: &ParamStore<f64>, grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape)?;
        let x = tape.constant(&clip);
        let (fwd, loss) = net.loss(&mut tape, &p, x, label)?;
        debug_assert_eq!(fwd.logits.len(), Head::ALL.len());
        let g = if grad {
            store.flat_gradient(&p, &tape.backward(loss)?)
        } else {
            Vec::new()
        };
        Ok((tape.item(loss), g))
    };
    let point = store.flatten();
    let (_, analytic) = eval(&store, true)?;
    let mut probe_store = store.clone();
    let r = finite_diff_check(
        |y| {
            probe_store.unflatten(y)?;
            Ok(eval(&probe_store, false)?.0)
        },
        &analytic,
        &point,
        EPS,
    )?;
    Ok(CheckReport {
        name: "stepnet_total_loss".into(),
        max_rel_error: r.max_rel_error,
        coordinates: r.coordinates,
        points: 1,
    })
}

/// Runs the whole suite with a fixed seed.
pub fn run_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = derive_rng("gradcheck", &[seed]);
    let mut out = primitives()
        .iter()
        .map(|p| check_primitive(p, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    out.push(check_gru(&mut rng)?);
    out.push(check_composite(seed)?);
    Ok(out)
}
