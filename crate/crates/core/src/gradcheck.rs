//! Central finite-difference oracle for the autodiff engine.

use crate::autodiff::{Graph, NodeId, Segment};
use crate::corpus::{Token, BOS};
use crate::error::{ensure, Error, Result};
use crate::lm::graph::{bind, lm_loss, Batch};
use crate::lm::{ModelDims, ModelParams};
use crate::rng::Rng;
use crate::sae::SaeParams;
use crate::tensor::Tensor;
use crate::unlearn::{hinge_node, name_pre_activation};

/// Compares reverse-mode gradients of `f` at `point` with central differences
/// on a five-point stencil.
///
/// `f` receives a fresh graph and the node holding the (possibly perturbed)
/// point, and must return a scalar node. The result is the maximum over
/// coordinates of `|g_ad − g_fd| / (|g_fd| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, NodeId) -> NodeId,
{
    ensure!(step > 0.0, "finite-difference step must be positive, got {step}");
    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.param(p);
        let out = f(&mut g, x);
        let v = g.value(out);
        ensure!(v.len() == 1, "function must return a scalar, got shape {:?}", v.shape());
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::numeric("finite_diff_check", format!("f returned {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let x = g.param(point.clone());
    let out = f(&mut g, x);
    let grads = g.backward(out)?;
    let analytic = grads
        .get(x)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let at = |offset: f64| {
            let mut p = point.clone();
            p.data_mut()[i] += offset;
            eval(p)
        };
        // five-point stencil, O(h⁴) truncation error
        let fd = (8.0 * (at(step)? - at(-step)?) - (at(2.0 * step)? - at(-2.0 * step)?)) / (12.0 * step);
        let err = (analytic[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Worst relative error of one case over its sampled points.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub points: usize,
    pub worst: f64,
}

type Build = Box<dyn Fn(&mut Graph<f64>, NodeId) -> NodeId>;

struct OpCase {
    name: &'static str,
    shape: Vec<usize>,
    step: f64,
    /// Points closer than this to a kink are redrawn.
    kink: Option<fn(f64) -> f64>,
    build: Build,
}

fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() * scale).collect()).expect("shape matches data")
}

/// Contracts a node with fixed random weights so no coordinate's gradient
/// cancels by symmetry.
fn weighted_sum(g: &mut Graph<f64>, x: NodeId, seed: u64) -> NodeId {
    let mut rng = Rng::new(seed);
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(random_tensor(&mut rng, &shape, 1.0));
    let p = g.mul(x, w);
    g.sum(p)
}

/// The op cases plus the jump_relu thresholds, which points must avoid.
fn op_cases() -> (Vec<OpCase>, Vec<f64>) {
    let mut rng = Rng::new(23);
    let other = random_tensor(&mut rng, &[4, 3], 1.0);
    let row = random_tensor(&mut rng, &[4], 1.0);
    let wk = random_tensor(&mut rng, &[4, 4], 0.8);
    let wv = random_tensor(&mut rng, &[4, 4], 0.8);
    let log_th = random_tensor(&mut rng, &[4], 0.3);
    let th: Vec<f64> = log_th.data().iter().map(|v| v.exp()).collect();
    let case = |name, shape: &[usize], step, build: Build| OpCase {
        name,
        shape: shape.to_vec(),
        step,
        kink: None,
        build,
    };
    let o = other.clone();
    let o2 = other.clone();
    let o3 = other.clone();
    let o4 = other.clone();
    let o5 = other.clone();
    let o6 = other.clone();
    let o7 = other.clone();
    let r = row.clone();
    let mut cases = vec![
        case("gelu", &[3, 4], 1e-3, Box::new(|g, x| g.gelu(x))),
        case("softplus", &[3, 4], 1e-3, Box::new(|g, x| g.softplus(x))),
        case("scale", &[5], 1e-3, Box::new(|g, x| g.scale(x, -1.7))),
        case("add_scalar", &[5], 1e-3, Box::new(|g, x| g.add_scalar(x, 0.3))),
        case("mul", &[4, 3], 1e-3, Box::new(move |g, x| {
            let b = g.constant(o6.clone());
            let y = g.mul(x, b);
            g.mul(y, x)
        })),
        case("add", &[4, 3], 1e-3, Box::new(move |g, x| {
            let b = g.constant(o7.clone());
            let y = g.add(x, b);
            g.mul(y, y)
        })),
        case("sub", &[4, 3], 1e-3, Box::new(move |g, x| {
            let b = g.constant(o5.clone());
            let y = g.sub(b, x);
            g.mul(y, y)
        })),
        case("matmul_left", &[2, 4], 1e-3, Box::new(move |g, x| {
            let b = g.constant(o.clone());
            g.matmul(x, b)
        })),
        case("matmul_right", &[3, 2], 1e-3, Box::new(move |g, x| {
            let a = g.constant(o2.clone());
            g.matmul(a, x)
        })),
        case("matmul_nt_right", &[5, 3], 1e-3, Box::new(move |g, x| {
            let a = g.constant(o3.clone());
            g.matmul_nt(a, x)
        })),
        case("matmul_nt_left", &[2, 3], 1e-3, Box::new(move |g, x| {
            let b = g.constant(o4.clone());
            g.matmul_nt(x, b)
        })),
        case("add_row_matrix", &[3, 4], 1e-3, Box::new(move |g, x| {
            let b = g.constant(r.clone());
            g.add_row(x, b)
        })),
        case("add_row_bias", &[4], 1e-3, Box::new(move |g, x| {
            let a = g.constant(other.clone().reshape(&[3, 4]).expect("12 elements"));
            g.add_row(a, x)
        })),
        case("sum", &[3, 2], 1e-3, Box::new(|g, x| {
            let s = g.sum(x);
            g.mul(s, s)
        })),
        case("mean", &[3, 2], 1e-3, Box::new(|g, x| {
            let s = g.mean(x);
            g.mul(s, s)
        })),
        case("gather_rows", &[4, 3], 1e-3, Box::new(|g, x| g.gather_rows(x, &[3, 0, 3]))),
        case("select_cols", &[2, 5], 1e-3, Box::new(|g, x| g.select_cols(x, &[4, 1, 1]))),
        case("causal_attention", &[5, 4], 1e-3, Box::new(move |g, x| {
            let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }];
            let wk = g.constant(wk.clone());
            let wv = g.constant(wv.clone());
            let k = g.matmul(x, wk);
            let v = g.matmul(x, wv);
            g.causal_attention(x, k, v, &segs)
        })),
        case("weighted_nll", &[3, 6], 1e-3, Box::new(|g, x| g.weighted_nll(x, &[1, 5, 0], &[1.0, 0.0, -0.5]))),
        case("token_log_prob", &[3, 6], 1e-3, Box::new(|g, x| g.token_log_prob(x, &[2, 2, 4]))),
    ];
    cases.push(OpCase {
        name: "relu",
        shape: vec![8],
        step: 1e-5,
        kink: Some(|v| v.abs()),
        build: Box::new(|g, x| g.relu(x)),
    });
    // The threshold receives a pseudo-gradient by design, so only z is checked.
    cases.push(OpCase {
        name: "jump_relu",
        shape: vec![3, 4],
        step: 1e-5,
        kink: None,
        build: Box::new(move |g, x| {
            let lt = g.constant(log_th.clone());
            g.jump_relu(x, lt, 0.1)
        }),
    });
    (cases, th)
}

fn near_threshold(point: &Tensor<f64>, th: &[f64]) -> bool {
    point.data().chunks(th.len()).any(|r| r.iter().zip(th).any(|(z, t)| (z - t).abs() < 1e-3))
}

fn run_op_case(case: &OpCase, points: usize, seed: u64, th: &[f64]) -> Result<CaseReport> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < points {
        let point = random_tensor(&mut rng, &case.shape, 1.0);
        if let Some(dist) = case.kink {
            if point.data().iter().any(|&v| dist(v) < 1e-3) {
                continue;
            }
        }
        if case.name == "jump_relu" && near_threshold(&point, th) {
            continue;
        }
        let err = finite_diff_check(
            |g, x| {
                let y = (case.build)(g, x);
                weighted_sum(g, y, 99)
            },
            &point,
            case.step,
        )?;
        worst = worst.max(err);
        done += 1;
    }
    Ok(CaseReport {
        name: case.name.to_string(),
        points,
        worst,
    })
}

fn small_dims() -> ModelDims {
    ModelDims {
        vocab: 12,
        d: 8,
        layers: 2,
        maxlen: 10,
    }
}

/// A random model with non-zero biases, so every gradient is generic.
fn random_model(dims: ModelDims, seed: u64) -> Result<ModelParams<f64>> {
    let mut p = ModelParams::<f64>::init(dims, seed)?;
    let mut rng = Rng::new(seed + 100);
    for t in p.tensors.iter_mut() {
        if t.rank() == 1 {
            for v in t.data_mut() {
                *v = rng.normal() * 0.1;
            }
        }
    }
    Ok(p)
}

/// Worst error over every parameter tensor of a model-level loss.
fn model_case(
    name: &str,
    points: usize,
    mut accept: impl FnMut(&ModelParams<f64>) -> bool,
    loss: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
) -> Result<CaseReport> {
    let dims = small_dims();
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut seed = 0u64;
    while done < points {
        let base = random_model(dims, seed)?;
        seed += 1;
        if !accept(&base) {
            continue;
        }
        for idx in 0..base.tensors.len() {
            let err = finite_diff_check(
                |g, leaf| {
                    let mut nodes = bind(g, &base, false);
                    nodes[idx] = leaf;
                    loss(g, &nodes)
                },
                &base.tensors[idx],
                1e-3,
            )?;
            worst = worst.max(err);
        }
        done += 1;
    }
    Ok(CaseReport {
        name: name.to_string(),
        points,
        worst,
    })
}

fn test_sae(d: usize, m: usize, layer: usize) -> SaeParams {
    let mut rng = Rng::new(41);
    let f = |rng: &mut Rng, shape: &[usize], s: f64| {
        let t = random_tensor(rng, shape, s);
        Tensor::new(shape.to_vec(), t.data().iter().map(|&v| v as f32).collect()).expect("shape matches data")
    };
    SaeParams {
        w_enc: f(&mut rng, &[d, m], 1.5),
        b_enc: f(&mut rng, &[m], 0.5),
        w_dec: f(&mut rng, &[m, d], 0.3),
        b_dec: Tensor::zeros(&[d]),
        threshold: Tensor::new(vec![m], vec![0.1; m]).expect("shape matches data"),
        layer,
    }
}

/// Finite-difference sweep over every differentiable operation, the LM
/// cross-entropy and the recognition hinge, `points` random points each.
pub fn suite(points: usize) -> Result<Vec<CaseReport>> {
    ensure!(points >= 1, "gradient suite needs at least one point per case");
    let mut out = Vec::new();
    let (cases, th) = op_cases();
    for (i, case) in cases.iter().enumerate() {
        out.push(run_op_case(case, points, 7919 * (i as u64 + 1), &th)?);
    }

    let dims = small_dims();
    let x: [Token; 5] = [BOS, 4, 9, 2, 7];
    let batch = Batch::new(&[&x, &x[..3]], &dims)?;
    out.push(model_case("lm_cross_entropy", points, |_| true, |g, nodes| lm_loss(g, nodes, &dims, &batch))?);

    let sae = test_sae(dims.d, 16, dims.layers);
    let known = [0usize, 3, 5, 8, 11];
    let unknown = [1usize, 4, 9, 14];
    let c = 1.0;
    let name = [5, 6];
    // no selected latent may sit within 1e-2 of its hinge kink
    let away = |p: &ModelParams<f64>| {
        let p32: ModelParams = p.cast();
        let a = crate::lm::last_token_activation(&p32, &name, sae.layer).expect("valid name");
        let z = sae.encode_pre(&a).expect("matching width");
        known.iter().all(|&j| (z[j] as f64 + c).abs() > 1e-2) && unknown.iter().all(|&j| (z[j] as f64 - c).abs() > 1e-2)
    };
    out.push(model_case("recognition_hinge", points, away, |g, nodes| {
        let z = name_pre_activation(g, nodes, &dims, &sae, name).expect("valid layer");
        hinge_node(g, z, &known, &unknown, c)
    })?);
    Ok(out)
}
