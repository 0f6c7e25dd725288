//! Finite-difference gradient cases: every tape op, each loss term, and the
//! total loss through matching and the adaptation layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semflow_core::autodiff::check::{gradient_check, random_tensor};
use semflow_core::autodiff::{Graph, Tensor, Var};
use semflow_core::features::adapt_graph;
use semflow_core::losses::{loss_nodes, LossMasks, LossNodes};
use semflow_core::matching::graph as match_graph;
use semflow_core::{ArgmaxMode, LossWeights, Mask, MatchConfig, Result};

pub const SEEDS: u64 = 100;
pub const TOL: f64 = 1e-4;

type Func = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub f: Func,
}

pub struct Case {
    pub name: String,
    pub step: f64,
    pub build: Box<dyn Fn(u64) -> Instance>,
}

pub struct Outcome {
    pub worst: f64,
    pub worst_seed: u64,
    /// Some seed produced a non-zero gradient (guards against vacuous passes).
    pub nonzero: bool,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.nonzero && self.worst < TOL
    }
}

pub fn run(case: &Case) -> Outcome {
    let mut out = Outcome { worst: 0.0, worst_seed: 0, nonzero: false };
    for seed in 0..SEEDS {
        let inst = (case.build)(seed);
        let r = gradient_check(&inst.f, &inst.inputs, case.step).unwrap();
        out.nonzero |= r.analytic.iter().any(|t| t.data().iter().any(|v| *v != 0.0));
        if r.max_rel_error > out.worst || r.max_rel_error.is_nan() {
            out.worst = r.max_rel_error;
            out.worst_seed = seed;
        }
    }
    out
}

/// `sum(y ⊙ probe)` with a fixed probe, so every output element's gradient
/// is exercised with a distinct weight.
fn probe(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i * 7919 % 23) as f64 - 11.0) / 7.0).collect();
    let p = g.constant(Tensor::new(&shape, data)?);
    let m = g.mul(y, p)?;
    Ok(g.sum(m))
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Flows whose sampling positions stay clear of integer cell boundaries,
/// where bilinear interpolation has kinks.
fn off_grid_flow(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let data = (0..h * w * 2).map(|_| rng.gen_range(-2i32..=1) as f64 + rng.gen_range(0.1..0.9)).collect();
    Tensor::new(&[h, w, 2], data).unwrap()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(2..6), rng.gen_range(2..6))
}

fn case<I, F>(name: &str, step: f64, inputs: I, f: F) -> Case
where
    I: Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Clone + 'static,
{
    Case {
        name: name.to_string(),
        step,
        build: Box::new(move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Instance { inputs: inputs(&mut rng), f: Box::new(f.clone()) }
        }),
    }
}

fn one(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (a, b) = dims(rng);
    vec![random_tensor(rng, &[a, b])]
}

fn pair(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (a, b) = dims(rng);
    vec![random_tensor(rng, &[a, b]), random_tensor(rng, &[a, b])]
}

fn kinked(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (a, b) = dims(rng);
    vec![away_from_zero(rng, &[a, b])]
}

fn spatial(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (h, w) = dims(rng);
    let c = rng.gen_range(1..3);
    vec![random_tensor(rng, &[h, w, c])]
}

pub fn op_cases() -> Vec<Case> {
    vec![
        case("add", 1e-5, pair, |g, v| {
            let y = g.add(v[0], v[1])?;
            probe(g, y)
        }),
        case("sub", 1e-5, pair, |g, v| {
            let y = g.sub(v[0], v[1])?;
            probe(g, y)
        }),
        case("mul", 1e-5, pair, |g, v| {
            let y = g.mul(v[0], v[1])?;
            probe(g, y)
        }),
        case(
            "div",
            1e-6,
            |rng| {
                let (a, b) = dims(rng);
                let mut d = away_from_zero(rng, &[a, b]);
                d.data_mut().iter_mut().for_each(|v| *v += v.signum() * 0.5);
                vec![random_tensor(rng, &[a, b]), d]
            },
            |g, v| {
                let y = g.div(v[0], v[1])?;
                probe(g, y)
            },
        ),
        case(
            "scalar broadcast",
            1e-5,
            |rng| {
                let (a, b) = dims(rng);
                vec![random_tensor(rng, &[a, b]), random_tensor(rng, &[])]
            },
            |g, v| {
                let y = g.mul(v[0], v[1])?;
                let z = g.add(y, v[1])?;
                probe(g, z)
            },
        ),
        case("scale, add_scalar", 1e-5, one, |g, v| {
            let y = g.scale(v[0], -2.5);
            let z = g.add_scalar(y, 0.75);
            let s = g.square(z);
            probe(g, s)
        }),
        case("exp", 1e-5, one, |g, v| {
            let y = g.exp(v[0]);
            probe(g, y)
        }),
        case("square", 1e-5, one, |g, v| {
            let y = g.square(v[0]);
            probe(g, y)
        }),
        case("relu", 1e-5, kinked, |g, v| {
            let y = g.relu(v[0]);
            probe(g, y)
        }),
        case("abs", 1e-5, kinked, |g, v| {
            let y = g.abs(v[0]);
            probe(g, y)
        }),
        case("sum", 1e-5, one, |g, v| {
            let e = g.exp(v[0]);
            Ok(g.sum(e))
        }),
        case(
            "reshape",
            1e-5,
            |rng| {
                let n = rng.gen_range(1..4);
                vec![random_tensor(rng, &[n, 6])]
            },
            |g, v| {
                let n = g.shape(v[0])[0];
                let y = g.reshape(v[0], &[n * 3, 2])?;
                let s = g.square(y);
                probe(g, s)
            },
        ),
        case("transpose", 1e-5, one, |g, v| {
            let y = g.transpose(v[0])?;
            let s = g.square(y);
            probe(g, s)
        }),
        case(
            "matmul",
            1e-5,
            |rng| {
                let (n, k) = dims(rng);
                let m = rng.gen_range(1..5);
                vec![random_tensor(rng, &[n, k]), random_tensor(rng, &[k, m])]
            },
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                probe(g, y)
            },
        ),
        case(
            "l2_normalize_rows",
            1e-6,
            |rng| {
                let (a, b) = dims(rng);
                vec![random_tensor(rng, &[a, b + 1])]
            },
            |g, v| {
                let y = g.l2_normalize_rows(v[0])?;
                probe(g, y)
            },
        ),
        case(
            "softmax_over_cells",
            1e-6,
            |rng| {
                let (a, b) = dims(rng);
                let mut t = random_tensor(rng, &[a, b + 1]);
                t.data_mut().iter_mut().for_each(|v| *v *= 5.0);
                vec![t]
            },
            |g, v| {
                let y = g.softmax_over_cells(v[0])?;
                probe(g, y)
            },
        ),
        case(
            "conv2d",
            1e-5,
            |rng| {
                let (h, w) = dims(rng);
                let (ci, co) = (rng.gen_range(1..4), rng.gen_range(1..4));
                let k = [1, 3, 5][rng.gen_range(0..3)];
                vec![random_tensor(rng, &[h, w, ci]), random_tensor(rng, &[k, k, ci, co]), random_tensor(rng, &[co])]
            },
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2])?;
                probe(g, y)
            },
        ),
        case("resize_bilinear", 1e-5, spatial, |g, v| {
            let (h, w) = (g.shape(v[0])[0], g.shape(v[0])[1]);
            let up = g.resize_bilinear(v[0], 2 * h + 1, w + 3)?;
            let down = g.resize_bilinear(up, h.max(2) - 1, w)?;
            let a = probe(g, up)?;
            let b = probe(g, down)?;
            g.add(a, b)
        }),
        case(
            "warp",
            1e-6,
            |rng| {
                let mut v = spatial(rng);
                let (h, w) = (v[0].shape()[0], v[0].shape()[1]);
                v.push(off_grid_flow(rng, h, w));
                v
            },
            |g, v| {
                let y = g.warp(v[0], v[1])?;
                probe(g, y)
            },
        ),
        case(
            "forward_diff",
            1e-5,
            |rng| {
                let (h, w) = dims(rng);
                vec![random_tensor(rng, &[h, w, 2])]
            },
            |g, v| {
                let dx = g.forward_diff(v[0], 1)?;
                let dy = g.forward_diff(v[0], 0)?;
                let a = probe(g, dx)?;
                let sq = g.square(dy);
                let b = probe(g, sq)?;
                g.add(a, b)
            },
        ),
    ]
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    loop {
        let m = Mask::from_fn(h, w, |_, _| rng.gen_bool(0.6));
        if m.foreground_count() > 0 {
            return m;
        }
    }
}

fn masks(seed: u64, h: usize, w: usize) -> (Mask, Mask, Mask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let region = Mask::from_fn(h, w, |_, _| rng.gen_bool(0.8));
    (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w), region)
}

type Pick = fn(&mut Graph, &LossNodes) -> Var;

fn loss_case(name: &str, pick: Pick, restricted: bool) -> Case {
    Case {
        name: format!("{name}{}", if restricted { " (region)" } else { "" }),
        step: 1e-6,
        build: Box::new(move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (rng.gen_range(3..7), rng.gen_range(3..7));
            let inputs = vec![off_grid_flow(&mut rng, h, w), off_grid_flow(&mut rng, h, w)];
            let (ms, mt, region) = masks(seed, h, w);
            let f: Func = Box::new(move |g, v| {
                let lm = LossMasks::new(&ms, &mt);
                let lm = if restricted { lm.within(&region) } else { lm };
                let nodes = loss_nodes(g, v[0], v[1], &lm)?;
                Ok(pick(g, &nodes))
            });
            Instance { inputs, f }
        }),
    }
}

fn matching_case(mode: ArgmaxMode) -> Case {
    let cfg = MatchConfig::new(10.0, 2.0, mode).unwrap();
    Case {
        name: format!("total loss through {mode} matching"),
        step: 1e-6,
        build: Box::new(move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (rng.gen_range(3..5), rng.gen_range(3..5));
            let d = rng.gen_range(2..4);
            let inputs: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, &[h, w, d])).collect();
            let (ms, mt, _) = masks(seed, h, w);
            let f: Func = Box::new(move |g, v| {
                let (fs, ft) = match_graph::flows(g, &v[0..2], &v[2..4], &cfg)?;
                let nodes = loss_nodes(g, fs, ft, &LossMasks::new(&ms, &mt))?;
                Ok(nodes.total(g, &LossWeights::default()))
            });
            Instance { inputs, f }
        }),
    }
}

fn adaptation_case() -> Case {
    let cfg = MatchConfig::default();
    Case {
        name: "total loss through adaptation layers".into(),
        step: 1e-6,
        build: Box::new(move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w, d) = (4, 4, 2);
            let raw: Vec<Tensor> = (0..2).map(|_| random_tensor(&mut rng, &[h, w, d])).collect();
            let inputs = vec![
                random_tensor(&mut rng, &[3, 3, d, d]),
                random_tensor(&mut rng, &[d]),
                random_tensor(&mut rng, &[3, 3, d, d]),
                random_tensor(&mut rng, &[d]),
            ];
            let (ms, mt, _) = masks(seed, h, w);
            let f: Func = Box::new(move |g, v| {
                let p = [v[0], v[1], v[2], v[3]];
                let s = g.constant(raw[0].clone());
                let t = g.constant(raw[1].clone());
                let sa = adapt_graph(g, s, &p)?;
                let ta = adapt_graph(g, t, &p)?;
                let (fs, ft) = match_graph::flows(g, &[sa], &[ta], &cfg)?;
                let nodes = loss_nodes(g, fs, ft, &LossMasks::new(&ms, &mt))?;
                Ok(nodes.total(g, &LossWeights::default()))
            });
            Instance { inputs, f }
        }),
    }
}

pub fn loss_cases() -> Vec<Case> {
    let picks: [(&str, Pick); 4] = [
        ("mask term", |_, n| n.mask),
        ("flow term", |_, n| n.flow),
        ("smoothness term", |_, n| n.smooth),
        ("total loss", |g, n| n.total(g, &LossWeights::default())),
    ];
    let mut cases: Vec<Case> =
        picks.iter().flat_map(|&(name, pick)| [loss_case(name, pick, false), loss_case(name, pick, true)]).collect();
    cases.push(matching_case(ArgmaxMode::KernelSoft));
    cases.push(matching_case(ArgmaxMode::Soft));
    cases.push(adaptation_case());
    cases
}
