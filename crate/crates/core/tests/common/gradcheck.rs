//! Finite-difference oracle for the compute graph.
//!
//! Test graphs are described in a small IR that is lowered twice: once onto
//! the library's `Graph`, and once onto a straight-line f64 evaluator written
//! here from the textbook definitions of each primitive. Gradients from the
//! library are compared with central differences of the f64 evaluator.

use std::collections::BTreeMap;

use phoenix::numeric::{Graph, NamedTensors, NodeId, Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub enum R {
    Param(String),
    Input(String),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    MatMul(usize, usize),
    AddRowBias(usize, usize),
    AddChannel(usize, usize),
    Conv { x: usize, w: usize, b: usize, same: bool },
    Up(usize),
    Pool(usize),
    Silu(usize),
    GroupNorm { x: usize, g: usize, b: usize, groups: usize },
    Concat(usize, usize),
    Reshape(usize, Vec<usize>),
    Mse(usize, usize),
    CrossEntropy(usize, Vec<usize>),
    TimeEmbedding(Vec<u32>, usize),
}

#[derive(Debug, Clone, Default)]
pub struct RefGraph {
    pub nodes: Vec<R>,
    pub leaves: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct Val {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl RefGraph {
    fn push(&mut self, r: R) -> usize {
        self.nodes.push(r);
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, name: &str, shape: &[usize], data: Vec<f64>, param: bool) -> usize {
        self.leaves.insert(name.to_string(), (shape.to_vec(), data));
        if param {
            self.push(R::Param(name.into()))
        } else {
            self.push(R::Input(name.into()))
        }
    }

    pub fn op(&mut self, r: R) -> usize {
        self.push(r)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                R::Param(p) => Some(p.clone()),
                _ => None,
            })
            .collect()
    }

    /// Lowers onto the library graph; the last node is the output.
    pub fn lower(&self) -> Graph {
        let mut g = Graph::new();
        let mut ids: Vec<NodeId> = Vec::new();
        for n in &self.nodes {
            let id = match n {
                R::Param(p) => g.param(p.clone()),
                R::Input(p) => g.input(p.clone()),
                R::Add(a, b) => g.add(ids[*a], ids[*b]),
                R::Sub(a, b) => g.sub(ids[*a], ids[*b]),
                R::Mul(a, b) => g.mul(ids[*a], ids[*b]),
                R::Scale(a, f) => g.scale(ids[*a], *f as f32),
                R::Sum(a) => g.sum(ids[*a]),
                R::MatMul(a, b) => g.matmul(ids[*a], ids[*b]),
                R::AddRowBias(a, b) => g.add_row_bias(ids[*a], ids[*b]),
                R::AddChannel(a, b) => g.add_channel(ids[*a], ids[*b]),
                R::Conv { x, w, b, same } => g.conv2d(
                    ids[*x],
                    ids[*w],
                    Some(ids[*b]),
                    if *same { Padding::Same } else { Padding::Valid },
                ),
                R::Up(a) => g.upsample2x(ids[*a]),
                R::Pool(a) => g.avgpool2x(ids[*a]),
                R::Silu(a) => g.silu(ids[*a]),
                R::GroupNorm { x, g: gm, b, groups } => g.group_norm(ids[*x], ids[*gm], ids[*b], *groups),
                R::Concat(a, b) => g.concat(ids[*a], ids[*b]),
                R::Reshape(a, s) => g.reshape(ids[*a], s),
                R::Mse(a, b) => g.mse(ids[*a], ids[*b]),
                R::CrossEntropy(a, l) => g.softmax_cross_entropy(ids[*a], l),
                R::TimeEmbedding(steps, dim) => g.time_embedding(steps, *dim),
            };
            ids.push(id);
        }
        g.set_output(*ids.last().unwrap());
        g
    }

    pub fn bindings(&self) -> NamedTensors {
        self.leaves
            .iter()
            .map(|(k, (s, d))| {
                let data = d.iter().map(|&v| v as f32).collect();
                (k.clone(), Tensor::new(s.clone(), data).unwrap())
            })
            .collect()
    }

    /// Straight-line f64 evaluation of every node.
    pub fn eval(&self, leaves: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Vec<Val> {
        let mut v: Vec<Val> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let out = match n {
                R::Param(p) | R::Input(p) => {
                    let (s, d) = &leaves[p];
                    Val { shape: s.clone(), data: d.clone() }
                }
                R::Add(a, b) => zip(&v[*a], &v[*b], |x, y| x + y),
                R::Sub(a, b) => zip(&v[*a], &v[*b], |x, y| x - y),
                R::Mul(a, b) => zip(&v[*a], &v[*b], |x, y| x * y),
                R::Scale(a, f) => Val {
                    shape: v[*a].shape.clone(),
                    data: v[*a].data.iter().map(|x| x * (*f as f32 as f64)).collect(),
                },
                R::Sum(a) => Val { shape: vec![1], data: vec![v[*a].data.iter().sum()] },
                R::MatMul(a, b) => {
                    let (x, y) = (&v[*a], &v[*b]);
                    let (m, k, n) = (x.shape[0], x.shape[1], y.shape[1]);
                    let mut d = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            for p in 0..k {
                                d[i * n + j] += x.data[i * k + p] * y.data[p * n + j];
                            }
                        }
                    }
                    Val { shape: vec![m, n], data: d }
                }
                R::AddRowBias(a, b) => {
                    let (x, bias) = (&v[*a], &v[*b]);
                    let n = bias.data.len();
                    Val {
                        shape: x.shape.clone(),
                        data: x.data.iter().enumerate().map(|(i, xv)| xv + bias.data[i % n]).collect(),
                    }
                }
                R::AddChannel(a, b) => {
                    let (x, c) = (&v[*a], &v[*b]);
                    let plane = x.shape[2] * x.shape[3];
                    Val {
                        shape: x.shape.clone(),
                        data: x.data.iter().enumerate().map(|(i, xv)| xv + c.data[i / plane]).collect(),
                    }
                }
                R::Conv { x, w, b, same } => conv_ref(&v[*x], &v[*w], &v[*b], *same),
                R::Up(a) => {
                    let x = &v[*a];
                    let (bn, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                    let mut d = vec![0.0; bn * c * 4 * h * w];
                    for p in 0..bn * c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                d[(p * 2 * h + y) * 2 * w + xx] = x.data[(p * h + y / 2) * w + xx / 2];
                            }
                        }
                    }
                    Val { shape: vec![bn, c, 2 * h, 2 * w], data: d }
                }
                R::Pool(a) => {
                    let x = &v[*a];
                    let (bn, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut d = vec![0.0; bn * c * oh * ow];
                    for p in 0..bn * c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let mut s = 0.0;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        s += x.data[(p * h + 2 * y + dy) * w + 2 * xx + dx];
                                    }
                                }
                                d[(p * oh + y) * ow + xx] = s / 4.0;
                            }
                        }
                    }
                    Val { shape: vec![bn, c, oh, ow], data: d }
                }
                R::Silu(a) => Val {
                    shape: v[*a].shape.clone(),
                    data: v[*a].data.iter().map(|&x| x / (1.0 + (-x).exp())).collect(),
                },
                R::GroupNorm { x, g, b, groups } => gn_ref(&v[*x], &v[*g], &v[*b], *groups),
                R::Concat(a, b) => {
                    let (x, y) = (&v[*a], &v[*b]);
                    let xr: usize = x.shape[1..].iter().product();
                    let yr: usize = y.shape[1..].iter().product();
                    let mut d = Vec::new();
                    for r in 0..x.shape[0] {
                        d.extend_from_slice(&x.data[r * xr..(r + 1) * xr]);
                        d.extend_from_slice(&y.data[r * yr..(r + 1) * yr]);
                    }
                    let mut s = x.shape.clone();
                    s[1] += y.shape[1];
                    Val { shape: s, data: d }
                }
                R::Reshape(a, s) => Val { shape: s.clone(), data: v[*a].data.clone() },
                R::Mse(a, b) => {
                    let (x, y) = (&v[*a], &v[*b]);
                    let s: f64 = x.data.iter().zip(&y.data).map(|(p, q)| (p - q).powi(2)).sum();
                    Val { shape: vec![1], data: vec![s / x.data.len() as f64] }
                }
                R::CrossEntropy(a, labels) => {
                    let x = &v[*a];
                    let k = x.shape[1];
                    let mut total = 0.0;
                    for (r, &l) in labels.iter().enumerate() {
                        let row = &x.data[r * k..(r + 1) * k];
                        let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
                        total += lse - row[l];
                    }
                    Val { shape: vec![1], data: vec![total / labels.len() as f64] }
                }
                R::TimeEmbedding(steps, dim) => {
                    let half = dim / 2;
                    let mut d = Vec::new();
                    for &t in steps {
                        for i in 0..half {
                            let e = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
                            let w = t as f64 / 10_000f64.powf(e);
                            d.push(w.sin());
                            d.push(w.cos());
                        }
                    }
                    Val { shape: vec![steps.len(), *dim], data: d }
                }
            };
            v.push(out);
        }
        v
    }

    pub fn eval_output(&self, leaves: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> f64 {
        self.eval(leaves).last().unwrap().data[0]
    }

    /// Central differences of the f64 evaluator for every parameter scalar.
    pub fn finite_difference(&self, h: f64) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for name in self.param_names() {
            let n = self.leaves[&name].1.len();
            let mut g = vec![0.0; n];
            let mut leaves = self.leaves.clone();
            for (i, gi) in g.iter_mut().enumerate() {
                let orig = leaves[&name].1[i];
                leaves.get_mut(&name).unwrap().1[i] = orig + h;
                let up = self.eval_output(&leaves);
                leaves.get_mut(&name).unwrap().1[i] = orig - h;
                let down = self.eval_output(&leaves);
                leaves.get_mut(&name).unwrap().1[i] = orig;
                *gi = (up - down) / (2.0 * h);
            }
            out.insert(name, g);
        }
        out
    }
}

fn zip(a: &Val, b: &Val, f: impl Fn(f64, f64) -> f64) -> Val {
    Val {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
    }
}

fn conv_ref(x: &Val, w: &Val, b: &Val, same: bool) -> Val {
    let (bn, ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (co, k) = (w.shape[0], w.shape[2]);
    let pad = if same { k / 2 } else { 0 } as isize;
    let oh = (h as isize + 2 * pad - k as isize + 1) as usize;
    let ow = (wd as isize + 2 * pad - k as isize + 1) as usize;
    let mut d = vec![0.0; bn * co * oh * ow];
    for n in 0..bn {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b.data[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad;
                                let ix = xx as isize + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += w.data[((o * ci + c) * k + ky) * k + kx]
                                    * x.data[((n * ci + c) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    d[((n * co + o) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    Val { shape: vec![bn, co, oh, ow], data: d }
}

fn gn_ref(x: &Val, g: &Val, b: &Val, groups: usize) -> Val {
    let (bn, c) = (x.shape[0], x.shape[1]);
    let sp: usize = x.shape[2..].iter().product();
    let mut groups = groups.min(c).max(1);
    while c % groups != 0 {
        groups -= 1;
    }
    let cpg = c / groups;
    let mut d = vec![0.0; x.data.len()];
    for n in 0..bn {
        for gi in 0..groups {
            let start = (n * c + gi * cpg) * sp;
            let xs = &x.data[start..start + cpg * sp];
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            for (j, v) in xs.iter().enumerate() {
                let ch = gi * cpg + j / sp;
                d[start + j] = (v - mean) / (var + 1e-5).sqrt() * g.data[ch] + b.data[ch];
            }
        }
    }
    Val { shape: x.shape.clone(), data: d }
}

fn randv(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    // Round-trip through f32 so both evaluators see identical leaf values.
    (0..n)
        .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * scale) as f32 as f64)
        .collect()
}

/// A randomized graph that exercises every differentiable primitive.
pub fn random_graph(seed: u64) -> RefGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = RefGraph::default();
    let b = rng.random_range(1..=2);
    let cin = rng.random_range(1..=3);
    let side = [4usize, 6][rng.random_range(0..2)];
    let c1 = [2usize, 4][rng.random_range(0..2)];
    let c2 = rng.random_range(1..=3);
    let groups = rng.random_range(1..=2);
    let dim = [4usize, 6, 8][rng.random_range(0..3)];
    let k2 = [1usize, 3][rng.random_range(0..2)];
    let same2 = rng.random_bool(0.5);
    let classes = rng.random_range(2..=4);

    let x = g.leaf("x", &[b, cin, side, side], randv(&mut rng, b * cin * side * side, 1.0), false);
    let w1 = g.leaf("w1", &[c1, cin, 3, 3], randv(&mut rng, c1 * cin * 9, 0.5), true);
    let b1 = g.leaf("b1", &[c1], randv(&mut rng, c1, 0.2), true);
    let conv1 = g.op(R::Conv { x, w: w1, b: b1, same: true });
    let gam = g.leaf("gn.gamma", &[c1], randv(&mut rng, c1, 0.5).iter().map(|v| 1.0 + v).collect(), true);
    let bet = g.leaf("gn.beta", &[c1], randv(&mut rng, c1, 0.3), true);
    let n1 = g.op(R::GroupNorm { x: conv1, g: gam, b: bet, groups });
    let s1 = g.op(R::Silu(n1));

    let steps: Vec<u32> = (0..b).map(|_| rng.random_range(1..50)).collect();
    let te = g.op(R::TimeEmbedding(steps, dim));
    let wt = g.leaf("wt", &[dim, c1], randv(&mut rng, dim * c1, 0.5), true);
    let bt = g.leaf("bt", &[c1], randv(&mut rng, c1, 0.2), true);
    let tp = g.op(R::MatMul(te, wt));
    let tp = g.op(R::AddRowBias(tp, bt));
    let a1 = g.op(R::AddChannel(s1, tp));

    let p1 = g.op(R::Pool(a1));
    let u1 = g.op(R::Up(p1));
    let cat = g.op(R::Concat(u1, x));
    let w2 = g.leaf("w2", &[c2, c1 + cin, k2, k2], randv(&mut rng, c2 * (c1 + cin) * k2 * k2, 0.4), true);
    let b2 = g.leaf("b2", &[c2], randv(&mut rng, c2, 0.2), true);
    let conv2 = g.op(R::Conv { x: cat, w: w2, b: b2, same: same2 });
    let out_side = if same2 { side } else { side + 1 - k2 };

    let act = g.op(R::Silu(conv2));
    let prod = g.op(R::Mul(conv2, act));
    let scaled = g.op(R::Scale(conv2, 0.3));
    let diff = g.op(R::Sub(prod, scaled));
    let feat = c2 * out_side * out_side;
    let flat = g.op(R::Reshape(diff, vec![b, feat]));
    let wl = g.leaf("wl", &[feat, classes], randv(&mut rng, feat * classes, 0.3), true);
    let bl = g.leaf("bl", &[classes], randv(&mut rng, classes, 0.2), true);
    let logits = g.op(R::MatMul(flat, wl));
    let logits = g.op(R::AddRowBias(logits, bl));
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
    let ce = g.op(R::CrossEntropy(logits, labels));

    let target = g.leaf("target", &[b, c2, out_side, out_side], randv(&mut rng, feat * b, 1.0), false);
    let mse = g.op(R::Mse(diff, target));
    let both = g.op(R::Add(ce, mse));
    g.op(R::Sum(both));
    g
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CheckReport {
    pub params: usize,
    pub scalars: usize,
    pub worst_rel: f64,
    /// Scalars that pass only through the absolute floor.
    pub floored: usize,
    pub failures: usize,
}

/// Passes when the gradient agrees within 1e-4 relative error, or within
/// 1e-6 absolute when both values are near zero.
pub fn agrees(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    diff < 1e-6 || diff / scale < 1e-4
}

pub fn check_graph(g: &RefGraph) -> CheckReport {
    let mut lowered = g.lower();
    let binds = g.bindings();
    lowered.forward(&[&binds]).expect("forward");
    let grads = lowered.backward().expect("backward");
    let fd = g.finite_difference(1e-3);
    let mut rep = CheckReport::default();
    for (name, numeric) in &fd {
        rep.params += 1;
        let analytic = grads[name].data();
        for (a, n) in analytic.iter().zip(numeric) {
            rep.scalars += 1;
            let a = *a as f64;
            let scale = a.abs().max(n.abs());
            if scale > 1e-6 {
                rep.worst_rel = rep.worst_rel.max((a - n).abs() / scale);
            }
            if !agrees(a, *n) {
                rep.failures += 1;
            } else if scale > 1e-6 && (a - n).abs() / scale >= 1e-4 {
                rep.floored += 1;
            }
        }
    }
    rep
}
