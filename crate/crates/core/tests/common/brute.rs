//! Naive reference implementations checked against the library on random
//! small instances. Each check returns the number of instances compared.

use fssentry::detection::iforest::{average_path_length, IsolationForest, Node, Tree};
use fssentry::detection::Direction;
use fssentry::fewshot::{FewShotModel, HeadKind};
use fssentry::filters::classic::filter_feats_median;
use fssentry::harness::{auroc, auroc_sweep};
use fssentry::numcore::nn::{LayerSpec, Network};
use fssentry::numcore::{RngStream, Tensor};

pub const INSTANCES: usize = 100;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Straight-line forward pass of one sample through a layer stack.
pub fn naive_forward(net: &Network<f64>, x: &[f64]) -> Vec<f64> {
    let mut shape = net.input_shape().to_vec();
    let mut cur = x.to_vec();
    let mut p = net.params().iter();
    for spec in net.specs() {
        match *spec {
            LayerSpec::Conv { in_ch, out_ch, kernel, stride } => {
                let (w, b) = (p.next().unwrap().data(), p.next().unwrap().data());
                let (h, wd) = (shape[1] as isize, shape[2] as isize);
                let pad = (kernel / 2) as isize;
                let ho = ((h + 2 * pad - kernel as isize) / stride as isize + 1) as usize;
                let wo = ((wd + 2 * pad - kernel as isize) / stride as isize + 1) as usize;
                let mut out = vec![0.0; out_ch * ho * wo];
                for o in 0..out_ch {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let mut acc = b[o];
                            for c in 0..in_ch {
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let iy = (y * stride) as isize + ky as isize - pad;
                                        let ix = (xx * stride) as isize + kx as isize - pad;
                                        if iy < 0 || ix < 0 || iy >= h || ix >= wd {
                                            continue;
                                        }
                                        let v = cur[c * (h * wd) as usize + (iy * wd + ix) as usize];
                                        acc += w[o * in_ch * kernel * kernel + c * kernel * kernel + ky * kernel + kx] * v;
                                    }
                                }
                            }
                            out[o * ho * wo + y * wo + xx] = acc;
                        }
                    }
                }
                shape = vec![out_ch, ho, wo];
                cur = out;
            }
            LayerSpec::Dense { inputs, outputs } => {
                let (w, b) = (p.next().unwrap().data(), p.next().unwrap().data());
                cur = (0..outputs)
                    .map(|o| b[o] + (0..inputs).map(|i| w[o * inputs + i] * cur[i]).sum::<f64>())
                    .collect();
                shape = vec![outputs];
            }
            LayerSpec::Relu => cur.iter_mut().for_each(|v| *v = v.max(0.0)),
            LayerSpec::Sigmoid => cur.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
            LayerSpec::AvgPool2 => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let mut out = vec![0.0; c * (h / 2) * (w / 2)];
                for ch in 0..c {
                    for y in 0..h / 2 {
                        for x in 0..w / 2 {
                            let at = |dy: usize, dx: usize| cur[ch * h * w + (2 * y + dy) * w + 2 * x + dx];
                            out[ch * (h / 2) * (w / 2) + y * (w / 2) + x] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
                        }
                    }
                }
                shape = vec![c, h / 2, w / 2];
                cur = out;
            }
            LayerSpec::Upsample2 => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let mut out = vec![0.0; c * h * w * 4];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            out[ch * 4 * h * w + y * 2 * w + x] = cur[ch * h * w + (y / 2) * w + x / 2];
                        }
                    }
                }
                shape = vec![c, 2 * h, 2 * w];
                cur = out;
            }
        }
    }
    cur
}

fn random_images(n: usize, rng: &mut RngStream) -> Tensor<f64> {
    Tensor::from_fn(&[n, 3, 16, 16], |_| rng.uniform(0.0, 1.0))
}

fn episode(rng: &mut RngStream) -> (usize, usize, Vec<usize>) {
    let k = 2 + rng.below(4);
    let n = 1 + rng.below(3);
    let mut ways: Vec<usize> = (0..k).flat_map(|w| std::iter::repeat(w).take(n)).collect();
    rng.shuffle(&mut ways);
    (k, n, ways)
}

fn naive_class_means(model: &FewShotModel<f64>, support: &Tensor<f64>, ways: &[usize], k: usize) -> Vec<Vec<f64>> {
    let feats: Vec<Vec<f64>> = (0..support.batch()).map(|i| naive_forward(&model.encoder, support.item(i))).collect();
    (0..k)
        .map(|w| {
            let members: Vec<&Vec<f64>> = feats.iter().zip(ways).filter(|(_, &c)| c == w).map(|(f, _)| f).collect();
            let mut m = vec![0.0; members[0].len()];
            for f in &members {
                for (a, b) in m.iter_mut().zip(f.iter()) {
                    *a += b;
                }
            }
            m.iter().map(|v| v / members.len() as f64).collect()
        })
        .collect()
}

/// Prototypical logits against a double loop over queries and classes.
pub fn check_proto_logits(seed: u64) -> Result<usize, String> {
    let mut rng = RngStream::new(seed, 0x9f0);
    for inst in 0..INSTANCES {
        let (k, n, ways) = episode(&mut rng);
        let model = FewShotModel::<f32>::new(HeadKind::Prototypical, k, n, &mut rng).unwrap().cast::<f64>();
        let support = random_images(k * n, &mut rng);
        let nq = 1 + rng.below(4);
        let query = random_images(nq, &mut rng);
        let got = model.logits(&support, &ways, k, &query).unwrap();
        let means = naive_class_means(&model, &support, &ways, k);
        for q in 0..nq {
            let fq = naive_forward(&model.encoder, query.item(q));
            for (c, m) in means.iter().enumerate() {
                let mut d = 0.0;
                for j in 0..fq.len() {
                    d += (fq[j] - m[j]) * (fq[j] - m[j]);
                }
                let v = got.data()[q * k + c];
                if !close(v, -d, 1e-6) {
                    return Err(format!("instance {inst}: logit ({q},{c}) {v} vs naive {}", -d));
                }
            }
        }
    }
    Ok(INSTANCES)
}

/// Relation-head logits against evaluating every (query, class) pair alone.
pub fn check_relation_logits(seed: u64) -> Result<usize, String> {
    let mut rng = RngStream::new(seed, 0x5e1);
    for inst in 0..INSTANCES {
        let (k, n, ways) = episode(&mut rng);
        let model = FewShotModel::<f32>::new(HeadKind::Relation, k, n, &mut rng).unwrap().cast::<f64>();
        let head = model.relation.as_ref().unwrap();
        let support = random_images(k * n, &mut rng);
        let nq = 1 + rng.below(4);
        let query = random_images(nq, &mut rng);
        let got = model.logits(&support, &ways, k, &query).unwrap();
        let means = naive_class_means(&model, &support, &ways, k);
        let ch = model.feature_channels();
        let pool = |f: &[f64]| -> Vec<f64> {
            let s = f.len() / ch;
            (0..ch).map(|c| f[c * s..(c + 1) * s].iter().sum::<f64>() / s as f64).collect()
        };
        for q in 0..nq {
            let pq = pool(&naive_forward(&model.encoder, query.item(q)));
            for (c, m) in means.iter().enumerate() {
                let mut pair = pool(m);
                pair.extend_from_slice(&pq);
                let want = naive_forward(head, &pair)[0];
                let v = got.data()[q * k + c];
                if !close(v, want, 1e-6) {
                    return Err(format!("instance {inst}: relation ({q},{c}) {v} vs naive {want}"));
                }
            }
        }
    }
    Ok(INSTANCES)
}

/// The 2×2 median filter against an explicitly edge-padded copy where the
/// median of four is the mean of the two values left after removing one
/// minimum and one maximum.
pub fn check_median(seed: u64) -> Result<usize, String> {
    let mut rng = RngStream::new(seed, 0x3ed);
    for inst in 0..INSTANCES {
        let (n, c) = (1 + rng.below(2), 1 + rng.below(3));
        let (h, w) = (2 + rng.below(6), 2 + rng.below(6));
        let levels = [4.0, 255.0, 1e6][rng.below(3)];
        let x = Tensor::<f32>::from_fn(&[n, c, h, w], |_| (rng.uniform(0.0, 1.0) * levels).round() as f32 / levels as f32);
        let got = filter_feats_median(&x).unwrap();
        for i in 0..n {
            for ch in 0..c {
                let plane = &x.item(i)[ch * h * w..(ch + 1) * h * w];
                let mut padded = vec![vec![0f32; w + 1]; h + 1];
                for (y, row) in padded.iter_mut().enumerate() {
                    for (xx, v) in row.iter_mut().enumerate() {
                        *v = plane[y.min(h - 1) * w + xx.min(w - 1)];
                    }
                }
                for y in 0..h {
                    for xx in 0..w {
                        let win = [padded[y][xx], padded[y][xx + 1], padded[y + 1][xx], padded[y + 1][xx + 1]];
                        let lo = (0..4).fold(0, |a, j| if win[j] < win[a] { j } else { a });
                        let hi = (0..4).rev().fold(3, |a, j| if j != lo && (a == lo || win[j] > win[a]) { j } else { a });
                        let mid: Vec<f32> = (0..4).filter(|&j| j != lo && j != hi).map(|j| win[j]).collect();
                        let want = (mid[0] + mid[1]) / 2.0;
                        let v = got.item(i)[ch * h * w + y * w + xx];
                        if v != want {
                            return Err(format!("instance {inst}: median at ({i},{ch},{y},{xx}) {v} vs naive {want}"));
                        }
                    }
                }
            }
        }
    }
    Ok(INSTANCES)
}

fn pairwise_auroc(clean: &[f64], adv: &[f64], direction: Direction) -> f64 {
    let sign = match direction {
        Direction::FlagIfAbove => 1.0,
        Direction::FlagIfBelow => -1.0,
    };
    let mut s = 0.0;
    for &a in adv {
        for &c in clean {
            let (a, c) = (sign * a, sign * c);
            s += if a > c {
                1.0
            } else if a == c {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (adv.len() * clean.len()) as f64
}

/// Rank AUROC and threshold-sweep AUROC against the pairwise definition,
/// with heavy ties on half of the instances.
pub fn check_auroc(seed: u64) -> Result<usize, String> {
    let mut rng = RngStream::new(seed, 0xa0c);
    for inst in 0..INSTANCES {
        let tied = inst % 2 == 0;
        let mut draw = |n: usize, shift: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let v = rng.normal() + shift;
                    if tied {
                        v.round()
                    } else {
                        v
                    }
                })
                .collect()
        };
        let clean = draw(1 + inst % 17, 0.0);
        let adv = draw(1 + (inst * 7) % 13, 0.8);
        for direction in [Direction::FlagIfAbove, Direction::FlagIfBelow] {
            let want = pairwise_auroc(&clean, &adv, direction);
            let rank = auroc(&clean, &adv, direction).unwrap();
            let sweep = auroc_sweep(&clean, &adv, direction).unwrap();
            if (rank - want).abs() > 1e-9 || (sweep - want).abs() > 1e-9 {
                return Err(format!("instance {inst}: rank {rank}, sweep {sweep}, pairwise {want}"));
            }
        }
    }
    Ok(INSTANCES)
}

struct Region {
    depth: usize,
    /// `(feature, value, went_left)` along the root-to-leaf path.
    path: Vec<(usize, f64, bool)>,
    size: usize,
}

fn enumerate_leaves(tree: &Tree, id: usize, path: &mut Vec<(usize, f64, bool)>, out: &mut Vec<Region>) {
    match tree.nodes[id] {
        Node::Leaf { size } => out.push(Region {
            depth: path.len(),
            path: path.clone(),
            size,
        }),
        Node::Split { feature, value, left, right } => {
            path.push((feature, value, true));
            enumerate_leaves(tree, left, path, out);
            path.pop();
            path.push((feature, value, false));
            enumerate_leaves(tree, right, path, out);
            path.pop();
        }
    }
}

fn inside(x: &[f64], path: &[(usize, f64, bool)]) -> bool {
    path.iter().all(|&(f, v, left)| (x[f] < v) == left)
}

/// Single isolation trees on four points: every leaf region is enumerated,
/// its training-point count and the path length of any query are recomputed
/// from the region constraints, and every split is checked to fall inside
/// the range of the points reaching it.
pub fn check_iforest(seed: u64) -> Result<usize, String> {
    let mut rng = RngStream::new(seed, 0x1f0);
    for inst in 0..INSTANCES {
        let dim = 1 + rng.below(3);
        let pts: Vec<Vec<f64>> = (0..4).map(|_| (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let forest = IsolationForest::fit(&pts, 1, 4, &mut rng).unwrap();
        let tree = &forest.trees[0];
        let mut leaves = Vec::new();
        enumerate_leaves(tree, 0, &mut Vec::new(), &mut leaves);
        for (li, leaf) in leaves.iter().enumerate() {
            let members: Vec<&Vec<f64>> = pts.iter().filter(|p| inside(p, &leaf.path)).collect();
            if members.len() != leaf.size {
                return Err(format!("instance {inst}: leaf {li} stores {} points, region holds {}", leaf.size, members.len()));
            }
            if leaf.size > 1 && leaf.depth < forest.height_limit {
                return Err(format!("instance {inst}: leaf {li} with {} distinct points above the height limit", leaf.size));
            }
            for d in 0..leaf.path.len() {
                let (f, v, _) = leaf.path[d];
                let reach: Vec<f64> = pts.iter().filter(|p| inside(p, &leaf.path[..d])).map(|p| p[f]).collect();
                let lo = reach.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = reach.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if !(lo <= v && v < hi) {
                    return Err(format!("instance {inst}: split {v} outside [{lo}, {hi})"));
                }
            }
        }
        let mut queries = pts.clone();
        queries.extend((0..4).map(|_| (0..dim).map(|_| rng.uniform(-1.5, 1.5)).collect::<Vec<f64>>()));
        for x in &queries {
            let hits: Vec<&Region> = leaves.iter().filter(|l| inside(x, &l.path)).collect();
            if hits.len() != 1 {
                return Err(format!("instance {inst}: query lands in {} leaves", hits.len()));
            }
            let want = hits[0].depth as f64 + average_path_length(hits[0].size);
            let got = forest.mean_path_length(x);
            if got != want {
                return Err(format!("instance {inst}: path length {got} vs enumerated {want}"));
            }
        }
    }
    Ok(INSTANCES)
}
