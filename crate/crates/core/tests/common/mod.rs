//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls the library's own algorithms; they
//! only share its data types.
#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use bubblegan_core::graph::{BubbleDiagram, RoomType};
use bubblegan_core::synth::{Rect, GRID};
use rand::Rng;

pub fn random_types(rng: &mut impl Rng, m: usize) -> Vec<RoomType> {
    (0..m).map(|_| RoomType::ALL[rng.random_range(0..RoomType::ALL.len())]).collect()
}

/// Erdős–Rényi diagram with `1..=max_rooms` rooms and a random density.
pub fn random_diagram(rng: &mut impl Rng, max_rooms: usize) -> BubbleDiagram {
    let m = rng.random_range(1..=max_rooms);
    let p: f64 = rng.random_range(0.0..0.8);
    let mut edges = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    BubbleDiagram::new(random_types(rng, m), edges).unwrap()
}

pub fn random_rect(rng: &mut impl Rng) -> Rect {
    let (x0, y0) = (rng.random_range(0..GRID - 1), rng.random_range(0..GRID - 1));
    let (x1, y1) = (rng.random_range(x0 + 1..=GRID), rng.random_range(y0 + 1..=GRID));
    Rect::new(x0, y0, x1, y1).unwrap()
}

/// Floyd–Warshall hop counts, `-1` for unreachable pairs.
pub fn floyd_warshall(d: &BubbleDiagram) -> Vec<i64> {
    let m = d.num_rooms();
    const INF: i64 = i64::MAX / 4;
    let mut dist = vec![INF; m * m];
    for i in 0..m {
        dist[i * m + i] = 0;
    }
    for &(i, j) in d.edges() {
        dist[i * m + j] = 1;
        dist[j * m + i] = 1;
    }
    for k in 0..m {
        for i in 0..m {
            for j in 0..m {
                let via = dist[i * m + k] + dist[k * m + j];
                if via < dist[i * m + j] {
                    dist[i * m + j] = via;
                }
            }
        }
    }
    dist.into_iter().map(|x| if x >= INF { -1 } else { x }).collect()
}

/// Pixel-level adjacency: some pixel of `a` and some pixel of `b` share a
/// row or a column and are at most `gap + 1` pixels apart along it.
pub fn pixel_adjacent(a: &Rect, b: &Rect, gap: i32) -> bool {
    let pixels = |r: &Rect| {
        let mut v = Vec::new();
        for y in 0..GRID {
            for x in 0..GRID {
                if r.contains(x, y) {
                    v.push((x, y));
                }
            }
        }
        v
    };
    let (pa, pb) = (pixels(a), pixels(b));
    pa.iter().any(|&(ax, ay)| {
        pb.iter()
            .any(|&(bx, by)| (ay == by && (ax - bx).abs() <= gap + 1) || (ax == bx && (ay - by).abs() <= gap + 1))
    })
}

/// Fewest single-edge insertions/deletions turning `from` into `to`, by
/// breadth-first search over all edge sets on `m` nodes.
pub fn edit_distance_bfs(m: usize, from: &BTreeSet<(usize, usize)>, to: &BTreeSet<(usize, usize)>) -> usize {
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
    assert!(pairs.len() <= 20, "state space too large");
    let encode = |s: &BTreeSet<(usize, usize)>| {
        pairs
            .iter()
            .enumerate()
            .filter(|(_, p)| s.contains(p))
            .fold(0u32, |acc, (k, _)| acc | (1 << k))
    };
    let (start, goal) = (encode(from), encode(to));
    let mut seen = vec![false; 1 << pairs.len()];
    let mut queue = VecDeque::from([(start, 0usize)]);
    seen[start as usize] = true;
    while let Some((state, d)) = queue.pop_front() {
        if state == goal {
            return d;
        }
        for k in 0..pairs.len() {
            let next = state ^ (1 << k);
            if !seen[next as usize] {
                seen[next as usize] = true;
                queue.push_back((next, d + 1));
            }
        }
    }
    unreachable!("every edge set is reachable")
}

/// Compatibility from first principles: pixel adjacency, then exhaustive
/// edit search.
pub fn compatibility_oracle(d: &BubbleDiagram, rects: &[Option<Rect>], gap: i32) -> usize {
    let m = d.num_rooms();
    let mut extracted = BTreeSet::new();
    for i in 0..m {
        for j in i + 1..m {
            if let (Some(a), Some(b)) = (&rects[i], &rects[j]) {
                if pixel_adjacent(a, b, gap) {
                    extracted.insert((i, j));
                }
            }
        }
    }
    edit_distance_bfs(m, d.edges(), &extracted)
}

/// Dense row-major square matrices for the Fréchet oracle.
pub type Mat = Vec<Vec<f64>>;

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect())
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    let n = a.len();
    (0..n).map(|i| (0..n).map(|j| a[j][i]).collect()).collect()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix:
/// `(eigenvalues, V)` with `A = V diag(λ) Vᵀ`.
pub fn jacobi_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.len();
    let mut a = a.clone();
    let mut v: Mat = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

pub fn sqrt_psd(a: &Mat) -> Mat {
    let (vals, v) = jacobi_eigen(a);
    let n = a.len();
    let d: Mat = (0..n).map(|i| (0..n).map(|j| if i == j { vals[i].max(0.0).sqrt() } else { 0.0 }).collect()).collect();
    matmul(&matmul(&v, &d), &transpose(&v))
}

/// `‖μ₁−μ₂‖² + Tr Σ₁ + Tr Σ₂ − 2 Tr((Σ₁Σ₂)^{1/2})`, with the trace term from
/// the eigenvalues of `Σ₂^{1/2} Σ₁ Σ₂^{1/2}`.
pub fn frechet_oracle(mu1: &[f64], c1: &Mat, mu2: &[f64], c2: &Mat) -> f64 {
    let s2 = sqrt_psd(c2);
    let inner = matmul(&matmul(&s2, c1), &s2);
    let sym: Mat = (0..inner.len()).map(|i| (0..inner.len()).map(|j| 0.5 * (inner[i][j] + inner[j][i])).collect()).collect();
    let tr_sqrt: f64 = jacobi_eigen(&sym).0.iter().map(|l| l.max(0.0).sqrt()).sum();
    let dmu: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    let tr = |c: &Mat| (0..c.len()).map(|i| c[i][i]).sum::<f64>();
    dmu + tr(c1) + tr(c2) - 2.0 * tr_sqrt
}

/// Random symmetric positive-definite `n×n` matrix `B Bᵀ + 0.1 I`.
pub fn random_spd(rng: &mut impl Rng, n: usize) -> Mat {
    let b: Mat = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut c = matmul(&b, &transpose(&b));
    for (i, row) in c.iter_mut().enumerate() {
        row[i] += 0.1;
    }
    c
}

/// Central differences of `f` at `x`, only along the listed coordinates.
pub fn central_differences(f: impl Fn(&[f64]) -> f64, x: &[f64], coords: &[usize], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a−b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub mod grad_cases {
    //! One random instance per call; each returns the largest relative error
    //! between the analytic gradient and central differences (h = 1e-5).

    use bubblegan_autograd::{grad, Tensor};
    use bubblegan_core::graph::shortest_path_matrix;
    use bubblegan_core::losses::{classification_loss, gcyc_loss, LayoutToGraph};
    use bubblegan_core::pretrain::{pretraining_loss, Reconstruction};
    use rand::seq::index::sample;
    use rand::Rng;

    use super::{central_differences, random_diagram, random_types, relative_error};

    pub const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;

    fn uniform(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    fn check(x0: Vec<f64>, shape: &[usize], coords: &[usize], f: impl Fn(&Tensor) -> Tensor) -> f64 {
        let x = Tensor::leaf(x0.clone(), shape);
        let g = grad(&f(&x), &[&x], false)[0].clone().map(|t| t.to_vec()).unwrap_or(vec![0.0; x0.len()]);
        let analytic: Vec<f64> = coords.iter().map(|&i| g[i]).collect();
        let fd = central_differences(|v| f(&Tensor::new(v.to_vec(), shape)).item(), &x0, coords, H);
        relative_error(&analytic, &fd, FLOOR)
    }

    pub fn gcyc(rng: &mut impl Rng) -> f64 {
        let d = random_diagram(rng, 8);
        let m = d.num_rooms();
        let g_gt = shortest_path_matrix(&d);
        let x0 = uniform(rng, m * m, 3.0);
        let all: Vec<usize> = (0..m * m).collect();
        check(x0, &[m, m], &all, |x| gcyc_loss(&g_gt, x).unwrap())
    }

    pub fn classification(rng: &mut impl Rng) -> f64 {
        let m = rng.random_range(1..=8);
        let types = random_types(rng, m);
        let shape = if rng.random_bool(0.5) { vec![10] } else { vec![m, 10] };
        let n = shape.iter().product();
        let x0 = uniform(rng, n, 4.0);
        let all: Vec<usize> = (0..n).collect();
        check(x0, &shape, &all, |x| classification_loss(x, &types))
    }

    fn reconstruction(rng: &mut impl Rng, logits: Tensor, classes: usize) -> Reconstruction {
        let n = logits.shape()[0];
        let targets = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let k = rng.random_range(1..n);
        let mut masked = sample(rng, n, k).into_vec();
        masked.sort_unstable();
        Reconstruction { logits, targets, masked }
    }

    /// Node and edge branches together, gradients w.r.t. both logit tables.
    pub fn pretraining(rng: &mut impl Rng) -> f64 {
        let (nn, ne) = (rng.random_range(2..=10), rng.random_range(2..=12));
        let x0 = uniform(rng, nn * 10 + ne * 2, 3.0);
        let seed: u64 = rng.random();
        let all: Vec<usize> = (0..x0.len()).collect();
        check(x0, &[nn * 10 + ne * 2], &all, |x| {
            let mut r = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let node = reconstruction(&mut r, x.narrow(0, 0, nn * 10).reshape(&[nn, 10]), 10);
            let edge = reconstruction(&mut r, x.narrow(0, nn * 10, ne * 2).reshape(&[ne, 2]), 2);
            pretraining_loss(Some(&node), Some(&edge))
        })
    }

    /// One random output entry w.r.t. 24 random mask pixels.
    pub fn estimator(rng: &mut impl Rng, est: &LayoutToGraph) -> f64 {
        let m = rng.random_range(2..=4);
        let n = m * 32 * 32;
        let x0 = uniform(rng, n, 1.0);
        let (i, j) = loop {
            let (i, j) = (rng.random_range(0..m), rng.random_range(0..m));
            if i != j {
                break (i, j);
            }
        };
        let coords = sample(rng, n, 24).into_vec();
        check(x0, &[m, 1, 32, 32], &coords, |x| est.forward(x).narrow(0, i, 1).narrow(1, j, 1).reshape(&[1]))
    }
}
