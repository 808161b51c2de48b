//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use fedpoison::data::FeatureVector;
use fedpoison::defense::{
    coord_median, geometric_median, geometric_median_objective, krum, multi_krum, trimmed_mean,
};
use fedpoison::grmp::build_update_graph;
use fedpoison::grmp::graph::{laplacian, UpdateGraph};
use fedpoison::grmp::spectral::{gsp_decompose, gsp_synthesize, laplacian_eigen};
use fedpoison::grmp::vgae::{loss_and_grads, sample_noise, VgaeParams};
use fedpoison::model::{loss_and_grad, ParamVector, Sample};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

pub fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn sq_dist(a: &Array2<f64>, i: usize, j: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(a.row(j))
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

fn subsets(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if items.len() < k {
        return vec![];
    }
    let mut out = subsets(&items[1..], k - 1);
    for s in &mut out {
        s.insert(0, items[0]);
    }
    out.extend(subsets(&items[1..], k));
    out
}

/// Krum score of every row by enumerating all neighbour sets of size n-f-2.
pub fn brute_krum_scores(u: &Array2<f64>, f: usize) -> Vec<f64> {
    let n = u.nrows();
    (0..n)
        .map(|i| {
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            subsets(&others, n - f - 2)
                .iter()
                .map(|s| s.iter().map(|&j| sq_dist(u, i, j)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Best m-subset by total score, lexicographically smallest on ties,
/// returned in ascending (score, index) order.
pub fn brute_multi_krum(u: &Array2<f64>, f: usize, m: usize) -> Vec<usize> {
    let scores = brute_krum_scores(u, f);
    let all: Vec<usize> = (0..u.nrows()).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for s in subsets(&all, m) {
        let total: f64 = s.iter().map(|&i| scores[i]).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, s));
        }
    }
    let mut sel = best.unwrap().1;
    sel.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    sel
}

fn column_sorted(u: &Array2<f64>, c: usize) -> Vec<f64> {
    let mut v: Vec<f64> = u.column(c).to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn trimmed_oracle(u: &Array2<f64>, beta: usize) -> Array1<f64> {
    let n = u.nrows();
    Array1::from_iter((0..u.ncols()).map(|c| {
        let v = column_sorted(u, c);
        v[beta..n - beta].iter().sum::<f64>() / (n - 2 * beta) as f64
    }))
}

pub fn median_oracle(u: &Array2<f64>) -> Array1<f64> {
    let n = u.nrows();
    Array1::from_iter((0..u.ncols()).map(|c| {
        let v = column_sorted(u, c);
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    }))
}

/// Coarse-to-fine grid search over the bounding box; the objective is
/// convex so shrinking around the incumbent cannot lose the minimum.
pub fn geomed_grid(u: &Array2<f64>, resolution: f64) -> f64 {
    let d = u.ncols();
    let lo: Vec<f64> = (0..d)
        .map(|c| u.column(c).fold(f64::INFINITY, |a, &b| a.min(b)))
        .collect();
    let hi: Vec<f64> = (0..d)
        .map(|c| u.column(c).fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
        .collect();
    let mut center: Vec<f64> = (0..d).map(|c| (lo[c] + hi[c]) / 2.0).collect();
    let mut half: f64 = (0..d).map(|c| (hi[c] - lo[c]) / 2.0).fold(0.0, f64::max) + resolution;
    let steps = 10i64;
    let mut best = f64::INFINITY;
    while half > resolution / 4.0 {
        let h = half / steps as f64;
        let mut best_pt = center.clone();
        let mut idx = vec![-steps; d];
        loop {
            let p: Array1<f64> = Array1::from_iter((0..d).map(|c| center[c] + idx[c] as f64 * h));
            let obj = geometric_median_objective(u, p.view());
            if obj < best {
                best = obj;
                best_pt = p.to_vec();
            }
            let mut k = 0;
            while k < d {
                idx[k] += 1;
                if idx[k] <= steps {
                    break;
                }
                idx[k] = -steps;
                k += 1;
            }
            if k == d {
                break;
            }
        }
        center = best_pt;
        half = 2.0 * h;
    }
    best
}

/// Aggregation oracle suite over `instances` seeded instances; returns the
/// first disagreement, if any.
pub fn check_aggregation_oracles(instances: u64) -> Result<(), String> {
    for seed in 0..instances {
        let mut r = rng(1000 + seed);
        let n = r.random_range(4..=8);
        let d = r.random_range(1..=6);
        let u = gaussian(&mut r, n, d);
        let f = r.random_range(0..=n - 3);

        let k = krum(&u, f).map_err(|e| e.to_string())?;
        let brute = brute_krum_scores(&u, f);
        for (a, b) in k.scores.iter().zip(&brute) {
            if (a - b).abs() > 1e-9 * b.abs().max(1.0) {
                return Err(format!("seed {seed}: krum score {a} vs brute {b}"));
            }
        }
        let brute_sel = brute_multi_krum(&u, f, 1)[0];
        if k.selected != brute_sel {
            return Err(format!(
                "seed {seed}: krum picked {} brute {brute_sel}",
                k.selected
            ));
        }
        let m = r.random_range(1..=n - f - 2);
        let mk = multi_krum(&u, f, m).map_err(|e| e.to_string())?;
        let want = brute_multi_krum(&u, f, m);
        if mk.selected != want {
            return Err(format!(
                "seed {seed}: multi-krum {:?} vs brute {want:?}",
                mk.selected
            ));
        }

        let beta = r.random_range(0..=(n - 1) / 2);
        let tm = trimmed_mean(&u, beta).map_err(|e| e.to_string())?;
        let max_err = (&tm - &trimmed_oracle(&u, beta))
            .iter()
            .fold(0.0f64, |a, b| a.max(b.abs()));
        if max_err > 1e-12 {
            return Err(format!("seed {seed}: trimmed mean off by {max_err}"));
        }
        let md = coord_median(&u).map_err(|e| e.to_string())?;
        let max_err = (&md - &median_oracle(&u))
            .iter()
            .fold(0.0f64, |a, b| a.max(b.abs()));
        if max_err > 1e-12 {
            return Err(format!("seed {seed}: coordinate median off by {max_err}"));
        }

        let pts = gaussian(&mut r, 5, 3);
        let gm = geometric_median(&pts, 1e-10, 10_000).map_err(|e| e.to_string())?;
        let ours = geometric_median_objective(&pts, gm.point.view());
        let grid = geomed_grid(&pts, 1e-3);
        if ours > grid + 1e-3 {
            return Err(format!(
                "seed {seed}: geometric median objective {ours} vs grid {grid}"
            ));
        }
    }
    Ok(())
}

pub fn random_sample(r: &mut ChaCha8Rng, d: usize, classes: usize) -> Sample {
    let values = (0..d)
        .map(|_| {
            if r.random_bool(0.5) {
                r.random_range(0.0..1.0)
            } else {
                0.0
            }
        })
        .collect();
    Sample {
        x: FeatureVector {
            values,
            hash_dim: d,
        },
        label: r.random_range(0..classes),
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Classifier gradient vs central differences; returns the worst relative error.
pub fn classifier_fd_error(seed: u64) -> f64 {
    let mut r = rng(2000 + seed);
    let (d, classes) = (8, 4);
    let samples: Vec<Sample> = (0..5).map(|_| random_sample(&mut r, d, classes)).collect();
    let batch: Vec<&Sample> = samples.iter().collect();
    let params = ParamVector {
        values: Array1::from_iter((0..d * classes).map(|_| r.random_range(-1.0..1.0))),
        hash_dim: d,
        class_count: classes,
    };
    let (_, grad) = loss_and_grad(&params, &batch).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..params.dim() {
        let mut plus = params.clone();
        plus.values[k] += h;
        let mut minus = params.clone();
        minus.values[k] -= h;
        let num = (loss_and_grad(&plus, &batch).unwrap().0
            - loss_and_grad(&minus, &batch).unwrap().0)
            / (2.0 * h);
        worst = worst.max(rel_err(grad[k], num));
    }
    worst
}

/// VGAE weight gradients vs central differences at fixed noise; returns the
/// worst relative error.
pub fn vgae_fd_error(seed: u64) -> f64 {
    let mut r = rng(3000 + seed);
    let n = r.random_range(3..=6);
    let x = gaussian(&mut r, n, 5);
    let g = build_update_graph(&x, 0.0).unwrap();
    let params = VgaeParams::init(5, 4, 2, 0, 3000 + seed);
    let eps = sample_noise(n, 2, &mut r);
    let (_, grads) = loss_and_grads(&params, &g, &eps).unwrap();
    let loss = |p: &VgaeParams| loss_and_grads(p, &g, &eps).unwrap().0.total;
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut check = |get: fn(&mut VgaeParams) -> &mut Array2<f64>, analytic: &Array2<f64>| {
        for (idx, &a) in analytic.indexed_iter() {
            let mut plus = params.clone();
            get(&mut plus)[idx] += h;
            let mut minus = params.clone();
            get(&mut minus)[idx] -= h;
            let num = (loss(&plus) - loss(&minus)) / (2.0 * h);
            // ReLU kinks make a few coordinates non-differentiable; skip
            // those where one-sided slopes disagree.
            let l0 = loss(&params);
            let right = (loss(&plus) - l0) / h;
            let left = (l0 - loss(&minus)) / h;
            if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(1.0) {
                continue;
            }
            worst = worst.max(rel_err(a, num));
        }
    };
    check(|p| &mut p.w0, &grads.w0);
    check(|p| &mut p.w_mu, &grads.w_mu);
    check(|p| &mut p.w_logvar, &grads.w_logvar);
    worst
}

pub fn random_adjacency(r: &mut ChaCha8Rng, n: usize, p: f64) -> Array2<f64> {
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            if r.random_bool(p) {
                a[[i, j]] = 1.0;
                a[[j, i]] = 1.0;
            }
        }
    }
    a
}

pub fn component_count(a: &Array2<f64>) -> usize {
    let n = a.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut x = x;
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if a[[i, j]] != 0.0 {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }
    (0..n).filter(|&i| find(&mut parent, i) == i).count()
}

/// Laplacian eigen suite: reconstruction, nalgebra agreement on the
/// spectrum, and zero-eigenvalue multiplicity vs union-find.
pub fn check_laplacian_eigen(graphs: u64) -> Result<(), String> {
    for seed in 0..graphs {
        let mut r = rng(4000 + seed);
        let n = r.random_range(2..=12);
        let p = r.random_range(0.05..0.6);
        let a = random_adjacency(&mut r, n, p);
        let l = laplacian(&a);
        let eig = laplacian_eigen(&l).map_err(|e| e.to_string())?;
        let recon = eig
            .vectors
            .dot(&Array2::from_diag(&eig.values))
            .dot(&eig.vectors.t());
        let err = (&recon - &l).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if err > 1e-6 {
            return Err(format!("seed {seed}: reconstruction error {err}"));
        }
        let mut reference: Vec<f64> = nalgebra::DMatrix::from_fn(n, n, |i, j| l[[i, j]])
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        reference.sort_by(f64::total_cmp);
        for (a, b) in eig.values.iter().zip(&reference) {
            if (a - b).abs() > 1e-8 {
                return Err(format!("seed {seed}: eigenvalue {a} vs nalgebra {b}"));
            }
        }
        let zeros = eig.values.iter().filter(|v| v.abs() < 1e-8).count();
        let comps = component_count(&a);
        if zeros != comps {
            return Err(format!(
                "seed {seed}: {zeros} zero eigenvalues, {comps} components"
            ));
        }
    }
    Ok(())
}

/// GSP round trip: synthesis on the original adjacency returns X and
/// conserves the Frobenius norm.
pub fn check_gsp_round_trip(instances: u64) -> Result<(), String> {
    for seed in 0..instances {
        let mut r = rng(5000 + seed);
        let n = r.random_range(2..=10);
        let d = r.random_range(1..=12);
        let x = gaussian(&mut r, n, d);
        let g = UpdateGraph {
            x: x.clone(),
            adjacency: random_adjacency(&mut r, n, 0.4),
            tau_edge: 0.0,
        };
        let dec = gsp_decompose(&g).map_err(|e| e.to_string())?;
        let syn = gsp_synthesize(&dec, &g.adjacency).map_err(|e| e.to_string())?;
        let err = (&syn - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if err > 1e-6 {
            return Err(format!("seed {seed}: round trip error {err}"));
        }
        let fro = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (a, b) = (fro(&x), fro(&dec.coefficients));
        if (a - b).abs() > 1e-6 {
            return Err(format!("seed {seed}: energy {a} vs {b}"));
        }
    }
    Ok(())
}
