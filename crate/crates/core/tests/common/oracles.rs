//! Brute-force reference implementations of the graph, routing, refinement and
//! distillation ops, compared against the library on random small fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmow_core::adapt::{distill_init, refine_prototypes, refinement_weights, RefinementConfig};
use tmow_core::nncore::Tensor;
use tmow_core::router::{adjust, context_edge_matrix, mpnn_layer, route, PrototypeSet, Projections};
use tmow_core::worldmodel::{Adapter, AdapterLayer};

pub const CASES: u64 = 100;

type Mat = Vec<Vec<f64>>;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn to_tensor(m: &Mat) -> Tensor {
    let (r, c) = (m.len(), m[0].len());
    Tensor::matrix(r, c, m.iter().flatten().copied().collect()).unwrap()
}

fn from_tensor(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| (0..t.cols()).map(|j| t.get(i, j)).collect()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn tr(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!((a.len(), a[0].len()), (b.len(), b[0].len()));
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn vec_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn softmax(v: &[f64], tau: f64) -> Vec<f64> {
    let e: Vec<f64> = v.iter().map(|x| (x / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Symmetric 0/1 adjacency without self-loops.
fn rand_adjacency(rng: &mut ChaCha8Rng, n: usize) -> Mat {
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(0.5) {
                a[i][j] = 1.0;
                a[j][i] = 1.0;
            }
        }
    }
    a
}

fn rand_positive(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(0.1..2.0)).collect()).collect()
}

fn mpnn_oracle(h: &Mat, e: &Mat, w_m: &Mat, w_u: &Mat) -> Mat {
    let n = h.len();
    let deg: Vec<f64> = e.iter().map(|row| row.iter().sum()).collect();
    let mut norm = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            norm[i][j] = e[i][j] / (deg[i] * deg[j]).sqrt();
        }
    }
    let pre = mm(&mm(&norm, &mm(h, w_m)), w_u);
    pre.iter().map(|row| row.iter().map(|x| sigmoid(*x)).collect()).collect()
}

pub fn mpnn_layer_error() -> f64 {
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let n = rng.random_range(3..=5);
        let (f, d) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let h = rand_mat(&mut rng, n, f);
        let a = rand_adjacency(&mut rng, n);
        let w = rand_positive(&mut rng, n, n);
        let mut e = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                e[i][j] = (a[i][j] + if i == j { 1.0 } else { 0.0 }) * w[i][j];
            }
        }
        let (w_m, w_u) = (rand_mat(&mut rng, f, d), rand_mat(&mut rng, d, d));
        let got = mpnn_layer(&to_tensor(&h), &to_tensor(&e), &to_tensor(&w_m), &to_tensor(&w_u)).unwrap();
        worst = worst.max(max_diff(&from_tensor(&got), &mpnn_oracle(&h, &e, &w_m, &w_u)));
    }
    worst
}

pub fn context_edge_matrix_error() -> f64 {
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
        let n = rng.random_range(3..=5);
        let a = rand_adjacency(&mut rng, n);
        let r = rand_positive(&mut rng, n, n);
        let g = rand_mat(&mut rng, n, n);
        let got = context_edge_matrix(&to_tensor(&a), &to_tensor(&r), &to_tensor(&g)).unwrap();
        let mut want = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let self_loop = if i == j { 1.0 } else { 0.0 };
                want[i][j] = (a[i][j] + self_loop) * r[i][j] * g[i][j];
            }
        }
        worst = worst.max(max_diff(&from_tensor(&got), &want));
    }
    worst
}

pub fn adjust_error() -> f64 {
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + case);
        let n = rng.random_range(3..=5);
        let (f, dh, d, t) = (
            rng.random_range(2..=4),
            rng.random_range(2..=4),
            rng.random_range(1..=3),
            rng.random_range(1..=4),
        );
        let h = rand_mat(&mut rng, n, f);
        let phi = rand_mat(&mut rng, t, dh);
        let (qh, qi, kh, ki) = (
            rand_mat(&mut rng, f, d),
            rand_mat(&mut rng, dh, d),
            rand_mat(&mut rng, f, d),
            rand_mat(&mut rng, dh, d),
        );
        let proj = Projections {
            w_qh: to_tensor(&qh),
            w_qi: to_tensor(&qi),
            w_kh: to_tensor(&kh),
            w_ki: to_tensor(&ki),
        };
        let got = adjust(&to_tensor(&h), &to_tensor(&phi), &proj).unwrap();
        let x = mm(&mm(&h, &qh), &tr(&mm(&phi, &qi)));
        let y = mm(&mm(&h, &kh), &tr(&mm(&phi, &ki)));
        let g = mm(&x, &tr(&y));
        let scale = (d as f64).sqrt();
        let want: Mat = g.iter().map(|row| row.iter().map(|v| (v / scale).max(0.0)).collect()).collect();
        worst = worst.max(max_diff(&from_tensor(&got), &want));
    }
    worst
}

fn rand_prototypes(rng: &mut ChaCha8Rng, layers: usize, experts: usize, d: usize) -> PrototypeSet {
    PrototypeSet {
        layers: (0..layers).map(|_| rand_mat(rng, experts, d)).collect(),
    }
}

pub fn route_error() -> f64 {
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + case);
        let (layers, n, d) = (rng.random_range(1..=3), rng.random_range(3..=5), rng.random_range(2..=4));
        let protos = rand_prototypes(&mut rng, layers, n, d);
        let emb = rand_mat(&mut rng, layers, d);
        let k = rng.random_range(1..=n);
        let tau = rng.random_range(0.1..2.0);
        let got = route(&emb, &protos, k, tau).unwrap();
        for l in 0..layers {
            let scores: Vec<f64> = protos.layers[l].iter().map(|p| cos(&emb[l], p)).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|a, b| scores[*b].partial_cmp(&scores[*a]).unwrap().then(a.cmp(b)));
            let kept = &order[..k];
            let sm = softmax(&kept.iter().map(|j| scores[*j]).collect::<Vec<_>>(), tau);
            let mut want = vec![0.0; n];
            for (j, w) in kept.iter().zip(sm) {
                want[*j] = w;
            }
            worst = worst.max(vec_diff(&got.scores[l], &scores)).max(vec_diff(&got.weights[l], &want));
        }
    }
    worst
}

fn refinement_weights_oracle(p: &PrototypeSet, l: usize, j: usize, tau_r: f64) -> Vec<f64> {
    let sims: Vec<f64> = p.layers[l].iter().map(|pk| cos(&p.layers[l][j], pk)).collect();
    softmax(&sims, tau_r)
}

pub fn refinement_weights_error() -> f64 {
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + case);
        let (layers, n, d) = (rng.random_range(1..=3), rng.random_range(3..=5), rng.random_range(2..=4));
        let protos = rand_prototypes(&mut rng, layers, n, d);
        let tau_r = rng.random_range(0.1..2.0);
        for l in 0..layers {
            for j in 0..n {
                let got = refinement_weights(&protos, l, j, tau_r).unwrap();
                worst = worst.max(vec_diff(&got, &refinement_weights_oracle(&protos, l, j, tau_r)));
            }
        }
    }
    worst
}

pub fn refine_prototypes_error() -> f64 {
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + case);
        let (layers, n, d) = (rng.random_range(1..=3), rng.random_range(3..=5), rng.random_range(2..=4));
        let before = rand_prototypes(&mut rng, layers, n, d);
        let emb = rand_mat(&mut rng, layers, d);
        let cfg = RefinementConfig {
            alpha: rng.random_range(0.0..=1.0),
            tau_r: rng.random_range(0.1..2.0),
            exact: rng.random_bool(0.5),
            ..RefinementConfig::default()
        };
        let mut got = before.clone();
        refine_prototypes(&mut got, &emb, &cfg).unwrap();
        for l in 0..layers {
            for j in 0..n {
                let r = refinement_weights_oracle(&before, l, j, cfg.tau_r);
                let pj = &before.layers[l][j];
                let mut c = cfg.alpha * cos(&emb[l], pj);
                if !cfg.exact {
                    c = c.clamp(0.0, 1.0);
                }
                for t in 0..d {
                    let delta: f64 = (0..n).map(|k| r[k] * before.layers[l][k][t]).sum();
                    let want = (1.0 - c) * pj[t] + c * delta;
                    worst = worst.max((got.layers[l][j][t] - want).abs());
                }
            }
        }
    }
    worst
}

pub fn distill_init_error() -> f64 {
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + case);
        let (layers, n, dh, rank) = (
            rng.random_range(1..=3),
            rng.random_range(3..=5),
            rng.random_range(3..=5),
            rng.random_range(1..=2),
        );
        let raw: Vec<Vec<(Mat, Mat)>> = (0..n)
            .map(|_| (0..layers).map(|_| (rand_mat(&mut rng, dh, rank), rand_mat(&mut rng, rank, dh))).collect())
            .collect();
        let adapters: Vec<Adapter> = raw
            .iter()
            .map(|a| Adapter {
                rank,
                layers: a
                    .iter()
                    .map(|(down, up)| AdapterLayer { down: to_tensor(down), up: to_tensor(up) })
                    .collect(),
            })
            .collect();
        let weights: Vec<Vec<f64>> = (0..layers)
            .map(|_| {
                let k = rng.random_range(1..=n);
                let mut w: Vec<f64> = (0..n).map(|j| if j < k { rng.random_range(0.1..1.0) } else { 0.0 }).collect();
                let s: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x /= s);
                w
            })
            .collect();
        let got = distill_init(&adapters, &weights).unwrap();
        for l in 0..layers {
            let mut down = vec![vec![0.0; rank]; dh];
            let mut up = vec![vec![0.0; dh]; rank];
            for j in 0..n {
                for (r, row) in raw[j][l].0.iter().enumerate() {
                    for (c, v) in row.iter().enumerate() {
                        down[r][c] += weights[l][j] * v;
                    }
                }
                for (r, row) in raw[j][l].1.iter().enumerate() {
                    for (c, v) in row.iter().enumerate() {
                        up[r][c] += weights[l][j] * v;
                    }
                }
            }
            worst = worst
                .max(max_diff(&from_tensor(&got.layers[l].down), &down))
                .max(max_diff(&from_tensor(&got.layers[l].up), &up));
        }
    }
    worst
}

/// Worst absolute deviation from the oracle for each op, in a fixed order.
pub fn all_errors() -> Vec<(&'static str, f64)> {
    vec![
        ("mpnn_layer", mpnn_layer_error()),
        ("context_edge_matrix", context_edge_matrix_error()),
        ("adjust", adjust_error()),
        ("route", route_error()),
        ("refinement_weights", refinement_weights_error()),
        ("refine_prototypes", refine_prototypes_error()),
        ("distill_init", distill_init_error()),
    ]
}
