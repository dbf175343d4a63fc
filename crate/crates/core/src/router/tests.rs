use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::graphworld::{
    generate_domain, RelationWeights, TaskCategory, Vocabulary,
};
use crate::nncore::Tensor;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn small_processor(seed: u64) -> (Vocabulary, GraphProcessor) {
    let vocab = Vocabulary::new();
    let dims = ProcessorDims {
        layers: 4,
        hidden: 8,
        proj_dim: 4,
        feature_width: crate::graphworld::catalog::feature_width(),
        vocab_size: vocab.len(),
    };
    let p = GraphProcessor::new(dims, &default_message_passing_layers(4), seed).unwrap();
    (vocab, p)
}

fn inputs(vocab: &Vocabulary, scene: usize, task: TaskCategory, count: usize, seed: u64) -> Vec<RouterInput> {
    let d = generate_domain(seed, task, scene).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let ep = d.sample_episode(&mut rng).unwrap();
            RouterInput::new(vocab, &RelationWeights::default(), &ep.instruction, &ep.initial).unwrap()
        })
        .collect()
}

#[test]
fn message_passing_layout() {
    assert_eq!(default_message_passing_layers(8), vec![0, 2, 4, 6]);
    assert_eq!(default_message_passing_layers(16), vec![0, 4, 8, 12]);
    assert_eq!(default_message_passing_layers(2), vec![0, 1]);
    let (_, p) = small_processor(0);
    assert_eq!(p.message_passing_layers(), vec![0, 1, 2, 3]);
    let vocab = Vocabulary::new();
    let dims = ProcessorDims { layers: 4, hidden: 8, proj_dim: 4, feature_width: 3, vocab_size: vocab.len() };
    assert!(GraphProcessor::new(dims, &[2, 1], 0).is_err());
    assert!(GraphProcessor::new(dims, &[0, 4], 0).is_err());
}

fn scalar_proj(qh: f64, qi: f64, kh: f64, ki: f64) -> Projections {
    let s = |x| Tensor::matrix(1, 1, vec![x]).unwrap();
    Projections { w_qh: s(qh), w_qi: s(qi), w_kh: s(kh), w_ki: s(ki) }
}

#[test]
fn adjust_zero_h_gives_zero_gate() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let proj = Projections {
        w_qh: Tensor::randn(&[3, 2], 1.0, &mut rng),
        w_qi: Tensor::randn(&[4, 2], 1.0, &mut rng),
        w_kh: Tensor::randn(&[3, 2], 1.0, &mut rng),
        w_ki: Tensor::randn(&[4, 2], 1.0, &mut rng),
    };
    let g = adjust(&Tensor::zeros(&[5, 3]), &Tensor::randn(&[2, 4], 1.0, &mut rng), &proj).unwrap();
    assert_eq!(g.shape(), &[5, 5]);
    assert!(g.data().iter().all(|x| *x == 0.0));
}

#[test]
fn adjust_scalar_formula() {
    let (h, phi) = (1.5, -0.5);
    let proj = scalar_proj(2.0, -1.0, 0.5, 3.0);
    let g = adjust(&Tensor::matrix(1, 1, vec![h]).unwrap(), &Tensor::matrix(1, 1, vec![phi]).unwrap(), &proj).unwrap();
    let expect = ((h * 2.0) * (phi * -1.0) * (h * 0.5) * (phi * 3.0)).max(0.0);
    assert!((g.get(0, 0) - expect).abs() < 1e-12);
}

#[test]
fn adjust_rejects_empty_instruction() {
    let proj = scalar_proj(1.0, 1.0, 1.0, 1.0);
    let empty = Tensor::new(vec![0, 1], vec![]).unwrap();
    assert!(matches!(
        adjust(&Tensor::matrix(1, 1, vec![1.0]).unwrap(), &empty, &proj),
        Err(crate::TmowError::Input(_))
    ));
}

#[test]
fn adjust_doubling_d_scales_by_inverse_sqrt2() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = Tensor::randn(&[3, 2], 1.0, &mut rng);
    let phi = Tensor::randn(&[2, 2], 1.0, &mut rng);
    let proj = Projections {
        w_qh: Tensor::randn(&[2, 2], 1.0, &mut rng),
        w_qi: Tensor::randn(&[2, 2], 1.0, &mut rng),
        w_kh: Tensor::randn(&[2, 2], 1.0, &mut rng),
        w_ki: Tensor::randn(&[2, 2], 1.0, &mut rng),
    };
    let pad = |t: &Tensor| {
        let rows: Vec<Vec<f64>> = (0..t.rows()).map(|i| [t.row(i), &[0.0, 0.0]].concat()).collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let wide = Projections { w_qh: pad(&proj.w_qh), w_qi: pad(&proj.w_qi), w_kh: pad(&proj.w_kh), w_ki: pad(&proj.w_ki) };
    let a = adjust(&h, &phi, &proj).unwrap();
    let b = adjust(&h, &phi, &wide).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x / 2f64.sqrt() - y).abs() < 1e-12);
    }
}

#[test]
fn context_edges_reduce_to_a_plus_i() {
    let a = Tensor::matrix(3, 3, vec![0., 1., 0., 1., 0., 1., 0., 1., 0.]).unwrap();
    let ones = Tensor::matrix(3, 3, vec![1.0; 9]).unwrap();
    let e = context_edge_matrix(&a, &ones, &ones).unwrap();
    assert_eq!(e.data(), &[1., 1., 0., 1., 1., 1., 0., 1., 1.]);

    let e = context_edge_matrix(&Tensor::zeros(&[3, 3]), &Tensor::identity(3), &ones).unwrap();
    assert_eq!(e, Tensor::identity(3));
    assert!(matches!(
        context_edge_matrix(&a, &Tensor::zeros(&[2, 2]), &ones),
        Err(crate::TmowError::Dimension { .. })
    ));
}

#[test]
fn single_node_mpnn_is_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = Tensor::randn(&[1, 3], 1.0, &mut rng);
    let (wm, wu) = (Tensor::randn(&[3, 4], 1.0, &mut rng), Tensor::randn(&[4, 4], 1.0, &mut rng));
    let m = mpnn_layer(&h, &Tensor::identity(1), &wm, &wu).unwrap();
    let d = dense_layer(&h, &wm, &wu).unwrap();
    assert_eq!(m, d);
    let pre = crate::nncore::matmul(&crate::nncore::matmul(&h, &wm).unwrap(), &wu).unwrap();
    for (x, p) in m.data().iter().zip(pre.data()) {
        assert!((x - sig(*p)).abs() < 1e-15);
    }
}

#[test]
fn identical_nodes_get_identical_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let row = Tensor::randn(&[1, 3], 1.0, &mut rng);
    let h = Tensor::from_rows(&[row.data().to_vec(), row.data().to_vec()]).unwrap();
    let e = Tensor::matrix(2, 2, vec![1.0, 0.4, 0.4, 1.0]).unwrap();
    let out = mpnn_layer(&h, &e, &Tensor::randn(&[3, 4], 1.0, &mut rng), &Tensor::randn(&[4, 4], 1.0, &mut rng)).unwrap();
    assert_eq!(out.row(0), out.row(1));
}

#[test]
fn zero_row_sum_names_the_node() {
    let e = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let err = mpnn_layer(&Tensor::zeros(&[2, 2]), &e, &Tensor::identity(2), &Tensor::identity(2)).unwrap_err();
    assert!(matches!(err, crate::TmowError::Degenerate(_)));
    assert!(err.to_string().contains("node 1"), "{err}");
}

#[test]
fn processor_is_deterministic_and_permutation_invariant() {
    let (vocab, p) = small_processor(4);
    for x in inputs(&vocab, 2, TaskCategory::OpenPlace, 5, 3) {
        let a = p.embed(&x).unwrap();
        assert_eq!(a, p.embed(&x).unwrap());
        assert_eq!(a.len(), 4);
        let n = x.graph.n;
        let perm: Vec<usize> = (0..n).rev().collect();
        let y = RouterInput { graph: x.graph.permuted(&perm), instruction: x.instruction.clone() };
        let b = p.embed(&y).unwrap();
        for (la, lb) in a.iter().zip(&b) {
            for (u, v) in la.iter().zip(lb) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn prototype_is_the_mean_embedding() {
    let (vocab, p) = small_processor(5);
    let xs = inputs(&vocab, 0, TaskCategory::Fetch, 2, 1);
    let one = extract_prototypes(&p, &xs[..1]).unwrap();
    assert_eq!(one, p.embed(&xs[0]).unwrap());
    let twice = extract_prototypes(&p, &[xs[0].clone(), xs[0].clone()]).unwrap();
    assert_eq!(twice, one);
    let both = extract_prototypes(&p, &xs).unwrap();
    let (e0, e1) = (p.embed(&xs[0]).unwrap(), p.embed(&xs[1]).unwrap());
    for l in 0..4 {
        for i in 0..8 {
            assert!((both[l][i] - (e0[l][i] + e1[l][i]) / 2.0).abs() < 1e-15);
        }
    }
    assert!(matches!(extract_prototypes(&p, &[]), Err(crate::TmowError::Config(_))));
}

fn set(vs: &[Vec<f64>]) -> PrototypeSet {
    let mut s = PrototypeSet::empty(1);
    for v in vs {
        s.push_expert(vec![v.clone()]).unwrap();
    }
    s
}

#[test]
fn route_worked_example() {
    let h = 2f64.sqrt() / 2.0;
    let protos = set(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![h, h]]);
    let d = route(&[vec![1.0, 0.0]], &protos, 2, 1.0).unwrap();
    let z = 1f64.exp() + h.exp();
    assert!((d.weights[0][0] - 1f64.exp() / z).abs() < 1e-12);
    assert!((d.weights[0][2] - h.exp() / z).abs() < 1e-12);
    assert_eq!(d.weights[0][1], 0.0);
    assert!((d.weights[0][0] - 0.5727).abs() < 1e-4);
}

#[test]
fn route_without_sparsification_and_cold_limit() {
    let protos = set(&[vec![1.0, 0.2], vec![0.3, 1.0], vec![1.0, 1.0]]);
    let e = vec![vec![0.9, 0.1]];
    let d = route(&e, &protos, 3, 1.0).unwrap();
    let plain = crate::nncore::softmax(&d.scores[0], 1.0).unwrap();
    assert_eq!(d.weights[0], plain);
    let cold = route(&e, &protos, 2, 0.01).unwrap();
    assert!(cold.weights[0].iter().cloned().fold(0.0, f64::max) > 0.999);
}

#[test]
fn oversized_k_clamps() {
    let protos = set(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let d = route(&[vec![1.0, 1.0]], &protos, 5, 1.0).unwrap();
    assert!(d.k_clamped);
    assert_eq!(d.k, 2);
    assert!(d.weights[0].iter().all(|w| *w > 0.0));
}

#[test]
fn ties_go_to_the_lowest_index() {
    let w = top_k_softmax(&[0.5, 0.9, 0.5, 0.5], 2, 1.0).unwrap();
    assert!(w[0] > 0.0 && w[1] > 0.0 && w[2] == 0.0 && w[3] == 0.0);
}

proptest! {
    #[test]
    fn routing_weights_are_sparse_simplex(
        scores in proptest::collection::vec(-1.0f64..1.0, 1..9),
        k in 1usize..10,
        tau in 0.05f64..3.0,
    ) {
        let w = top_k_softmax(&scores, k, tau).unwrap();
        let nonzero = w.iter().filter(|x| **x > 0.0).count();
        prop_assert_eq!(nonzero, k.min(scores.len()));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|x| *x >= 0.0));
    }
}

#[test]
fn lambda_zero_is_exactly_l1() {
    let (vocab, p) = small_processor(6);
    let mut items: Vec<(RouterInput, usize)> = inputs(&vocab, 0, TaskCategory::Fetch, 3, 2).into_iter().map(|x| (x, 0)).collect();
    items.extend(inputs(&vocab, 1, TaskCategory::Relocate, 3, 2).into_iter().map(|x| (x, 1)));
    let batch: Vec<(&RouterInput, usize)> = items.iter().map(|(x, d)| (x, *d)).collect();
    let params = ContrastiveParams { lambda: 0.0, ..ContrastiveParams::default() };
    let l = contrastive_losses(&p, &batch, &params, 0).unwrap();
    assert_eq!(l.total.to_bits(), l.l1.to_bits());
}

#[test]
fn one_hot_embeddings_match_the_closed_form() {
    let b = 4;
    let tau = 0.1;
    let mut tape = crate::nncore::Tape::new();
    let z = tape.constant(&Tensor::identity(b));
    let z2 = tape.constant(&Tensor::identity(b));
    let (l1, l2, _) = cl_on_tape(&mut tape, z, z2, &[0, 0, 1, 1], tau, 1.0).unwrap();
    let e = (1.0 / tau).exp();
    let expect = -(e / (e + (b as f64 - 1.0))).ln();
    assert!((tape.scalar(l1) - expect).abs() < 1e-12);
    let expect2 = -((e + 1.0) / (e + (b as f64 - 1.0))).ln();
    assert!((tape.scalar(l2) - expect2).abs() < 1e-12);
}

#[test]
fn single_domain_batch() {
    let mut tape = crate::nncore::Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = tape.constant(&Tensor::randn(&[3, 4], 1.0, &mut rng));
    let z2 = tape.constant(&Tensor::randn(&[3, 4], 1.0, &mut rng));
    assert!(matches!(
        cl_on_tape(&mut tape, z, z2, &[2, 2, 2], 0.1, 1.0),
        Err(crate::TmowError::Degenerate(_))
    ));
    let (_, l2, _) = contrastive::cl_on_tape_unguarded(&mut tape, z, z2, &[2, 2, 2], 0.1, 1.0).unwrap();
    assert_eq!(tape.scalar(l2), 0.0);
}

#[test]
fn augmentation_rates_and_determinism() {
    let vocab = Vocabulary::new();
    let x = &inputs(&vocab, 3, TaskCategory::Fetch, 1, 0)[0];
    assert_eq!(augment_graph(&x.graph, 0.0, 0.0, 9), x.graph);
    assert_eq!(augment_graph(&x.graph, 0.1, 0.2, 9), augment_graph(&x.graph, 0.1, 0.2, 9));
    let edges = |g: &crate::graphworld::ObservationGraph| g.adjacency.iter().filter(|a| **a != 0.0).count();
    let total = edges(&x.graph);
    let mut dropped = 0;
    for seed in 0..1000 {
        let g = augment_graph(&x.graph, 0.1, 0.2, seed);
        g.validate().unwrap();
        assert_eq!(&g.features[..g.feature_width], &x.graph.features[..g.feature_width]);
        dropped += total - edges(&g);
    }
    let frac = dropped as f64 / (1000 * total) as f64;
    assert!((frac - 0.2).abs() < 0.03, "{frac}");
}

#[test]
fn pretraining_lowers_held_out_loss() {
    let (vocab, mut p) = small_processor(7);
    let domains = [(0, TaskCategory::Fetch), (1, TaskCategory::Relocate), (2, TaskCategory::OpenPlace)];
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (d, (scene, task)) in domains.iter().enumerate() {
        train.extend(inputs(&vocab, *scene, *task, 10, 11).into_iter().map(|x| (x, d)));
        held.extend(inputs(&vocab, *scene, *task, 4, 99).into_iter().map(|x| (x, d)));
    }
    let params = ContrastiveParams { steps: 60, batch: 12, lr: 0.1, warmup: 5, ..ContrastiveParams::default() };
    let batch: Vec<(&RouterInput, usize)> = held.iter().map(|(x, d)| (x, *d)).collect();
    let before = contrastive_losses(&p, &batch, &params, 0).unwrap().total;
    contrastive_pretrain(&mut p, &train, &params).unwrap();
    let after = contrastive_losses(&p, &batch, &params, 0).unwrap().total;
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn router_checkpoint_round_trip() {
    let (vocab, p) = small_processor(8);
    let mut r = Router::new(p);
    for scene in 0..2 {
        let xs = inputs(&vocab, scene, TaskCategory::Fetch, 2, 0);
        let proto = extract_prototypes(&r.processor, &xs).unwrap();
        r.prototypes.push_expert(proto).unwrap();
    }
    let c = r.to_checkpoint(3, "abc").unwrap();
    let back = Router::from_checkpoint(&crate::checkpoint::Checkpoint::from_json(&c.to_json().unwrap()).unwrap()).unwrap();
    assert_eq!(back, r);
    let x = &inputs(&vocab, 0, TaskCategory::Fetch, 1, 5)[0];
    assert_eq!(back.route(x, 1, 1.0).unwrap().weights.len(), 4);
}
