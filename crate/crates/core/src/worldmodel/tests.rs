use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::graphworld::{demonstrate, generate_domain, TaskCategory, DEFAULT_MAX_STEPS};

fn dims(vocab: &Vocabulary) -> ModelDims {
    ModelDims::new(3, 8, 2, vocab)
}

fn random_adapter(d: &ModelDims, rng: &mut ChaCha8Rng) -> Adapter {
    let mut a = Adapter::new(d, rng);
    for l in &mut a.layers {
        l.up = Tensor::randn(&[d.rank, d.hidden], 0.3, rng);
    }
    a
}

fn fixture(seed: u64, n: usize) -> (Vocabulary, Mixture, Vec<Sample>) {
    let vocab = Vocabulary::new();
    let d = dims(&vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = BaseModel::new(d, &mut rng).unwrap();
    let adapters = (0..n).map(|_| random_adapter(&d, &mut rng)).collect();
    let domain = generate_domain(seed, TaskCategory::Relocate, 1).unwrap();
    let mut samples = Vec::new();
    while samples.len() < 6 {
        let ep = domain.sample_episode(&mut rng).unwrap();
        let demo = demonstrate(&ep, DEFAULT_MAX_STEPS).unwrap();
        samples.extend(samples_from_demo(&vocab, &demo).unwrap());
    }
    (vocab, Mixture::new(base, adapters).unwrap(), samples)
}

fn mv(y: &[f64], w: &Tensor) -> Vec<f64> {
    let (r, c) = (w.rows(), w.cols());
    assert_eq!(y.len(), r);
    (0..c).map(|j| (0..r).map(|i| y[i] * w.get(i, j)).sum()).collect()
}

fn plus(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Scalar-loop forward of one input, independent of the tape.
fn oracle_hidden(m: &Mixture, io: &EncodedIo, w: Option<&LayerWeights>) -> Vec<Vec<f64>> {
    let b = &m.base;
    let d = b.dims.hidden;
    let mut inst = vec![0.0; d];
    for t in &io.instruction {
        inst = plus(&inst, b.emb_instruction.row(*t));
    }
    inst.iter_mut().for_each(|x| *x /= io.instruction.len() as f64);
    let mut trip = vec![0.0; d];
    for t in &io.triples {
        let e = plus(
            &plus(&plus(b.emb_subject.row(t[0]), b.emb_relation.row(t[1])), b.emb_object.row(t[2])),
            b.emb_bias.data(),
        );
        trip = plus(&trip, &e.iter().map(|x| x.max(0.0)).collect::<Vec<_>>());
    }
    trip.iter_mut().for_each(|x| *x /= io.triples.len() as f64);
    let mut y = plus(&inst, &trip);
    let mut out = vec![y.clone()];
    for (l, blk) in b.blocks.iter().enumerate() {
        let h: Vec<f64> = plus(&mv(&y, &blk.w1), blk.b1.data()).iter().map(|x| x.max(0.0)).collect();
        let mut next = plus(&y, &plus(&mv(&h, &blk.w2), blk.b2.data()));
        if let Some(w) = w {
            for (j, a) in m.adapters.iter().enumerate() {
                let delta = mv(&mv(&y, &a.layers[l].down), &a.layers[l].up);
                next = plus(&next, &delta.iter().map(|x| w[l][j] * x).collect::<Vec<_>>());
            }
        }
        y = next;
        out.push(y.clone());
    }
    out
}

fn oracle_logits(m: &Mixture, y: &[f64]) -> Vec<f64> {
    plus(&mv(y, &m.base.action_weight), m.base.action_bias.data())
}

fn ce(logits: &[f64], target: usize) -> f64 {
    let z: f64 = logits.iter().map(|x| x.exp()).sum();
    -(logits[target].exp() / z).ln()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn empty_mixture_is_the_base_model() {
    let (_, m, samples) = fixture(1, 3);
    let zeros = vec![vec![0.0; 3]; m.dims().layers];
    let inputs: Vec<&EncodedIo> = samples.iter().map(|s| &s.io).collect();
    let mixed = m.forward(&inputs, Routing::Shared(&zeros)).unwrap();
    let base = m.base.forward(&inputs).unwrap();
    assert_eq!(mixed, base);
}

#[test]
fn one_hot_mixture_is_the_single_adapter_model() {
    let (_, m, samples) = fixture(2, 3);
    let single = Mixture::new(m.base.clone(), vec![m.adapters[1].clone()]).unwrap();
    let l = m.dims().layers;
    let inputs: Vec<&EncodedIo> = samples.iter().map(|s| &s.io).collect();
    let a = m.forward(&inputs, Routing::Shared(&one_hot_weights(l, 3, 1))).unwrap();
    let b = single.forward(&inputs, Routing::Shared(&one_hot_weights(l, 1, 0))).unwrap();
    assert_eq!(a, b);
}

#[test]
fn half_half_mixture_matches_hand_composition() {
    let (_, m, samples) = fixture(3, 2);
    let w: LayerWeights = vec![vec![0.5, 0.5]; m.dims().layers];
    let out = m.forward(&[&samples[0].io], Routing::Shared(&w)).unwrap();
    let oracle = oracle_hidden(&m, &samples[0].io, Some(&w));
    for (h, o) in out.hidden.iter().zip(&oracle) {
        assert!(max_abs_diff(h.row(0), o) < 1e-10);
    }
    let logits = oracle_logits(&m, oracle.last().unwrap());
    assert!(max_abs_diff(out.action_logits.row(0), &logits) < 1e-10);
}

#[test]
fn every_layer_is_base_block_plus_weighted_deltas() {
    for seed in 0..5 {
        let (_, m, samples) = fixture(10 + seed, 3);
        let l = m.dims().layers;
        let w: LayerWeights = (0..l).map(|i| vec![0.2, 0.0, 0.8].into_iter().cycle().skip(i).take(3).collect()).collect();
        let out = m.forward(&[&samples[1].io], Routing::Shared(&w)).unwrap();
        let base_only = Mixture::new(m.base.clone(), vec![]).unwrap();
        for layer in 0..l {
            let y = &out.hidden[layer];
            let blk = &base_only.base.blocks[layer];
            let h = crate::nncore::matmul(y, &blk.w1).unwrap();
            let h: Vec<f64> = plus(h.data(), blk.b1.data()).iter().map(|x| x.max(0.0)).collect();
            let h = Tensor::matrix(1, m.dims().hidden, h).unwrap();
            let mut expect = plus(y.data(), &plus(crate::nncore::matmul(&h, &blk.w2).unwrap().data(), blk.b2.data()));
            for (j, a) in m.adapters.iter().enumerate() {
                let delta = a.layer_delta(layer, y).unwrap();
                expect = plus(&expect, &delta.data().iter().map(|x| w[layer][j] * x).collect::<Vec<_>>());
            }
            assert!(max_abs_diff(out.hidden[layer + 1].data(), &expect) < 1e-10);
        }
    }
}

#[test]
fn bad_weights_are_rejected() {
    let (_, m, samples) = fixture(4, 2);
    let l = m.dims().layers;
    let short = vec![vec![1.0]; l];
    assert!(matches!(
        m.forward(&[&samples[0].io], Routing::Shared(&short)),
        Err(TmowError::Dimension { .. })
    ));
    let neg = vec![vec![1.5, -0.5]; l];
    assert!(matches!(
        m.forward(&[&samples[0].io], Routing::Shared(&neg)),
        Err(TmowError::Contract(_))
    ));
}

#[test]
fn uniform_output_costs_ln_v_per_token() {
    let (vocab, mut m, samples) = fixture(5, 0);
    for t in [
        &mut m.base.action_weight,
        &mut m.base.action_bias,
        &mut m.base.obs_weight,
        &mut m.base.obs_position,
    ] {
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let loss = m.loss(&samples, Routing::Base).unwrap();
    assert!((loss.action - (action_vocab_size() as f64).ln()).abs() < 1e-12);
    assert!((loss.observation - (vocab.len() as f64).ln()).abs() < 1e-12);
}

#[test]
fn exact_target_distribution_costs_zero() {
    let (_, mut m, samples) = fixture(6, 0);
    let s = &samples[0];
    m.base.action_weight.data_mut().iter_mut().for_each(|x| *x = 0.0);
    m.base.obs_weight.data_mut().iter_mut().for_each(|x| *x = 0.0);
    let a = m.base.action_bias.data_mut();
    a.iter_mut().for_each(|x| *x = 0.0);
    a[s.action] = 1e4;
    let v = m.dims().vocab_size;
    let p = m.base.obs_position.data_mut();
    for (pos, tok) in s.observation.iter().enumerate() {
        p[pos * v + tok] = 1e4;
    }
    let loss = m.loss(std::slice::from_ref(s), Routing::Base).unwrap();
    assert_eq!(loss.total, 0.0);
}

#[test]
fn two_step_loss_matches_scalar_oracle() {
    let (_, m, samples) = fixture(7, 2);
    let two = &samples[..2];
    let w: LayerWeights = vec![vec![0.3, 0.7]; m.dims().layers];
    let loss = m.loss(two, Routing::Shared(&w)).unwrap();

    let (mut act, mut obs, mut n_obs) = (0.0, 0.0, 0);
    for s in two {
        let hidden = oracle_hidden(&m, &s.io, Some(&w));
        let y = hidden.last().unwrap();
        act += ce(&oracle_logits(&m, y), s.action);
        let base_obs = mv(y, &m.base.obs_weight);
        for (pos, tok) in s.observation.iter().enumerate() {
            let logits = plus(&base_obs, m.base.obs_position.row(pos));
            obs += ce(&logits, *tok);
            n_obs += 1;
        }
    }
    let (act, obs) = (act / 2.0, obs / n_obs as f64);
    assert!((loss.action - act).abs() < 1e-10);
    assert!((loss.observation - obs).abs() < 1e-10);
    assert!((loss.total - (act + obs) / 2.0).abs() < 1e-10);
}

fn params(steps: usize) -> TrainParams {
    TrainParams {
        steps,
        lr: 0.05,
        batch: 4,
        warmup: 2,
        seed: 3,
        optimizer: crate::nncore::Optimizer::Sgd,
        freeze_down: false,
        clip_norm: None,
    }
}

#[test]
fn zero_steps_keep_the_initial_adapter() {
    let (_, m, samples) = fixture(8, 1);
    let init = m.adapters[0].clone();
    let (a, trace) = train_adapter(&m.base, init.clone(), &samples, &params(0)).unwrap();
    assert_eq!(a, init);
    assert!(trace.losses.is_empty());
}

#[test]
fn adapter_training_lowers_the_loss() {
    let (_, m, samples) = fixture(9, 0);
    let init = Adapter::new(m.dims(), &mut ChaCha8Rng::seed_from_u64(0));
    let (a, trace) = train_adapter(&m.base, init, &samples, &params(60)).unwrap();
    let (first, last) = trace.endpoints(5).unwrap();
    assert!(last < first, "{first} -> {last}");
    let tuned = Mixture::new(m.base.clone(), vec![a]).unwrap();
    let w = one_hot_weights(m.dims().layers, 1, 0);
    let after = tuned.loss(&samples, Routing::Shared(&w)).unwrap().total;
    assert!(after < m.loss(&samples, Routing::Base).unwrap().total);
}

#[test]
fn empty_dataset_is_a_config_error() {
    let (_, m, _) = fixture(10, 0);
    let init = Adapter::new(m.dims(), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(
        train_adapter(&m.base, init, &[], &params(3)),
        Err(TmowError::Config(_))
    ));
}

#[test]
fn single_expert_joint_training_continues_adapter_training() {
    let (_, m, samples) = fixture(11, 1);
    let p = params(5);
    let (a, t1) = train_adapter(&m.base, m.adapters[0].clone(), &samples, &p).unwrap();
    let mut single = m.clone();
    let routing = vec![one_hot_weights(m.dims().layers, 1, 0); samples.len()];
    let t2 = joint_train_mixture(&mut single, &samples, &routing, &p).unwrap();
    assert_eq!(single.adapters[0], a);
    assert_eq!(t1, t2);
}

#[test]
fn gradients_reach_only_selected_experts() {
    let (_, m, samples) = fixture(12, 4);
    let l = m.dims().layers;
    let w: LayerWeights = (0..l)
        .map(|i| {
            let mut row = vec![0.0; 4];
            row[i % 4] = 0.6;
            row[(i + 2) % 4] = 0.4;
            row
        })
        .collect();
    let grads = adapter_gradients(&m, &samples[..1], &[w.clone()]).unwrap();
    for (j, per_layer) in grads.iter().enumerate() {
        for (layer, (gd, gu)) in per_layer.iter().enumerate() {
            let zero = gd.data().iter().chain(gu.data()).all(|x| *x == 0.0);
            assert_eq!(zero, w[layer][j] == 0.0, "expert {j} layer {layer}");
        }
    }
}

#[test]
fn routing_count_mismatch_is_a_contract_error() {
    let (_, mut m, samples) = fixture(13, 2);
    let routing = vec![one_hot_weights(m.dims().layers, 3, 0); samples.len()];
    assert!(matches!(
        joint_train_mixture(&mut m, &samples, &routing, &params(1)),
        Err(TmowError::Contract(_))
    ));
}

#[test]
fn checkpoint_round_trip() {
    let (vocab, m, _) = fixture(14, 2);
    let c = m.to_checkpoint(&vocab.hash(), 7).unwrap();
    let back = Mixture::from_checkpoint(&Checkpoint::from_json(&c.to_json().unwrap()).unwrap(), &vocab.hash()).unwrap();
    assert_eq!(back, m);
    assert_eq!(c.meta::<usize>("N").unwrap(), 2);
    assert!(Mixture::from_checkpoint(&c, "other").is_err());
}

#[test]
fn greedy_action_targets_present_entities() {
    let (vocab, m, _) = fixture(15, 0);
    let d = generate_domain(1, TaskCategory::Fetch, 2).unwrap();
    let ep = d.sample_episode(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let a = m.act(&vocab, &ep.instruction, &ep.initial, None).unwrap();
    assert!(ep.initial.index(&a.target).is_some());
}

#[test]
fn clipping_rescales_the_sgd_step_to_the_norm_ceiling() {
    let (_, m, samples) = fixture(14, 2);
    let routing = vec![vec![vec![0.5, 0.5]; m.dims().layers]; samples.len()];
    let grads = adapter_gradients(&m, &samples, &routing).unwrap();
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|(d, u)| d.data().iter().chain(u.data()))
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    let ceiling = norm / 4.0;
    let p = TrainParams { batch: samples.len(), ..params(1) };
    let step = |clip| {
        let mut mm = m.clone();
        joint_train_mixture(&mut mm, &samples, &routing, &TrainParams { clip_norm: clip, ..p }).unwrap();
        mm
    };
    let (free, clipped, loose) = (step(None), step(Some(ceiling)), step(Some(norm * 2.0)));
    assert_eq!(free, loose);
    for ((a0, a1), a2) in m.adapters.iter().zip(&free.adapters).zip(&clipped.adapters) {
        for ((l0, l1), l2) in a0.layers.iter().zip(&a1.layers).zip(&a2.layers) {
            for (t0, t1, t2) in [(&l0.down, &l1.down, &l2.down), (&l0.up, &l1.up, &l2.up)] {
                for ((x0, x1), x2) in t0.data().iter().zip(t1.data()).zip(t2.data()) {
                    assert!(((x2 - x0) - (x1 - x0) * 0.25).abs() < 1e-12);
                }
            }
        }
    }
    assert!(params(1).validate().is_ok());
    assert!(TrainParams { clip_norm: Some(0.0), ..params(1) }.validate().is_err());
}
