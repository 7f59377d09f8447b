use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::autodiff::Graph;

const DIMS: InputDims = InputDims {
    channels: 2,
    structured: 3,
    static_features: 2,
};

fn spec(config: ModelConfig, family: LossFamily) -> ModelSpec {
    ModelSpec {
        config,
        dims: DIMS,
        family,
    }
}

fn tiny(family: LossFamily) -> (Model, ParamStore) {
    Model::init(spec(ModelConfig::tiny(), family), 7).unwrap()
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn random_batch(n: usize, steps: usize, p: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Batch {
        n,
        steps,
        signals: randn(&[n * steps, DIMS.channels, p], &mut rng),
        structured: Some(randn(&[n * steps, DIMS.structured], &mut rng)),
        static_features: Some(randn(&[n, DIMS.static_features], &mut rng)),
        missing: vec![false; n * steps],
    }
}

#[test]
fn init_is_deterministic_and_finite() {
    let (_, a) = tiny(LossFamily::NtXent);
    let (_, b) = tiny(LossFamily::NtXent);
    assert_eq!(a, b);
    assert_eq!(a.parameter_count(), b.parameter_count());
    let (_, c) = Model::init(spec(ModelConfig::tiny(), LossFamily::NtXent), 8).unwrap();
    assert_ne!(a, c);
    let (_, d) = tiny(LossFamily::Simsiam);
    assert!(d.parameter_count() > a.parameter_count());
    assert!(d.id("predictor.signal.l1.w").is_some());
    assert!(a.id("predictor.signal.l1.w").is_none());

    let (m, store) = tiny(LossFamily::NtXent);
    let batch = random_batch(3, 4, 20, 0);
    let mut s = Session::train_all(&store);
    let z = m.encode_trajectory(&mut s, &batch).unwrap();
    assert_eq!(s.value(z).shape(), &[3, 6]);
    assert!(s.value(z).all_finite());
}

#[test]
fn timestep_embedding_width_and_statelessness() {
    let (m, store) = tiny(LossFamily::NtXent);
    let mut batch = random_batch(2, 2, 20, 1);
    // row 2 (t=1, i=0) copies row 0 (t=0, i=0), and its signal is zero
    let row = 2 * 20;
    let data = batch.signals.data_mut();
    for x in &mut data[..row] {
        *x = 0.0;
    }
    let (head, tail) = data.split_at_mut(2 * row);
    tail[..row].copy_from_slice(&head[..row]);
    let w = batch.structured.as_mut().unwrap().data_mut();
    let first: Vec<f64> = w[..3].to_vec();
    w[6..9].copy_from_slice(&first);
    let mut s = Session::eval(&store);
    let enc = m.encode_timesteps(&mut s, &batch).unwrap();
    let z = s.value(enc.timesteps);
    assert_eq!(z.shape(), &[4, 6 + 4 + 5]);
    assert_eq!(m.config().timestep_dim(), 15);
    assert!(z.all_finite());
    assert_eq!(z.row(0), z.row(2));
    assert_ne!(z.row(0), z.row(1));
}

#[test]
fn single_step_sequence_is_one_stack_application() {
    let (m, store) = tiny(LossFamily::NtXent);
    let batch = random_batch(3, 1, 20, 2);
    let mut s = Session::eval(&store);
    let enc = m.encode_timesteps(&mut s, &batch).unwrap();
    let z = m.encode_sequence(&mut s, enc.timesteps, 3, 1).unwrap();
    let want = s.value(z).clone();

    let zt = s.value(enc.timesteps).clone();
    let mut g = Graph::new();
    let mut x = g.constant(zt);
    for l in 0..2 {
        let p = |n: &str| store.get(store.id(&format!("gru.l{l}.{n}")).unwrap()).clone();
        let w = GruWeights {
            w_ih: g.constant(p("w_ih")),
            w_hh: g.constant(p("w_hh")),
            b_ih: g.constant(p("b_ih")),
            b_hh: g.constant(p("b_hh")),
        };
        let h0 = g.constant(Tensor::zeros(&[3, 6]));
        x = gru_cell(&mut g, x, h0, &w).unwrap();
    }
    assert_eq!(g.value(x), &want);
}

#[test]
fn sequence_is_order_sensitive() {
    let (m, store) = tiny(LossFamily::NtXent);
    let batch = random_batch(2, 3, 20, 3);
    let mut s = Session::eval(&store);
    let enc = m.encode_timesteps(&mut s, &batch).unwrap();
    let z = m.encode_sequence(&mut s, enc.timesteps, 2, 3).unwrap();
    let rows = [4, 5, 2, 3, 0, 1];
    let rev = s.graph.gather_rows(enc.timesteps, &rows).unwrap();
    let zr = m.encode_sequence(&mut s, rev, 2, 3).unwrap();
    assert!(s.value(z).max_abs_diff(s.value(zr)) > 1e-6);
}

#[test]
fn projection_contracts() {
    let (m, store) = tiny(LossFamily::NtXent);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&[5, 6], &mut rng);
    let mut s = Session::train_all(&store);
    let xv = s.graph.constant(x.clone());
    let h = m.project(&mut s, m.head(Level::Trajectory), xv, true).unwrap();
    for r in 0..5 {
        let n: f64 = s.value(h).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    let one = s.graph.constant(randn(&[1, 6], &mut rng));
    assert!(matches!(
        m.project(&mut s, m.head(Level::Trajectory), one, true),
        Err(Error::DegenerateBatch(_))
    ));
    let out: Vec<Tensor> = (0..2)
        .map(|_| {
            let mut s = Session::eval(&store);
            let xv = s.graph.constant(x.clone());
            let h = m.project(&mut s, m.head(Level::Trajectory), xv, false).unwrap();
            s.value(h).clone()
        })
        .collect();
    assert_eq!(out[0], out[1]);
}

#[test]
fn full_scale_shapes() {
    let mut cfg = ModelConfig::full();
    cfg.signal_encoder = ModelConfig::tiny().signal_encoder;
    let (m, store) = Model::init(spec(cfg, LossFamily::NtXent), 0).unwrap();
    assert_eq!(store.get(store.id("head.trajectory.l1.w").unwrap()).shape(), &[384, 2048]);
    assert_eq!(store.get(store.id("gru.l3.w_hh").unwrap()).shape(), &[384, 3 * 384]);
    let batch = random_batch(2, 2, 20, 5);
    let mut s = Session::eval(&store);
    let z = m.encode_trajectory(&mut s, &batch).unwrap();
    assert_eq!(s.value(z).shape(), &[2, 384]);
    assert_eq!(ModelConfig::full().timestep_dim(), 384);
}

#[test]
fn classifier_contracts() {
    let (m, mut store) = tiny(LossFamily::NtXent);
    let w = store.id("classifier.w").unwrap();
    let b = store.id("classifier.b").unwrap();
    store.get_mut(w).data_mut().fill(0.0);
    store.get_mut(b).data_mut()[0] = 0.25;
    let batch = random_batch(3, 2, 20, 6);
    let mut s = Session::eval(&store);
    let z = m.encode_trajectory(&mut s, &batch).unwrap();
    let y = m.classify(&mut s, z).unwrap();
    assert_eq!(s.value(y).data(), &[0.25; 3]);

    // linear evaluation: only the classifier is trainable
    m.reset_classifier(&mut store, 1);
    let ids: Vec<_> = m.ids_with_prefix(&store, &[prefix::CLASSIFIER]).collect();
    assert_eq!(ids.len(), 2);
    let mut s = Session::train(&store, ids.clone());
    let z = m.encode_trajectory(&mut s, &batch).unwrap();
    let y = m.classify(&mut s, z).unwrap();
    let l = s.graph.sum(y).unwrap();
    let grads = s.backward(l).unwrap();
    let got: Vec<_> = grads.params().map(|(id, _)| id).collect();
    assert_eq!(got, ids);
    assert!(s.into_bn_updates().is_empty());
}

#[test]
fn logistic_gradient_matches_finite_differences() {
    let (m, store) = tiny(LossFamily::NtXent);
    let batch = random_batch(4, 2, 20, 7);
    let labels = [1.0, 0.0, 0.0, 1.0];
    let loss = |store: &ParamStore| -> (f64, Vec<(ParamId, Tensor)>) {
        let mut s = Session::train_all(store);
        let z = m.encode_trajectory(&mut s, &batch).unwrap();
        let y = m.classify(&mut s, z).unwrap();
        // softplus(y) - label * y
        let sp = s.graph.softplus(y).unwrap();
        let lab = s.graph.constant(Tensor::vector(labels.to_vec()).unwrap());
        let ly = s.graph.mul(lab, y).unwrap();
        let d = s.graph.sub(sp, ly).unwrap();
        let l = s.graph.mean(d).unwrap();
        let grads = s.backward(l).unwrap();
        (s.value(l).item().unwrap(), grads.params().map(|(i, t)| (i, t.clone())).collect())
    };
    let (_, grads) = loss(&store);
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for (id, g) in grads.iter().step_by(3) {
        for j in [0, g.len() / 2, g.len() - 1] {
            let mut p = store.clone();
            p.get_mut(*id).data_mut()[j] += h;
            let mut q = store.clone();
            q.get_mut(*id).data_mut()[j] -= h;
            let fd = (loss(&p).0 - loss(&q).0) / (2.0 * h);
            worst = worst.max((g.data()[j] - fd).abs() / fd.abs().max(1e-3));
        }
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn batchnorm_running_stats_update() {
    let (m, mut store) = tiny(LossFamily::NtXent);
    let batch = random_batch(3, 2, 20, 8);
    let updates = {
        let mut s = Session::train_all(&store);
        m.encode_trajectory(&mut s, &batch).unwrap();
        s.into_bn_updates()
    };
    assert_eq!(updates.len(), 1 + 2 * 2 + 1);
    let id = store.id("signal.stem.bn.running_mean").unwrap();
    let before = store.get(id).clone();
    apply_bn_updates(&mut store, &updates, 0.1);
    let stem = &updates[0];
    for (i, x) in store.get(id).data().iter().enumerate() {
        assert!((x - (0.9 * before.data()[i] + 0.1 * stem.stats.mean[i])).abs() < 1e-15);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (m, mut store) = tiny(LossFamily::Simsiam);
    store.get_mut(ParamId(0)).data_mut()[0] = std::f64::consts::PI * 1e-300;
    let cfg = m.checkpoint_config(serde_json::json!({"note": "x"})).unwrap();
    let bytes = encode_checkpoint(&store, cfg.clone()).unwrap();
    assert_eq!(&bytes[..7], CHECKPOINT_MAGIC);
    assert_eq!(bytes, encode_checkpoint(&store, cfg).unwrap());
    let (header, loaded) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(loaded, store);
    let (m2, store2) = Model::from_checkpoint(&header, &loaded).unwrap();
    assert_eq!(store2, store);
    assert_eq!(m2.spec, m.spec);

    let batch = random_batch(2, 3, 20, 9);
    let run = |m: &Model, st: &ParamStore| {
        let mut s = Session::eval(st);
        let z = m.encode_trajectory(&mut s, &batch).unwrap();
        s.value(z).clone()
    };
    assert_eq!(run(&m, &store), run(&m2, &store2));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    save_checkpoint(&path, &store, serde_json::json!({})).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().1, store);
    assert!(decode_checkpoint(&bytes[..20]).is_err());
    let mut bad = bytes;
    bad[0] = b'X';
    assert!(decode_checkpoint(&bad).is_err());
}

#[test]
fn batch_assembly_is_timestep_major() {
    let traj = |pid: &str, base: f32| Trajectory {
        patient_id: pid.into(),
        block_id: None,
        start_hour: 0,
        static_features: vec![1.0, 3.0],
        structured: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
        n_structured: 3,
        signals: (0..2).map(|t| vec![base + t as f32; 2 * 4].into()).collect(),
        signal_channels: 2,
        signal_len: 4,
        sample_rate: 1.0,
        signal_missing: vec![false, true],
        label: None,
    };
    let (a, b) = (traj("a", 10.0), traj("b", 20.0));
    let stats = DatasetStats {
        static_mean: vec![1.0, 1.0],
        static_sd: vec![1.0, 2.0],
        structured_mean: vec![0.0; 3],
        structured_sd: vec![1.0; 3],
        signal_mean: vec![0.0; 2],
        signal_sd: vec![1.0; 2],
        signal_channels: 2,
        signal_len: 4,
        sample_rate: 1.0,
    };
    let batch = Batch::assemble(&[&a, &b], &stats, InputMode::Multimodal).unwrap();
    assert_eq!(batch.signals.shape(), &[4, 2, 4]);
    let firsts: Vec<f64> = (0..4).map(|r| batch.signals.data()[r * 8]).collect();
    assert_eq!(firsts, vec![10.0, 20.0, 11.0, 21.0]);
    assert_eq!(batch.missing, vec![false, false, true, true]);
    assert_eq!(batch.structured.as_ref().unwrap().row(2), &[3.0, 4.0, 5.0]);
    assert_eq!(batch.static_features.as_ref().unwrap().row(1), &[0.0, 1.0]);
    let uni = Batch::assemble(&[&a], &stats, InputMode::Unimodal).unwrap();
    assert!(uni.structured.is_none());
}

#[test]
fn unimodal_uses_signal_only() {
    let mut cfg = ModelConfig::tiny();
    cfg.mode = InputMode::Unimodal;
    let (m, store) = Model::init(spec(cfg, LossFamily::NtXent), 3).unwrap();
    assert!(store.entries().iter().all(|e| !e.name.starts_with(prefix::STRUCTURED)));
    let mut batch = random_batch(2, 2, 20, 10);
    batch.structured = None;
    batch.static_features = None;
    let mut s = Session::eval(&store);
    let enc = m.encode_timesteps(&mut s, &batch).unwrap();
    assert_eq!(enc.signal, enc.timesteps);
    assert_eq!(s.value(enc.timesteps).shape(), &[4, 5]);
}
