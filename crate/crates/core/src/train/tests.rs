use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::analysis::{cka_block_report, stage_activations};
use super::finetune::{features, finetune, Strategy};
use super::pipeline::{init_model, Experiment, RunPlan};
use super::pretrain::{pretrain, pretrain_objective, PretrainOptions};
use super::report::select_strategy;
use super::*;
use crate::augment::{make_view_pair, AugmentConfig};
use crate::autodiff::{Gradients, Tensor};
use crate::data::{PtSampler, Task, Trajectory};
use crate::losses::{LossConfig, LossFamily};
use crate::models::{load_checkpoint, prefix, Batch, Model, ModelConfig, ParamStore, Session};
use crate::synth::{default_spec, generate};

fn experiment(n: usize, seed: u64) -> Experiment {
    let mut spec = default_spec("small").unwrap();
    spec.n_patients = n;
    spec.seed = seed;
    Experiment::prepare(generate(&spec).unwrap().visits, seed).unwrap()
}

fn plan(family: LossFamily, alpha: f64, beta: f64) -> RunPlan {
    RunPlan {
        model: ModelConfig::tiny(),
        loss: LossConfig {
            family,
            alpha,
            beta,
            ..LossConfig::default()
        },
        augment: AugmentConfig::default(),
        train: TrainConfig {
            batch_size: 8,
            pt_epochs: 1,
            ft_max_epochs: 3,
            seeds: vec![0],
            ..TrainConfig::default()
        },
        tasks: vec![Task::ElevatedMap],
        pretrain: true,
    }
}

/// A PT batch of `b` view pairs from the experiment.
fn pt_batch(exp: &Experiment, b: usize, seed: u64) -> Batch {
    let visits = exp.pt_visits();
    let sampler = PtSampler::new(&visits, Default::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajs = sampler.sample_epoch(&visits, &exp.stats, &mut rng);
    let cfg = AugmentConfig::default();
    let (mut a, mut c) = (Vec::new(), Vec::new());
    for t in trajs.iter().take(b) {
        let v = make_view_pair(t, &cfg, &exp.stats, &mut rng).unwrap();
        a.push(v.first);
        c.push(v.second);
    }
    let views: Vec<&Trajectory> = a.iter().chain(c.iter()).collect();
    Batch::assemble(&views, &exp.stats, crate::models::InputMode::Multimodal).unwrap()
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = ParamStore::new(0);
    let id = store
        .insert("p", crate::models::EntryKind::Param, Tensor::full(&[3], 0.5))
        .unwrap();
    let mut g = crate::autodiff::Graph::new();
    let v = g.param(id, store.get(id).clone());
    let loss = g.sum(v).unwrap();
    let grads: Gradients = g.backward(loss).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    adam.step(&mut store, &grads);
    for &x in store.get(id).data() {
        assert!((x - (0.5 - 1e-3)).abs() < 1e-10, "{x}");
    }
    assert_eq!(adam.steps(), 1);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert_eq!(TrainConfig::default().batch_size, 128);
    assert_eq!(TrainConfig::desk().batch_size, 32);
    let bad = [
        TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        },
        TrainConfig {
            pt_epochs: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            ft_max_epochs: 0,
            ..TrainConfig::default()
        },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
}

#[test]
fn strategy_selection_prefers_linear_on_ties() {
    let s = select_strategy(&[(Strategy::FullFt, 0.7), (Strategy::Linear, 0.7)]).unwrap();
    assert_eq!(s, (Strategy::Linear, 0.7));
    let s = select_strategy(&[(Strategy::Linear, 0.6), (Strategy::FullFt, 0.7)]).unwrap();
    assert_eq!(s.0, Strategy::FullFt);
    assert!(select_strategy(&[]).is_err());
}

fn grads_for(exp: &Experiment, p: &RunPlan) -> (Model, ParamStore, Gradients) {
    let (model, store) = init_model(exp, p, 3).unwrap();
    let batch = pt_batch(exp, 6, 1);
    let grads = {
        let mut s = Session::train_all(&store);
        let out = pretrain_objective(&mut s, &model, &batch, &p.loss).unwrap();
        s.backward(out.total).unwrap()
    };
    (model, store, grads)
}

fn max_abs_grad(store: &ParamStore, grads: &Gradients, pfx: &str) -> f64 {
    store
        .ids()
        .filter(|&id| store.entry(id).name.starts_with(pfx))
        .filter_map(|id| grads.param(id))
        .flat_map(|g| g.data().iter().map(|x| x.abs()))
        .fold(0.0, f64::max)
}

#[test]
fn zero_weight_terms_send_no_gradient() {
    let exp = experiment(24, 5);
    let (_, store, g) = grads_for(&exp, &plan(LossFamily::NtXent, 0.0, 1.0));
    for pfx in [prefix::STRUCTURED, prefix::STATIC, prefix::GRU, prefix::TRAJ_HEAD] {
        assert_eq!(max_abs_grad(&store, &g, pfx), 0.0, "{pfx}");
    }
    assert!(max_abs_grad(&store, &g, prefix::SIGNAL) > 0.0);
    let (_, store, g) = grads_for(&exp, &plan(LossFamily::NtXent, 1.0, 0.0));
    assert_eq!(max_abs_grad(&store, &g, prefix::SIGNAL_HEAD), 0.0);
    assert!(max_abs_grad(&store, &g, prefix::GRU) > 0.0);
    let (_, store, g) = grads_for(&exp, &plan(LossFamily::NtXent, 1.0, 1.0));
    assert!(max_abs_grad(&store, &g, prefix::SIGNAL_HEAD) > 0.0);
    assert!(max_abs_grad(&store, &g, prefix::STRUCTURED) > 0.0);
}

#[test]
fn objective_matches_finite_differences() {
    let exp = experiment(24, 6);
    for family in [LossFamily::NtXent, LossFamily::Vicreg] {
        let p = plan(family, 1.0, 1.0);
        let (model, store) = init_model(&exp, &p, 4).unwrap();
        let batch = pt_batch(&exp, 5, 2);
        let loss_at = |st: &ParamStore| {
            let mut s = Session::train_all(st);
            let out = pretrain_objective(&mut s, &model, &batch, &p.loss).unwrap();
            s.value(out.total).data()[0]
        };
        let grads = {
            let mut s = Session::train_all(&store);
            let out = pretrain_objective(&mut s, &model, &batch, &p.loss).unwrap();
            s.backward(out.total).unwrap()
        };
        let ids: Vec<_> = store.trainable_ids().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-6;
        for _ in 0..30 {
            let id = ids[rand::Rng::random_range(&mut rng, 0..ids.len())];
            let k = rand::Rng::random_range(&mut rng, 0..store.get(id).len());
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[k]);
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[k] += h;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[k] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let err = (fd - analytic).abs() / (1.0 + fd.abs().max(analytic.abs()));
            assert!(err < 1e-4, "{family:?} {} [{k}]: fd {fd} vs {analytic}", store.entry(id).name);
        }
    }
}

#[test]
fn pretrain_logs_finite_curves_and_is_deterministic() {
    let exp = experiment(24, 7);
    let p = plan(LossFamily::NtXent, 1.0, 1.0);
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for k in 0..2 {
        let (model, mut store) = init_model(&exp, &p, 11).unwrap();
        let mut train = p.train.clone();
        train.pt_epochs = 2;
        let opts = PretrainOptions {
            checkpoint_dir: Some(dir.path().join(format!("run{k}"))),
            ..PretrainOptions::default()
        };
        let out = pretrain(
            &model,
            &mut store,
            &exp.pt_visits(),
            &exp.stats,
            &p.loss,
            &p.augment,
            &train,
            11,
            &opts,
        )
        .unwrap();
        assert!(!out.curves.is_empty());
        assert!(out
            .curves
            .iter()
            .all(|c| c.total.is_finite() && c.global.unwrap().is_finite() && c.component.unwrap().is_finite()));
        assert_eq!(out.checkpoints.len(), 2);
        runs.push((out, std::fs::read(dir.path().join(format!("run{k}/epoch_001.ckpt"))).unwrap()));
    }
    assert_eq!(runs[0].0.curves, runs[1].0.curves);
    assert_eq!(runs[0].1, runs[1].1);
    let (_, loaded) = load_checkpoint(&runs[0].0.checkpoints[1]).unwrap();
    assert!(loaded.all_finite());
}

#[test]
fn frozen_prefixes_stay_fixed_and_component_is_monitored() {
    let exp = experiment(24, 8);
    let p = plan(LossFamily::NtXent, 1.0, 0.0);
    let (model, mut store) = init_model(&exp, &p, 12).unwrap();
    let before = store.clone();
    let opts = PretrainOptions {
        frozen_prefixes: vec![prefix::SIGNAL_HEAD.to_string()],
        ..PretrainOptions::default()
    };
    let out = pretrain(&model, &mut store, &exp.pt_visits(), &exp.stats, &p.loss, &p.augment, &p.train, 1, &opts).unwrap();
    assert!(out.curves.iter().all(|c| c.component.is_some_and(f64::is_finite)));
    for e in before.entries() {
        let now = store.get(store.id(&e.name).unwrap());
        if e.name.starts_with(prefix::SIGNAL_HEAD) {
            assert_eq!(now, &e.value, "{}", e.name);
        }
    }
    let gru = store.id("gru.l0.w_ih").unwrap();
    assert_ne!(store.get(gru), before.get(gru));
}

#[test]
fn linear_probe_keeps_encoder_bit_identical() {
    let exp = experiment(60, 9);
    let p = plan(LossFamily::NtXent, 1.0, 1.0);
    let (model, mut store) = init_model(&exp, &p, 13).unwrap();
    let data = exp.ft_data(Task::ElevatedMap, &p.augment, &p.train, 13).unwrap();
    let before = store.clone();
    let out = finetune(&model, &mut store, &data.train, &data.val, &exp.stats, Strategy::Linear, &p.train, 13).unwrap();
    for e in before.entries() {
        if !e.name.starts_with(prefix::CLASSIFIER) {
            assert_eq!(store.get(store.id(&e.name).unwrap()), &e.value, "{}", e.name);
        }
    }
    assert_ne!(store.get(store.id("classifier.w").unwrap()), before.get(before.id("classifier.w").unwrap()));
    assert!(out.history.len() <= p.train.ft_max_epochs);
    let best = out.history.iter().map(|h| h.val_auroc).fold(f64::MIN, f64::max);
    assert_eq!(out.best_val_auroc, best);
    assert_eq!(out.history[out.best_epoch].val_auroc, best);
    assert!(features(&model, &store, &data.val[..3], &exp.stats).unwrap().all_finite());
}

#[test]
fn full_finetune_restores_best_epoch() {
    let exp = experiment(60, 10);
    let mut p = plan(LossFamily::NtXent, 1.0, 1.0);
    p.train.ft_max_epochs = 4;
    let (model, store) = init_model(&exp, &p, 14).unwrap();
    let data = exp.ft_data(Task::ElevatedMap, &p.augment, &p.train, 14).unwrap();
    let mut fitted = store.clone();
    let out = finetune(&model, &mut fitted, &data.train, &data.val, &exp.stats, Strategy::FullFt, &p.train, 14).unwrap();
    assert!(out.history.len() <= 4);
    let scores = predict(&model, &fitted, &data.val, &exp.stats).unwrap();
    let y = finetune::labels(&data.val).unwrap();
    assert_eq!(metrics::auroc(&scores, &y).unwrap(), out.best_val_auroc);
    let gw = store.id("signal.stem.w").unwrap();
    assert_ne!(fitted.get(gw), store.get(gw));
}

#[test]
fn single_class_validation_is_an_error() {
    let exp = experiment(60, 11);
    let p = plan(LossFamily::NtXent, 1.0, 1.0);
    let (model, mut store) = init_model(&exp, &p, 15).unwrap();
    let data = exp.ft_data(Task::ElevatedMap, &p.augment, &p.train, 15).unwrap();
    let val: Vec<Trajectory> = data.val.iter().filter(|t| t.label == Some(0)).cloned().collect();
    let err = finetune(&model, &mut store, &data.train, &val, &exp.stats, Strategy::Linear, &p.train, 15).unwrap_err();
    assert!(matches!(err, crate::Error::Metric(_)));
}

#[test]
fn cka_report_against_itself() {
    let exp = experiment(24, 12);
    let p = plan(LossFamily::NtXent, 1.0, 1.0);
    let (model, store) = init_model(&exp, &p, 16).unwrap();
    let data = exp.ft_data(Task::ElevatedMap, &p.augment, &p.train, 16).unwrap();
    let probe = &data.val[..20];
    let r = cka_block_report((&model, &store), (&model, &store), (&model, &store), probe).unwrap();
    assert_eq!(r.rows.len(), model.config().signal_encoder.stages.len());
    for row in &r.rows {
        assert!((row.vs_component_same_stage - 1.0).abs() < 1e-9);
        assert!((row.vs_global_same_stage - 1.0).abs() < 1e-9);
        assert!((0.0..=1.0 + 1e-12).contains(&row.vs_component));
    }
    let acts = stage_activations(&model, &store, probe).unwrap();
    assert_eq!(acts[0].shape()[0], probe.iter().map(|t| t.steps() - t.missing_count()).sum::<usize>());

    let mut other_cfg = p.clone();
    other_cfg.model.signal_encoder.stages[0].channels += 1;
    let (m2, s2) = init_model(&exp, &other_cfg, 16).unwrap();
    assert!(cka_block_report((&model, &store), (&m2, &s2), (&model, &store), probe).is_err());
}
