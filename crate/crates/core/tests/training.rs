mod common;

use common::{max_state_diff, synth, tiny_model};
use noise2map::model::{DenoiserModel, Head};
use noise2map::objectives::{multitask_loss, ClassWeights, MultiTaskWeights};
use noise2map::schedule::{swap_pair, ScheduleConfig, ScheduleSpec};
use noise2map::training::{
    multitask_step, noised_batch, pretraining_images, supervised_step, sample_rngs, Checkpoint, LogRecord,
    MultiTaskBatch, Objective, TrainConfig, Trainer,
};
use noise2map::{Error, Task};
use tempfile::tempdir;

fn cfg(epochs: usize, batch_size: usize, grad_accum: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        grad_accum,
        lr: 1e-3,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn ss_trainer(dir: &std::path::Path, n: usize, n_val: usize, c: TrainConfig) -> Trainer {
    let (train, val) = synth(dir, Task::Ss, n, n_val, 3);
    let objective = Objective::Supervised {
        task: Task::Ss,
        train,
        val,
        weights: ClassWeights::foreground_ratio(3.0).unwrap(),
    };
    Trainer::new(tiny_model(&[Head::Ss], 1), objective, &ScheduleSpec::default(), c).unwrap()
}

#[test]
fn fixed_seed_runs_give_identical_loss_logs() {
    let d = tempdir().unwrap();
    let mut a = ss_trainer(d.path(), 20, 0, cfg(1, 2, 1));
    let mut b = ss_trainer(d.path(), 20, 0, cfg(1, 2, 1));
    a.run_epoch().unwrap();
    b.run_epoch().unwrap();
    assert_eq!(a.log().len(), 10);
    let bits = |t: &Trainer| t.log().iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(max_state_diff(&a.model().state(), &b.model().state()), 0.0);
}

#[test]
fn different_seeds_diverge() {
    let d = tempdir().unwrap();
    let mut a = ss_trainer(d.path(), 8, 0, cfg(1, 2, 1));
    let mut b = ss_trainer(d.path(), 8, 0, TrainConfig { seed: 8, ..cfg(1, 2, 1) });
    a.run_epoch().unwrap();
    b.run_epoch().unwrap();
    assert_ne!(a.log()[0].t_mean, b.log()[0].t_mean);
}

#[test]
fn accumulation_matches_a_larger_batch() {
    let d = tempdir().unwrap();
    let (train, _) = synth(d.path(), Task::Ss, 8, 0, 5);
    let run = |bs, accum| {
        let objective = Objective::Supervised {
            task: Task::Ss,
            train: train.clone(),
            val: Vec::new(),
            weights: ClassWeights::uniform(2),
        };
        let mut t = Trainer::new(tiny_model(&[Head::Ss], 1), objective, &ScheduleSpec::default(), cfg(1, bs, accum)).unwrap();
        t.run_epoch().unwrap();
        (t.step(), t.model().state())
    };
    let (steps_a, a) = run(2, 2);
    let (steps_b, b) = run(4, 1);
    assert_eq!((steps_a, steps_b), (2, 2));
    let diff = max_state_diff(&a, &b);
    assert!(diff <= 1e-5, "max parameter difference {diff}");
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let d = tempdir().unwrap();
    let (data, out_a, out_b) = (d.path().join("data"), d.path().join("a"), d.path().join("b"));
    let mut full = ss_trainer(&data, 8, 4, cfg(3, 4, 2)).with_output(&out_a).unwrap();
    full.fit().unwrap();

    let mut first = ss_trainer(&data, 8, 4, cfg(1, 4, 2)).with_output(&out_b).unwrap();
    first.fit().unwrap();
    let mut ckpt = Checkpoint::load(&out_b.join("last.ckpt")).unwrap();
    assert_eq!(ckpt.epoch, 1);
    ckpt.train.epochs = 3;
    let objective = Objective::Supervised {
        task: Task::Ss,
        train: synth(&data, Task::Ss, 8, 4, 3).0,
        val: synth(&data, Task::Ss, 8, 4, 3).1,
        weights: ClassWeights::foreground_ratio(3.0).unwrap(),
    };
    let mut resumed = Trainer::resume(&ckpt, objective).unwrap().with_output(&out_b).unwrap();
    resumed.fit().unwrap();

    let diff = max_state_diff(&full.model().state(), &resumed.model().state());
    assert!(diff <= 1e-6, "resume drifted by {diff}");
    assert_eq!(resumed.step(), full.step());
    let tail: Vec<f64> = full.log().iter().filter(|r| r.epoch >= 1).map(|r| r.loss).collect();
    let resumed_losses: Vec<f64> = resumed.log().iter().map(|r| r.loss).collect();
    assert_eq!(tail, resumed_losses);

    // The appended log file holds the whole trajectory.
    let read = |p: std::path::PathBuf| -> Vec<LogRecord> {
        std::fs::read_to_string(p).unwrap().lines().map(|l| l.parse().unwrap()).collect()
    };
    assert_eq!(read(out_a.join("train.log")), read(out_b.join("train.log")));
    assert_eq!(read(out_a.join("train.log")), full.log());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let d = tempdir().unwrap();
    let mut t = ss_trainer(d.path(), 4, 0, cfg(1, 2, 1));
    t.run_epoch().unwrap();
    let ckpt = t.checkpoint();
    let path = d.path().join("x.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.model, ckpt.model);
    assert_eq!(back.optimizer, ckpt.optimizer);
    assert_eq!(back.build_model().unwrap().state(), t.model().state());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let d = tempdir().unwrap();
    let t = ss_trainer(d.path(), 2, 0, cfg(1, 2, 1));
    let path = d.path().join("x.ckpt");
    t.checkpoint().save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let d = tempdir().unwrap();
    let mut t = ss_trainer(d.path(), 4, 0, TrainConfig { lr: 0.0, ..cfg(1, 2, 1) });
    let before = t.model().state();
    t.run_epoch().unwrap();
    assert_eq!(t.step(), 2);
    assert_eq!(max_state_diff(&before, &t.model().state()), 0.0);
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let d = tempdir().unwrap();
    let mut t = ss_trainer(d.path(), 4, 2, cfg(0, 2, 1));
    let before = t.model().state();
    let ckpt = t.fit().unwrap();
    assert_eq!((ckpt.epoch, ckpt.step), (0, 0));
    assert_eq!(ckpt.model, before);
    assert!(t.log().is_empty());
}

#[test]
fn empty_training_set_is_an_error() {
    let objective = Objective::Supervised {
        task: Task::Ss,
        train: Vec::new(),
        val: Vec::new(),
        weights: ClassWeights::uniform(2),
    };
    let r = Trainer::new(tiny_model(&[Head::Ss], 0), objective, &ScheduleSpec::default(), cfg(1, 2, 1));
    assert!(matches!(r, Err(Error::EmptyDataset(_))));
}

#[test]
fn untrained_loss_is_near_ln2() {
    let d = tempdir().unwrap();
    let (train, _) = synth(d.path(), Task::Ss, 4, 0, 1);
    let model = tiny_model(&[Head::Ss], 0);
    let sched = ScheduleConfig::reference(Task::Ss);
    let refs: Vec<_> = train.iter().collect();
    let mut rngs = sample_rngs(0, 2, 0, 0, refs.len());
    let out = supervised_step(&model, &refs, &sched, &ClassWeights::foreground_ratio(3.0).unwrap(), (1, 1000), true, &mut rngs)
        .unwrap();
    assert!((out.loss - std::f64::consts::LN_2).abs() < 0.05, "loss {}", out.loss);
}

#[test]
fn cd_input_without_noising_is_the_swapped_pair() {
    let d = tempdir().unwrap();
    let (train, _) = synth(d.path(), Task::Cd, 2, 0, 1);
    let sched = ScheduleConfig::reference(Task::Cd);
    let refs: Vec<_> = train.iter().collect();
    let (x, ts) = noised_batch(&refs, &sched, (1, 1000), false, &mut []).unwrap();
    assert_eq!(ts, vec![1000, 1000]);
    for (i, s) in train.iter().enumerate() {
        assert_eq!(x.outer(i), swap_pair(&s.input()).unwrap());
        assert_eq!(x.outer(i), s.endpoint());
    }
}

fn multitask_fixture(dir: &std::path::Path) -> (Vec<noise2map::data::Sample>, Vec<noise2map::data::Sample>) {
    (synth(&dir.join("cd"), Task::Cd, 4, 0, 1).0, synth(&dir.join("ss"), Task::Ss, 3, 0, 2).0)
}

#[test]
fn multitask_without_ss_weight_leaves_ss_head_untouched() {
    let d = tempdir().unwrap();
    let (cd, ss) = multitask_fixture(d.path());
    let model = tiny_model(&[Head::Cd, Head::Ss], 0);
    let (cds, sss) = (ScheduleConfig::reference(Task::Cd), ScheduleConfig::reference(Task::Ss));
    let w = ClassWeights::uniform(2);
    let cd_refs: Vec<_> = cd.iter().take(2).collect();
    let ss_refs: Vec<_> = ss.iter().take(2).collect();
    let batch = MultiTaskBatch {
        cd: &cd_refs,
        ss: &ss_refs,
        cd_schedule: &cds,
        ss_schedule: &sss,
        cd_weights: &w,
        ss_weights: &w,
    };
    let lambda = MultiTaskWeights::new(1.0, 0.0).unwrap();
    let out = multitask_step(&model, &batch, &lambda, (1, 1000), true, &mut sample_rngs(0, 3, 0, 0, 2), &mut sample_rngs(0, 4, 0, 0, 2))
        .unwrap();
    assert!(out.l_ss > 0.0);
    assert_eq!(out.l_mt, out.l_cd);
    let store = model.params();
    let mut ss_params = 0;
    for (id, p) in store.iter() {
        if p.name.starts_with("head.ss") {
            ss_params += 1;
            if let Some(g) = out.grads.get(&id) {
                assert!(g.data().iter().all(|&v| v == 0.0), "{} has gradient", p.name);
            }
        }
    }
    assert!(ss_params > 0);
    assert!(store
        .iter()
        .any(|(id, p)| p.name.starts_with("head.cd") && out.grads.get(&id).is_some_and(|g| g.data().iter().any(|&v| v != 0.0))));
}

#[test]
fn logged_multitask_loss_is_the_weighted_sum() {
    let d = tempdir().unwrap();
    let (cd, ss) = multitask_fixture(d.path());
    let lambda = MultiTaskWeights::new(0.7, 1.3).unwrap();
    let objective = Objective::MultiTask {
        cd_train: cd,
        cd_val: Vec::new(),
        ss_train: ss,
        ss_val: Vec::new(),
        lambda,
        cd_weights: ClassWeights::foreground_ratio(3.0).unwrap(),
        ss_weights: ClassWeights::uniform(2),
    };
    let mut t = Trainer::new(tiny_model(&[Head::Cd, Head::Ss], 0), objective, &ScheduleSpec::default(), cfg(1, 2, 1)).unwrap();
    t.run_epoch().unwrap();
    let steps: std::collections::BTreeSet<u64> = t.log().iter().map(|r| r.step).collect();
    assert_eq!(steps.len(), 2);
    for step in steps {
        let get = |task: &str| t.log().iter().find(|r| r.step == step && r.task == task).unwrap().loss;
        assert_eq!(get("mt"), multitask_loss(get("cd"), get("ss"), &lambda));
        assert_eq!(get("mt"), 0.7 * get("cd") + 1.3 * get("ss"));
    }
}

fn pretrainer(dir: &std::path::Path) -> Trainer {
    let (train, _) = synth(dir, Task::Ss, 4, 0, 9);
    let objective = Objective::Denoise {
        train: pretraining_images(&train),
        val: Vec::new(),
    };
    let c = TrainConfig {
        epochs: 3,
        batch_size: 2,
        grad_accum: 1,
        seed: 4,
        ..TrainConfig::pretrain_defaults()
    };
    Trainer::new(tiny_model(&[Head::Denoise], 0), objective, &ScheduleSpec::default(), c).unwrap()
}

#[test]
fn pretraining_is_deterministic_and_learns() {
    let d = tempdir().unwrap();
    let mut a = pretrainer(d.path());
    let mut b = pretrainer(d.path());
    a.fit().unwrap();
    b.fit().unwrap();
    assert_eq!(a.log(), b.log());
    assert!(a.log().iter().all(|r| r.task == "denoise" && r.loss.is_finite()));
    // One warmup step at the base rate, then cosine decay.
    let lrs: Vec<f64> = a.log().iter().map(|r| r.lr).collect();
    assert_eq!(lrs[0], a.config().lr);
    assert!(lrs.len() > 2 && lrs[1..].windows(2).all(|w| w[1] < w[0]), "{lrs:?}");
}

#[test]
fn trunk_transfer_copies_every_trunk_array_and_no_head() {
    let d = tempdir().unwrap();
    let mut p = pretrainer(d.path());
    p.fit().unwrap();
    let pre = p.model().state();
    let mut ss = tiny_model(&[Head::Ss], 11);
    let fresh_heads: Vec<_> = ss
        .state()
        .arrays
        .into_iter()
        .filter(|a| DenoiserModel::<f32>::is_head_param(&a.name))
        .collect();
    let n = ss.transfer_trunk(&pre).unwrap();
    let after = ss.state();
    let trunk: Vec<_> = after.arrays.iter().filter(|a| !DenoiserModel::<f32>::is_head_param(&a.name)).collect();
    assert_eq!(n, trunk.len());
    for a in trunk {
        assert_eq!(Some(a), pre.get(&a.name));
    }
    for h in fresh_heads {
        assert_eq!(after.get(&h.name), Some(&h));
    }
}

#[test]
fn heads_must_match_the_objective() {
    let d = tempdir().unwrap();
    let (train, _) = synth(d.path(), Task::Cd, 2, 0, 1);
    let objective = Objective::Supervised {
        task: Task::Cd,
        train,
        val: Vec::new(),
        weights: ClassWeights::uniform(2),
    };
    let r = Trainer::new(tiny_model(&[Head::Ss], 0), objective, &ScheduleSpec::default(), cfg(1, 2, 1));
    assert!(matches!(r, Err(Error::Config(_))));
}
