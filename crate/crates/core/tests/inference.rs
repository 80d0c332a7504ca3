mod common;

use common::{synth, tiny_model};
use noise2map::evaluation::metrics;
use noise2map::inference::{deterministic_input, evaluate, export_progression, predict, timestep_sweep};
use noise2map::model::Head;
use noise2map::schedule::ScheduleConfig;
use noise2map::{Error, Task};
use tempfile::tempdir;

#[test]
fn prediction_is_a_single_forward_pass_per_sample() {
    let d = tempdir().unwrap();
    let (samples, _) = synth(d.path(), Task::Cd, 5, 0, 1);
    let model = tiny_model(&[Head::Cd], 0);
    let sched = ScheduleConfig::reference(Task::Cd);
    let before = model.samples_forwarded();
    let mask = predict(&model, &samples[0], &sched, 1000).unwrap();
    assert_eq!(mask.len(), 16 * 16);
    assert_eq!(model.samples_forwarded() - before, 1);
    evaluate(&model, &samples, &sched, 1000, 2).unwrap();
    assert_eq!(model.samples_forwarded() - before, 1 + 5);
}

#[test]
fn deterministic_input_hits_both_endpoints() {
    let d = tempdir().unwrap();
    let (samples, _) = synth(d.path(), Task::Cd, 1, 0, 1);
    let sched = ScheduleConfig::reference(Task::Cd);
    assert_eq!(deterministic_input(&samples[0], &sched, 0).unwrap(), samples[0].input());
    assert_eq!(deterministic_input(&samples[0], &sched, 1000).unwrap(), samples[0].endpoint());
}

#[test]
fn sweep_is_seeded_and_exact_at_the_endpoint() {
    let d = tempdir().unwrap();
    let (samples, _) = synth(d.path(), Task::Ss, 10, 0, 2);
    let model = tiny_model(&[Head::Ss], 3);
    let sched = ScheduleConfig::reference(Task::Ss);
    let a = timestep_sweep(&model, &samples, &sched, &[1000, 500, 0, 500], 4, true).unwrap();
    let b = timestep_sweep(&model, &samples, &sched, &[0, 500, 1000], 4, true).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.timesteps, vec![0, 500, 1000]);
    let at_t = evaluate(&model, &samples, &sched, 1000, 3).unwrap();
    assert_eq!(a.confusion[2], at_t);
    assert_eq!(a.metrics[2][1], metrics(&at_t, 1));
}

#[test]
fn sweep_rejects_bad_timesteps() {
    let d = tempdir().unwrap();
    let (samples, _) = synth(d.path(), Task::Ss, 1, 0, 2);
    let model = tiny_model(&[Head::Ss], 3);
    let sched = ScheduleConfig::reference(Task::Ss);
    assert!(matches!(timestep_sweep(&model, &samples, &sched, &[], 0, false), Err(Error::Input(_))));
    assert!(timestep_sweep(&model, &samples, &sched, &[1001], 0, false).is_err());
}

#[test]
fn progression_export_writes_every_file() {
    let d = tempdir().unwrap();
    let (samples, _) = synth(&d.path().join("data"), Task::Cd, 3, 0, 2);
    let model = tiny_model(&[Head::Cd], 3);
    let sched = ScheduleConfig::reference(Task::Cd);
    let report = timestep_sweep(&model, &samples, &sched, &[0, 250, 500, 1000], 1, true).unwrap();
    let out = d.path().join("export");
    let written = export_progression(&report, &samples, 2, &out).unwrap();
    assert_eq!(written.len(), 3 * (4 + 1) + 1);
    assert!(written.iter().all(|p| p.exists()));
    assert!(out.join("s00000_t250.png").exists());
    assert!(out.join("s00002_progression.png").exists());

    let mut rdr = csv::Reader::from_path(out.join("f1_vs_timestep.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["t", "f1_class1", "iou_class1"]);
    let rows: Vec<(usize, f64, f64)> = rdr.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    for ((t, f1, iou), (rt, m)) in rows.iter().zip(report.timesteps.iter().zip(&report.metrics)) {
        assert_eq!((*t, *f1, *iou), (*rt, m[1].f1, m[1].iou));
    }

    let without = timestep_sweep(&model, &samples, &sched, &[0], 1, false).unwrap();
    assert!(matches!(export_progression(&without, &samples, 2, &out), Err(Error::Input(_))));
}
