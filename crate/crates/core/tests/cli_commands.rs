use jointalign::align_net::AlignNet;
use jointalign::cli::TrainData;
use jointalign::cli::{
    cmd_gen_data, cmd_plots, cmd_train, evaluate, resolve_config, write_eval_report, DatasetSource, FlagOverrides,
    PredictorChoice, RunConfig, Split, CHECKPOINT, INCOMPLETE, MANIFEST, REPORT, TRAIN_LOG,
};
use jointalign::synthscene::NoiseConfig;
use jointalign::training::ViewSource;

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.batch_images = 5;
    cfg.train.epochs = 1;
    cfg
}

#[test]
fn gen_data_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let m = cmd_gen_data(&cfg, dir.path(), 10, Split::Train).unwrap();
    assert_eq!(m.entries.len(), 10);
    let src = DatasetSource::open(dir.path()).unwrap();
    assert_eq!(src.len(), 10);
    for i in 0..10 {
        let v = src.view(i).unwrap();
        assert!(!v.scene.objects.is_empty());
        assert_eq!(v.maps.width, cfg.scene.width);
    }
    // same config, same bytes
    let again = tempfile::tempdir().unwrap();
    cmd_gen_data(&cfg, again.path(), 10, Split::Train).unwrap();
    for e in &m.entries {
        assert_eq!(std::fs::read(dir.path().join(&e.record)).unwrap(), std::fs::read(again.path().join(&e.record)).unwrap());
    }
}

#[test]
fn gen_data_with_zero_scenes_writes_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = cmd_gen_data(&tiny_config(), dir.path(), 0, Split::Eval).unwrap();
    assert!(m.entries.is_empty());
    assert!(dir.path().join(MANIFEST).exists());
    assert_eq!(DatasetSource::open(dir.path()).unwrap().len(), 0);
}

#[test]
fn config_hash_is_stable_and_sensitive() {
    let a = resolve_config(None, &FlagOverrides::default()).unwrap();
    let b = resolve_config(None, &FlagOverrides::default()).unwrap();
    assert_eq!(a.config.hash().unwrap(), b.config.hash().unwrap());
    let mut c = a.config.clone();
    c.refine.iterations += 1;
    assert_ne!(a.config.hash().unwrap(), c.hash().unwrap());
}

#[test]
fn train_writes_checkpoint_and_resumes() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cmd_gen_data(&cfg, data.path(), 10, Split::Train).unwrap();
    let src = DatasetSource::open(data.path()).unwrap();
    let mut epochs = Vec::new();
    let net = cmd_train(&cfg, TrainData::Dataset(&src), out.path(), false, &mut |m| epochs.push(m.epoch)).unwrap();
    assert_eq!(epochs, vec![0]);
    assert!(!out.path().join(INCOMPLETE).exists());
    let (loaded, opt) = AlignNet::<f32>::load(&out.path().join(CHECKPOINT)).unwrap();
    assert!(opt.is_some());
    for id in net.params.ids() {
        assert_eq!(loaded.params.value(id), net.params.value(id));
    }

    let steps = |p: &std::path::Path| -> Vec<(usize, u64)> {
        let mut r = csv::Reader::from_path(p).unwrap();
        let h = r.headers().unwrap().clone();
        assert_eq!(h.iter().collect::<Vec<_>>(), ["epoch", "step", "L_align", "L_cls", "lr", "wallclock"]);
        r.records()
            .map(|x| {
                let x = x.unwrap();
                (x[0].parse().unwrap(), x[1].parse().unwrap())
            })
            .collect()
    };
    let first = steps(&out.path().join(TRAIN_LOG));
    let per_epoch = 2 * cfg.train.rollout_steps;
    assert_eq!(first.len(), per_epoch);

    cfg.train.epochs = 2;
    cmd_train(&cfg, TrainData::Dataset(&src), out.path(), true, &mut |m| epochs.push(m.epoch)).unwrap();
    assert_eq!(epochs, vec![0, 1]);
    let all = steps(&out.path().join(TRAIN_LOG));
    assert_eq!(all.len(), 2 * per_epoch);
    assert_eq!(&all[..per_epoch], &first[..]);
    for w in all.windows(2) {
        assert_eq!(w[1].1, w[0].1 + 1);
    }
    assert_eq!(all[per_epoch].0, 1);
}

#[test]
fn oracle_is_exact_and_identity_keeps_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.noise = NoiseConfig::default();
    cmd_gen_data(&cfg, dir.path(), 8, Split::Eval).unwrap();
    let src = DatasetSource::open(dir.path()).unwrap();
    let n_mul = cfg.net.n_mul;
    let oracle = evaluate(&PredictorChoice::Oracle { n_mul }, &src, &cfg.refine, &cfg.eval, 3).unwrap();
    for t in &oracle.per_image_by_iteration[1..] {
        assert_eq!(t.instance_avg, 1.0);
    }
    let identity = evaluate(&PredictorChoice::Identity { n_mul }, &src, &cfg.refine, &cfg.eval, 3).unwrap();
    let init = identity.per_image_by_iteration[0].instance_avg;
    for t in &identity.per_image_by_iteration {
        assert_eq!(t.instance_avg, init);
    }

    let out = tempfile::tempdir().unwrap();
    write_eval_report(out.path(), &oracle).unwrap();
    let plots = out.path().join("plots");
    let written = cmd_plots(&out.path().join(REPORT), None, &plots).unwrap();
    assert_eq!(written.len(), 2);
    let rows = csv::Reader::from_path(plots.join("accuracy_vs_iteration.csv")).unwrap().records().count();
    assert_eq!(rows, cfg.refine.iterations + 1);
}
