//! Training-loop contracts on small synthetic corpora.

use magtkd_core::datamodel::{
    generate_synth_corpus, FeatureStore, Modality, SplitCounts, SynthCorpus,
};
use magtkd_core::trainer::{
    build_branch, grid_config, sweep, train_stage1, train_stage2, train_stage2_on, BranchName,
    Objective, RunConfig, Stage2Data, TrainingLog,
};
use magtkd_core::{Error, Real};

fn small(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    cfg.dataset.synth.n_conversations = SplitCounts {
        train: 24,
        dev: 6,
        test: 6,
    };
    cfg.stage1.epochs = 2;
    cfg.stage2.epochs = 3;
    cfg
}

fn corpus(cfg: &RunConfig) -> SynthCorpus {
    generate_synth_corpus(&cfg.synth_spec()).unwrap()
}

fn stores(c: &SynthCorpus) -> [&FeatureStore; 3] {
    Modality::ALL.map(|m| c.store(m))
}

#[test]
fn zero_epochs_emit_the_untrained_forward_pass() {
    let mut cfg = small(1);
    cfg.stage1.epochs = 0;
    let c = corpus(&cfg);
    let out = train_stage1::<Real>(&cfg, &c.conversations, stores(&c)).unwrap();
    assert!(out.log.is_empty());
    let audio = c.store(Modality::Audio);
    let ids: Vec<&str> = audio.iter().map(|(id, _)| id).collect();
    let inputs: Vec<_> = ids
        .iter()
        .map(|id| magtkd_core::encoders::EncoderInput::Vector(audio.get(id).unwrap()))
        .collect();
    for b in [BranchName::A, BranchName::AKd] {
        let (feats, _) = build_branch::<Real>(&cfg, b)
            .unwrap()
            .infer(&inputs)
            .unwrap();
        let store = out.store(b);
        for (i, id) in ids.iter().enumerate() {
            let expect: Vec<f32> = feats.row(i).iter().map(|&v| v as f32).collect();
            assert_eq!(store.get(id).unwrap(), &expect[..], "{b} {id}");
        }
    }
}

#[test]
fn teacher_is_frozen_during_distillation() {
    let cfg = small(2);
    let c = corpus(&cfg);
    let out = train_stage1::<Real>(&cfg, &c.conversations, stores(&c)).unwrap();
    assert_eq!(out.teacher_digest.0, out.teacher_digest.1);
    assert_eq!(
        out.branches[&BranchName::T].params.digest(),
        out.teacher_digest.0
    );
}

#[test]
fn stage1_log_has_one_record_per_epoch_and_split() {
    let cfg = small(3);
    let c = corpus(&cfg);
    let out = train_stage1::<Real>(&cfg, &c.conversations, stores(&c)).unwrap();
    for b in BranchName::ALL {
        for split in ["train", "dev"] {
            let epochs: Vec<usize> = out.log.series(b.as_str(), split).map(|r| r.epoch).collect();
            assert_eq!(epochs, vec![1, 2], "{b} {split}");
        }
        let distilled = out
            .log
            .series(b.as_str(), "train")
            .all(|r| r.l_s.is_some() && r.l_f.is_some());
        assert_eq!(distilled, b.distilled(), "{b}");
    }
    let round = TrainingLog::from_jsonl(&out.log.to_jsonl()).unwrap();
    assert_eq!(round, out.log);
}

#[test]
fn teacher_beats_chance_by_twenty_points() {
    let cfg = RunConfig::desk();
    let c = corpus(&cfg);
    let out = train_stage1::<Real>(&cfg, &c.conversations, stores(&c)).unwrap();
    let last = out.log.series("T", "dev").last().unwrap();
    let chance = 1.0 / cfg.dataset.label_space.len() as f64;
    assert_eq!(last.epoch, 10);
    assert!(
        last.accuracy >= chance + 0.20,
        "teacher dev accuracy {}",
        last.accuracy
    );
}

/// Dev distillation losses of the audio student, first and final epoch.
fn audio_student_dev_losses(seed: u64) -> ((f64, f64), (f64, f64)) {
    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    let c = corpus(&cfg);
    let out = train_stage1::<Real>(&cfg, &c.conversations, stores(&c)).unwrap();
    let dev: Vec<_> = out.log.series("A_KD", "dev").collect();
    let (first, last) = (dev[0], dev[dev.len() - 1]);
    (
        (first.l_s.unwrap(), last.l_s.unwrap()),
        (first.l_f.unwrap(), last.l_f.unwrap()),
    )
}

#[test]
fn audio_student_distillation_losses_fall_on_dev() {
    let runs: Vec<_> = (0..6).map(audio_student_dev_losses).collect();
    for (seed, (_, lf)) in runs.iter().enumerate() {
        assert!(lf.1 < lf.0, "seed {seed}: dev L_f {} -> {}", lf.0, lf.1);
    }
    let ls_drop: f64 = runs.iter().map(|(ls, _)| ls.0 - ls.1).sum::<f64>() / runs.len() as f64;
    assert!(ls_drop > 0.0, "mean dev L_s change {ls_drop}");
}

#[test]
fn missing_feature_names_the_utterance() {
    let cfg = small(4);
    let c = corpus(&cfg);
    let victim = c.conversations[0].utterances()[1].utterance_id.clone();
    let audio = c.store(Modality::Audio);
    let mut pruned =
        FeatureStore::new(Modality::Audio, audio.dimension(), audio.provenance.clone());
    for (id, v) in audio.iter().filter(|(id, _)| *id != victim) {
        pruned.insert(id, v.to_vec()).unwrap();
    }
    let inputs = [c.store(Modality::Text), &pruned, c.store(Modality::Video)];
    for err in [
        train_stage1::<Real>(&cfg, &c.conversations, inputs)
            .err()
            .unwrap(),
        train_stage2::<Real>(&cfg, &c.conversations, inputs)
            .err()
            .unwrap(),
    ] {
        match err {
            Error::Dataset(msg) => assert!(msg.contains(&victim), "{msg}"),
            other => panic!("expected a dataset error, got {other}"),
        }
    }
}

#[test]
fn runaway_learning_rate_is_reported_as_divergence() {
    let mut cfg = small(5);
    cfg.stage1.learning_rate = f64::MAX;
    let c = corpus(&cfg);
    let err = train_stage1::<Real>(&cfg, &c.conversations, stores(&c))
        .err()
        .unwrap();
    assert!(matches!(err, Error::Divergence(_)), "{err}");
}

fn stage2_data(cfg: &RunConfig) -> Stage2Data<Real> {
    let c = corpus(cfg);
    let s1 = train_stage1::<Real>(cfg, &c.conversations, stores(&c)).unwrap();
    let s2 = &cfg.stage2;
    Stage2Data::new(
        &c.conversations,
        [
            s1.store(BranchName::T),
            s1.store(s2.audio),
            s1.store(s2.video),
        ],
    )
    .unwrap()
}

#[test]
fn stage2_is_reproducible() {
    let cfg = small(6);
    let data = stage2_data(&cfg);
    let a = train_stage2_on(&cfg, &data).unwrap();
    let b = train_stage2_on(&cfg, &data).unwrap();
    assert_eq!(a.run.last.digest(), b.run.last.digest());
    assert_eq!(a.run.best.digest(), b.run.best.digest());
    assert_eq!(a.run.log, b.run.log);
    assert_eq!(a.run.steps, b.run.steps);
}

#[test]
fn logged_total_is_the_weighted_sum_of_components() {
    let mut cfg = small(7);
    cfg.stage2.alpha = 0.3;
    cfg.stage2.beta = 0.6;
    let data = stage2_data(&cfg);
    let out = train_stage2_on(&cfg, &data).unwrap();
    assert!(!out.run.steps.is_empty());
    for s in &out.run.steps {
        let sum = s.l_ce + 0.3 * s.l_kd_a.unwrap() + 0.6 * s.l_kd_v.unwrap();
        assert!(
            (s.l_total - sum).abs() <= 1e-6,
            "step {}: {} vs {sum}",
            s.step,
            s.l_total
        );
    }
    for r in &out.run.log.records {
        let sum = r.l_ce + 0.3 * r.l_kd_a.unwrap() + 0.6 * r.l_kd_v.unwrap();
        assert!((r.l_total - sum).abs() <= 1e-6);
    }
}

#[test]
fn zero_coefficients_match_a_cross_entropy_run() {
    let mut cfg = small(8);
    cfg.stage2.alpha = 0.0;
    cfg.stage2.beta = 0.0;
    cfg.stage2.epochs = 1;
    let data = stage2_data(&cfg);
    let full = train_stage2_on(&cfg, &data).unwrap();
    cfg.stage2.objective = Objective::CeOnly;
    let ce = train_stage2_on(&cfg, &data).unwrap();
    let totals = |s: &[magtkd_core::trainer::StepRecord]| {
        s.iter().map(|r| r.l_total.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(totals(&full.run.steps), totals(&ce.run.steps));
    assert_eq!(full.run.last.digest(), ce.run.last.digest());
}

#[test]
fn training_loss_falls_over_epochs() {
    let mut cfg = small(9);
    cfg.stage2.epochs = 6;
    let data = stage2_data(&cfg);
    let out = train_stage2_on(&cfg, &data).unwrap();
    let train: Vec<f64> = out
        .run
        .log
        .series("MAGT", "train")
        .map(|r| r.l_total)
        .collect();
    assert_eq!(train.len(), 6);
    assert!(train[5] < train[0], "{train:?}");
}

#[test]
fn one_point_sweep_is_a_plain_run() {
    let cfg = small(10);
    let data = stage2_data(&cfg);
    let rows = sweep(&cfg, &data, &[(cfg.stage2.alpha, cfg.stage2.beta)], 1).unwrap();
    let direct = train_stage2_on(&cfg, &data).unwrap();
    let best = direct.run.best_dev.unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(
        (rows[0].seed, rows[0].best_epoch),
        (cfg.seed, direct.run.best_epoch)
    );
    assert_eq!(
        (rows[0].accuracy, rows[0].weighted_f1),
        (best.accuracy, best.weighted_f1)
    );
}

#[test]
fn two_by_two_sweep_tags_every_point() {
    let mut cfg = small(11);
    cfg.stage2.epochs = 1;
    let data = stage2_data(&cfg);
    let grid = [(0.0, 0.0), (0.0, 0.5), (0.5, 0.0), (0.5, 0.5)];
    let serial = sweep(&cfg, &data, &grid, 1).unwrap();
    let tags: Vec<(f64, f64)> = serial.iter().map(|r| (r.alpha, r.beta)).collect();
    assert_eq!(tags, grid);
    for (i, r) in serial.iter().enumerate() {
        assert_eq!(r.seed, grid_config(&cfg, i, r.alpha, r.beta).seed);
    }
    assert_eq!(sweep(&cfg, &data, &grid, 3).unwrap(), serial);
}
