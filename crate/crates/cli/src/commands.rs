//! One function per subcommand. Each writes its outputs under
//! `<out>/<command>/` and finishes with `run_manifest.json`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use magtkd_core::datamodel::{
    generate_synth_corpus, write_feature_store, write_manifest, Conversation, FeatureStore,
    Modality, Provenance, Split,
};
use magtkd_core::evalbench::{
    complexity_benchmark, compute_metrics, model_embeddings, render_ablation_csv, render_bench_csv,
    render_metrics_csv, run_ablation, single_branch_report, store_embeddings, write_embedding_dump,
    MetricRow,
};
use magtkd_core::params::write_checkpoint;
use magtkd_core::trainer::{
    predict_fusion, render_sweep_csv, sweep as run_sweep, thread_budget, train_stage1,
    train_stage2_on, BranchName, RunConfig, Stage2Data,
};
use magtkd_core::{Real, Result};
use serde_json::json;

use crate::artifacts::{
    checksums, load_corpus, load_stage1_branches, load_stage1_stores, load_stage2, now_unix,
    write_text, Layout, RunManifest,
};

pub struct Context {
    pub command: &'static str,
    pub argv: Vec<String>,
    pub overrides: Vec<String>,
    pub layout: Layout,
    pub cfg: RunConfig,
}

impl Context {
    fn finish(&self, started: f64, inputs: &[PathBuf], artifacts: &[PathBuf]) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.into(),
            argv: self.argv.clone(),
            overrides: self.overrides.clone(),
            seed: self.cfg.seed,
            config_hash: self.cfg.hash(),
            config: self.cfg.clone(),
            started_unix: started,
            finished_unix: now_unix(),
            inputs: checksums(inputs)?,
            artifacts: checksums(artifacts)?,
        };
        let path = self.layout.dir(self.command)?.join("run_manifest.json");
        write_text(
            &path,
            &serde_json::to_string_pretty(&manifest).expect("plain manifest"),
        )?;
        println!(
            "{}: {} artifacts in {}",
            self.command,
            artifacts.len(),
            self.layout.root.join(self.command).display()
        );
        Ok(())
    }
}

pub fn synth(ctx: &Context) -> Result<()> {
    let started = now_unix();
    let dir = ctx.layout.dir("synth")?;
    let spec = ctx.cfg.synth_spec();
    let corpus = generate_synth_corpus(&spec)?;
    let mut written = vec![ctx.layout.synth_manifest()];
    write_manifest(&corpus.conversations, &written[0])?;
    for m in Modality::ALL {
        let p = ctx.layout.synth_features(m);
        write_feature_store(corpus.store(m), &p)?;
        written.push(p);
    }
    let echo = dir.join("spec.json");
    write_text(
        &echo,
        &serde_json::to_string_pretty(&spec).expect("plain spec"),
    )?;
    written.push(echo);
    ctx.finish(started, &[], &written)
}

pub fn stage1(ctx: &Context) -> Result<()> {
    let started = now_unix();
    let (convs, inputs, input_paths) = load_corpus(&ctx.cfg, &ctx.layout)?;
    let dir = ctx.layout.dir("stage1")?;
    let out = train_stage1::<Real>(&ctx.cfg, &convs, [&inputs[0], &inputs[1], &inputs[2]])?;
    let hash = ctx.cfg.hash();
    let mut written = Vec::new();
    for b in BranchName::ALL {
        let ckpt = ctx.layout.stage1_checkpoint(b);
        write_checkpoint(&out.branches[&b].params, &hash, &ckpt)?;
        let feat = ctx.layout.stage1_features(b);
        write_feature_store(out.store(b), &feat)?;
        written.extend([ckpt, feat]);
    }
    let log = dir.join("log.jsonl");
    out.log.write(&log)?;
    written.push(log);
    ctx.finish(started, &input_paths, &written)
}

/// Conversations, stage-1 stores, and the input paths they came from.
type Stage1Inputs = (
    Vec<Conversation>,
    BTreeMap<BranchName, FeatureStore>,
    Vec<PathBuf>,
);

fn stage2_data(ctx: &Context) -> Result<Stage1Inputs> {
    let (convs, _, mut inputs) = load_corpus(&ctx.cfg, &ctx.layout)?;
    inputs.truncate(1);
    let stores = load_stage1_stores(&ctx.cfg, &ctx.layout)?;
    inputs.extend(BranchName::ALL.map(|b| ctx.layout.stage1_features(b)));
    Ok((convs, stores, inputs))
}

pub fn stage2(ctx: &Context) -> Result<()> {
    let started = now_unix();
    let (convs, stores, inputs) = stage2_data(ctx)?;
    let dir = ctx.layout.dir("stage2")?;
    let s2 = &ctx.cfg.stage2;
    let data = Stage2Data::<Real>::new(
        &convs,
        [
            &stores[&BranchName::T],
            &stores[&s2.audio],
            &stores[&s2.video],
        ],
    )?;
    let out = train_stage2_on::<Real>(&ctx.cfg, &data)?;
    let ckpt = ctx.layout.stage2_checkpoint();
    out.model.save(&ckpt, &ctx.cfg.hash())?;
    let log = dir.join("log.jsonl");
    out.run.log.write(&log)?;
    let steps = dir.join("steps.jsonl");
    let lines: String = out
        .run
        .steps
        .iter()
        .map(|s| serde_json::to_string(s).expect("plain record") + "\n")
        .collect();
    write_text(&steps, &lines)?;
    let summary = dir.join("summary.json");
    let best = out.run.best_dev.as_ref();
    write_text(
        &summary,
        &serde_json::to_string_pretty(&json!({
            "best_epoch": out.run.best_epoch,
            "dev_accuracy": best.map(|r| r.accuracy),
            "dev_weighted_f1": best.map(|r| r.weighted_f1),
            "audio": s2.audio,
            "video": s2.video,
        }))
        .expect("plain json"),
    )?;
    ctx.finish(started, &inputs, &[ckpt, log, steps, summary])
}

pub fn eval(ctx: &Context) -> Result<()> {
    let started = now_unix();
    let (convs, stores, mut inputs) = stage2_data(ctx)?;
    let branches = load_stage1_branches(&ctx.cfg, &ctx.layout)?;
    let model = load_stage2(&ctx.cfg, &ctx.layout)?;
    inputs.push(ctx.layout.stage2_checkpoint());
    let dir = ctx.layout.dir("eval")?;
    let s2 = &ctx.cfg.stage2;
    let data = Stage2Data::<Real>::new(
        &convs,
        [
            &stores[&BranchName::T],
            &stores[&s2.audio],
            &stores[&s2.video],
        ],
    )?;
    let mut rows = Vec::new();
    for split in [Split::Dev, Split::Test] {
        let mut c = ctx.cfg.clone();
        c.eval.split = split;
        for b in BranchName::ALL {
            rows.push(MetricRow {
                name: b.to_string(),
                split: split.to_string(),
                report: single_branch_report(&c, &convs, &branches[&b], &stores[&b])?,
            });
        }
        if data.split(split).is_empty() {
            continue;
        }
        let (preds, labels) = predict_fusion(&model.params, &model.fusion(), data.split(split))?;
        rows.push(MetricRow {
            name: format!("MAGT:T+{}+{}", s2.audio, s2.video),
            split: split.to_string(),
            report: compute_metrics(&preds, &labels, &ctx.cfg.dataset.label_space)?,
        });
    }
    let csv = dir.join("metrics.csv");
    write_text(&csv, &render_metrics_csv(&rows))?;
    let detail = dir.join("metrics.json");
    let reports: Vec<_> = rows
        .iter()
        .map(|r| json!({"name": r.name, "split": r.split, "report": r.report}))
        .collect();
    write_text(
        &detail,
        &serde_json::to_string_pretty(&reports).expect("plain json"),
    )?;
    ctx.finish(started, &inputs, &[csv, detail])
}

pub fn ablate(ctx: &Context) -> Result<()> {
    let started = now_unix();
    let (convs, stores, mut inputs) = stage2_data(ctx)?;
    let branches = load_stage1_branches(&ctx.cfg, &ctx.layout)?;
    inputs.extend(BranchName::ALL.map(|b| ctx.layout.stage1_checkpoint(b)));
    let dir = ctx.layout.dir("ablate")?;
    let rows = run_ablation::<Real>(&ctx.cfg, &convs, &branches, &stores)?;
    let csv = dir.join("ablation.csv");
    write_text(&csv, &render_ablation_csv(&rows))?;
    ctx.finish(started, &inputs, &[csv])
}

pub fn sweep(ctx: &Context) -> Result<()> {
    let started = now_unix();
    let (convs, stores, inputs) = stage2_data(ctx)?;
    let dir = ctx.layout.dir("sweep")?;
    let s2 = &ctx.cfg.stage2;
    let data = Stage2Data::<Real>::new(
        &convs,
        [
            &stores[&BranchName::T],
            &stores[&s2.audio],
            &stores[&s2.video],
        ],
    )?;
    let rows = run_sweep::<Real>(&ctx.cfg, &data, &ctx.cfg.sweep.grid(), thread_budget())?;
    let csv = dir.join("sweep.csv");
    write_text(&csv, &render_sweep_csv(&rows))?;
    ctx.finish(started, &inputs, &[csv])
}

pub fn bench(ctx: &Context) -> Result<()> {
    let started = now_unix();
    let dir = ctx.layout.dir("bench")?;
    let rows = complexity_benchmark::<f32>(&ctx.cfg.bench)?;
    let csv = dir.join("bench.csv");
    write_text(&csv, &render_bench_csv(&rows))?;
    ctx.finish(started, &[], &[csv])
}

pub fn export(ctx: &Context) -> Result<()> {
    let started = now_unix();
    let (convs, stores, mut inputs) = stage2_data(ctx)?;
    let dir = ctx.layout.dir("export")?;
    let split = ctx.cfg.eval.split;
    let mut written = Vec::new();
    for b in BranchName::ALL {
        let dump = store_embeddings(&stores[&b], &convs, split)?;
        let (m, l) = (
            dir.join(format!("{b}.feat")),
            dir.join(format!("{b}.labels.csv")),
        );
        write_embedding_dump(&dump, b.modality(), stores[&b].provenance.clone(), &m, &l)?;
        written.extend([m, l]);
    }
    if ctx.layout.stage2_checkpoint().exists() {
        let model = load_stage2(&ctx.cfg, &ctx.layout)?;
        inputs.push(ctx.layout.stage2_checkpoint());
        let s2 = &ctx.cfg.stage2;
        let dump = model_embeddings(
            &model,
            &convs,
            [
                &stores[&BranchName::T],
                &stores[&s2.audio],
                &stores[&s2.video],
            ],
            split,
        )?;
        let (m, l) = (dir.join("MAGT.feat"), dir.join("MAGT.labels.csv"));
        let provenance = Provenance {
            encoder: format!("magt:T+{}+{}", s2.audio, s2.video),
            config_hash: ctx.cfg.hash(),
        };
        write_embedding_dump(&dump, Modality::Text, provenance, &m, &l)?;
        written.extend([m, l]);
    }
    ctx.finish(started, &inputs, &written)
}
