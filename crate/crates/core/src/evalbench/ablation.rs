//! The modality/fusion ablation matrix: five single-branch rows scored with
//! their stage-1 heads, then Concat and MAGT over the four audio/video store
//! combinations.

use std::collections::BTreeMap;

use super::metrics::{compute_metrics, MetricReport};
use crate::datamodel::{of_split, Conversation, FeatureStore};
use crate::encoders::{head_logits, Branch};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trainer::{
    predict_fusion, train_concat_on, train_stage2_on, BranchName, RunConfig, Stage2Data,
};

/// Published accuracy and weighted F1 (percent) on IEMOCAP and MELD, shown
/// next to each row for context.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceScores {
    pub iemocap: (f64, f64),
    pub meld: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    /// `single`, `Concat` or `MAGT`.
    pub group: String,
    /// `T`, `A_KD`, `T+A_KD+V`, ...
    pub modalities: String,
    pub split: String,
    pub report: MetricReport,
    pub reference: ReferenceScores,
}

const fn refs(i: (f64, f64), m: (f64, f64)) -> ReferenceScores {
    ReferenceScores {
        iemocap: i,
        meld: m,
    }
}

pub fn reference_scores(group: &str, modalities: &str) -> Option<ReferenceScores> {
    Some(match (group, modalities) {
        ("single", "T") => refs((67.09, 67.46), (62.79, 62.99)),
        ("single", "A") => refs((47.01, 45.91), (50.38, 44.80)),
        ("single", "V") => refs((27.84, 26.28), (40.91, 36.84)),
        ("single", "A_KD") => refs((50.03, 49.65), (49.08, 45.69)),
        ("single", "V_KD") => refs((25.63, 20.21), (40.45, 36.06)),
        ("Concat", "T+A+V") => refs((68.52, 68.64), (65.71, 65.06)),
        ("Concat", "T+A+V_KD") => refs((64.70, 64.38), (60.46, 55.74)),
        ("Concat", "T+A_KD+V") => refs((68.64, 68.70), (65.86, 65.18)),
        ("Concat", "T+A_KD+V_KD") => refs((65.37, 65.19), (60.61, 55.67)),
        ("MAGT", "T+A+V") => refs((68.08, 68.29), (66.32, 65.30)),
        ("MAGT", "T+A+V_KD") => refs((68.08, 68.18), (65.79, 64.73)),
        ("MAGT", "T+A_KD+V") => refs((69.38, 69.59), (66.36, 65.32)),
        ("MAGT", "T+A_KD+V_KD") => refs((68.88, 69.02), (65.79, 64.73)),
        _ => return None,
    })
}

/// Audio/video store pairs of the fusion blocks, in table order.
pub const FUSION_COMBOS: [(BranchName, BranchName); 4] = [
    (BranchName::A, BranchName::V),
    (BranchName::A, BranchName::VKd),
    (BranchName::AKd, BranchName::V),
    (BranchName::AKd, BranchName::VKd),
];

fn store(stores: &BTreeMap<BranchName, FeatureStore>, b: BranchName) -> Result<&FeatureStore> {
    stores
        .get(&b)
        .ok_or_else(|| Error::Dataset(format!("feature store {b} is missing")))
}

/// Scores one stage-1 branch: its head applied to its stored features.
pub fn single_branch_report<T: Scalar>(
    cfg: &RunConfig,
    convs: &[Conversation],
    branch: &Branch<T>,
    features: &FeatureStore,
) -> Result<MetricReport> {
    let split = of_split(convs, cfg.eval.split);
    let ids: Vec<&str> = split
        .iter()
        .flat_map(|c| c.utterances().iter().map(|u| u.utterance_id.as_str()))
        .collect();
    let labels: Vec<usize> = split.iter().flat_map(|c| c.labels()).collect();
    let x = features.matrix::<T>(&ids)?;
    let w = branch.params.get(branch.head.linear.weight);
    let b = branch.params.get(
        branch
            .head
            .linear
            .bias
            .ok_or_else(|| Error::Validation("head without bias".into()))?,
    );
    let preds = head_logits(w, b, &x)?.softmax_rows().argmax_rows();
    compute_metrics(&preds, &labels, &cfg.dataset.label_space)
}

/// All 13 rows. Fusion models are trained here on the stage-1 stores and
/// scored on `cfg.eval.split` with their best-dev parameters.
pub fn run_ablation<T: Scalar>(
    cfg: &RunConfig,
    convs: &[Conversation],
    branches: &BTreeMap<BranchName, Branch<T>>,
    stores: &BTreeMap<BranchName, FeatureStore>,
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let split = cfg.eval.split;
    let mut rows = Vec::with_capacity(13);
    let mut push = |group: &str, modalities: String, report: MetricReport| {
        let reference = reference_scores(group, &modalities).expect("table rows are fixed");
        rows.push(AblationRow {
            group: group.into(),
            modalities,
            split: split.as_str().into(),
            report,
            reference,
        });
    };
    for b in [
        BranchName::T,
        BranchName::A,
        BranchName::V,
        BranchName::AKd,
        BranchName::VKd,
    ] {
        let branch = branches
            .get(&b)
            .ok_or_else(|| Error::Dataset(format!("stage-1 branch {b} is missing")))?;
        push(
            "single",
            b.to_string(),
            single_branch_report(cfg, convs, branch, store(stores, b)?)?,
        );
    }
    let text = store(stores, BranchName::T)?;
    for group in ["Concat", "MAGT"] {
        for (a, v) in FUSION_COMBOS {
            let data = Stage2Data::<T>::new(convs, [text, store(stores, a)?, store(stores, v)?])?;
            let mut c = cfg.clone();
            c.stage2.audio = a;
            c.stage2.video = v;
            let (preds, labels) = if group == "Concat" {
                let out = train_concat_on(&c, &data)?;
                predict_fusion(&out.model.params, &out.model.net, data.split(split))?
            } else {
                let out = train_stage2_on(&c, &data)?;
                predict_fusion(&out.model.params, &out.model.fusion(), data.split(split))?
            };
            let report = compute_metrics(&preds, &labels, &cfg.dataset.label_space)?;
            push(group, format!("T+{a}+{v}"), report);
        }
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str =
    "group,modalities,split,n,accuracy,weighted_f1,reference_iemocap_acc,reference_iemocap_wf1,reference_meld_acc,reference_meld_wf1";

pub fn render_ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.2},{:.2},{:.2},{:.2}\n",
            r.group,
            r.modalities,
            r.split,
            r.report.total(),
            r.report.accuracy,
            r.report.weighted_f1,
            r.reference.iemocap.0,
            r.reference.iemocap.1,
            r.reference.meld.0,
            r.reference.meld.1
        ));
    }
    out
}
