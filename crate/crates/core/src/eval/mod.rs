//! Report metrics: BLEU-1..4, METEOR, ROUGE-L, clinical efficacy, region
//! recognition and the length-distribution divergence.

pub mod clinical;
pub mod labeler;
pub mod length;
pub mod nlg;
pub mod text;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::StructuredReport;
use crate::volume::Area;

pub use clinical::{ce_metrics, region_recognition_metrics, Prf};
pub use labeler::{Labeler, RuleLabeler};
pub use length::{length_divergence, LengthDistribution};
pub use nlg::{bleu_n, meteor, rouge_l, MeteorConfig};

/// One generated report paired with its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub sample_id: String,
    pub generated: StructuredReport,
    /// Reference text with no prefixes.
    pub reference: String,
    /// True area at each slot of the generation prompt.
    pub slot_areas: Vec<Area>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub sample_id: String,
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge_l: f64,
    pub ce: Prf,
    pub region_recognition: BTreeMap<Area, Prf>,
    pub length_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub report: MetricReport,
    pub per_sample: Vec<SampleScores>,
    pub lengths: LengthDistribution,
}

/// Corpus scores; NLG metrics are means of sentence scores.
pub fn evaluate(pairs: &[EvalPair], labeler: &dyn Labeler, meteor_cfg: &MeteorConfig) -> Result<EvalOutput> {
    if pairs.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let texts: Vec<String> = pairs.iter().map(|p| p.generated.evaluation_text()).collect();
    let per_sample: Vec<SampleScores> = pairs
        .par_iter()
        .zip(texts.par_iter())
        .map(|(p, gen)| {
            let c = text::tokenize(gen);
            let r = text::tokenize(&p.reference);
            SampleScores {
                sample_id: p.sample_id.clone(),
                bleu: [1, 2, 3, 4].map(|n| nlg::bleu_tokens(&c, &r, n)),
                meteor: nlg::meteor_tokens(&c, &r, meteor_cfg),
                rouge_l: nlg::rouge_l_tokens(&c, &r),
            }
        })
        .collect();
    let n = per_sample.len() as f64;
    let mean = |f: &dyn Fn(&SampleScores) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
    let pred_labels: Vec<_> = texts.iter().map(|t| labeler.extract(t)).collect();
    let gt_labels: Vec<_> = pairs.iter().map(|p| labeler.extract(&p.reference)).collect();
    let reports: Vec<StructuredReport> = pairs.iter().map(|p| p.generated.clone()).collect();
    let truths: Vec<Vec<Area>> = pairs.iter().map(|p| p.slot_areas.clone()).collect();
    let refs: Vec<&str> = pairs.iter().map(|p| p.reference.as_str()).collect();
    let lengths = length_divergence(&texts.iter().map(String::as_str).collect::<Vec<_>>(), &refs)?;
    let report = MetricReport {
        bleu: [0, 1, 2, 3].map(|k| mean(&|s| s.bleu[k])),
        meteor: mean(&|s| s.meteor),
        rouge_l: mean(&|s| s.rouge_l),
        ce: ce_metrics(&pred_labels, &gt_labels)?,
        region_recognition: region_recognition_metrics(&reports, &truths)?,
        length_kl: lengths.kl,
    };
    Ok(EvalOutput {
        report,
        per_sample,
        lengths,
    })
}
