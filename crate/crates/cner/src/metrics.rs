//! Entity-level span extraction and F1 reporting.

use std::collections::BTreeMap;

use crate::data::OUTSIDE;
use crate::error::{Error, Result};

/// Half-open token span `[start, end)` of one entity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub entity_type: String,
    pub start: usize,
    pub end: usize,
}

/// Exact-match counts for one entity type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TypeCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl TypeCounts {
    pub fn f1(&self) -> f64 {
        prf(self.tp, self.fp, self.fn_).2
    }
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Per-step metric bundle: per-type F1 plus macro averages over the old/new
/// partition and micro F1 over all types seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub per_type_f1: BTreeMap<String, f64>,
    pub ma_f1_old: Option<f64>,
    pub ma_f1_new: f64,
    pub ma_f1_all: f64,
    pub mi_f1_all: f64,
    pub counts: BTreeMap<String, TypeCounts>,
}

/// Run-level averages: all-type scores over every step, old/new scores over
/// steps 2..T only.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub avg_mi_f1_all: f64,
    pub avg_ma_f1_all: f64,
    pub avg_ma_f1_old: Option<f64>,
    pub avg_ma_f1_new: Option<f64>,
}

/// Turns a BIO tag sequence into maximal spans. A B- tag always opens a new
/// span; an I- tag continues a same-type span, and otherwise (dangling, or a
/// type change mid-run) behaves like B-.
pub fn extract_spans(tags: &[String]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (prefix, ty) = match tag.split_once('-') {
            Some((p, t)) if p == "B" || p == "I" => (p, t),
            _ => ("O", ""),
        };
        let continues = prefix == "I"
            && matches!(&open, Some((open_ty, _)) if open_ty == ty);
        if !continues {
            if let Some((entity_type, start)) = open.take() {
                spans.push(Span {
                    entity_type,
                    start,
                    end: i,
                });
            }
            if prefix != "O" {
                open = Some((ty.to_string(), i));
            }
        }
    }
    if let Some((entity_type, start)) = open {
        spans.push(Span {
            entity_type,
            start,
            end: tags.len(),
        });
    }
    spans
}

/// Inverse of [`extract_spans`] for non-overlapping spans.
pub fn spans_to_tags(spans: &[Span], len: usize) -> Vec<String> {
    let mut tags = vec![OUTSIDE.to_string(); len];
    for span in spans {
        tags[span.start] = format!("B-{}", span.entity_type);
        for tag in tags.iter_mut().take(span.end).skip(span.start + 1) {
            *tag = format!("I-{}", span.entity_type);
        }
    }
    tags
}

/// Scoring knobs. With `include_absent_types` (the default), a type with no
/// gold and no predicted spans still enters the macro average with F1 = 0,
/// keeping partition sizes schedule-determined.
#[derive(Debug, Clone, Copy)]
pub struct F1Options {
    pub include_absent_types: bool,
}

impl Default for F1Options {
    fn default() -> Self {
        F1Options {
            include_absent_types: true,
        }
    }
}

pub fn f1_scores(
    gold: &[Vec<Span>],
    pred: &[Vec<Span>],
    types_old: &[String],
    types_new: &[String],
    step: usize,
) -> StepReport {
    f1_scores_with(gold, pred, types_old, types_new, step, F1Options::default())
}

pub fn f1_scores_with(
    gold: &[Vec<Span>],
    pred: &[Vec<Span>],
    types_old: &[String],
    types_new: &[String],
    step: usize,
    options: F1Options,
) -> StepReport {
    assert_eq!(
        gold.len(),
        pred.len(),
        "gold and pred must cover the same sentences"
    );
    let all_types: Vec<String> = types_old.iter().chain(types_new).cloned().collect();
    let mut counts: BTreeMap<String, TypeCounts> = all_types
        .iter()
        .map(|t| (t.clone(), TypeCounts::default()))
        .collect();

    for (gold_sent, pred_sent) in gold.iter().zip(pred) {
        for span in pred_sent {
            let Some(c) = counts.get_mut(&span.entity_type) else {
                continue; // outside the scored type set
            };
            if gold_sent.contains(span) {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        }
        for span in gold_sent {
            let Some(c) = counts.get_mut(&span.entity_type) else {
                continue;
            };
            if !pred_sent.contains(span) {
                c.fn_ += 1;
            }
        }
    }

    let scored = |ty: &String| {
        options.include_absent_types || {
            let c = &counts[ty];
            c.tp + c.fp + c.fn_ > 0
        }
    };
    let per_type_f1: BTreeMap<String, f64> = all_types
        .iter()
        .filter(|t| scored(t))
        .map(|t| (t.clone(), counts[t].f1()))
        .collect();
    let macro_over = |types: &[String]| -> Option<f64> {
        let f1s: Vec<f64> = types
            .iter()
            .filter(|t| scored(t))
            .map(|t| counts[t].f1())
            .collect();
        if f1s.is_empty() {
            None
        } else {
            Some(f1s.iter().sum::<f64>() / f1s.len() as f64)
        }
    };

    let (tp, fp, fn_) = counts.values().fold((0, 0, 0), |(a, b, c), t| {
        (a + t.tp, b + t.fp, c + t.fn_)
    });
    let mi_f1_all = prf(tp, fp, fn_).2;

    StepReport {
        step,
        ma_f1_old: macro_over(types_old),
        ma_f1_new: macro_over(types_new).unwrap_or(0.0),
        ma_f1_all: macro_over(&all_types).unwrap_or(0.0),
        mi_f1_all,
        per_type_f1,
        counts,
    }
}

/// Averages step metrics per the step-wise reporting convention: all-type
/// scores over steps 1..T, old/new scores over steps 2..T.
pub fn run_averages(reports: &[StepReport]) -> Result<RunSummary> {
    if reports.is_empty() {
        return Err(Error::Contract("run_averages over zero reports".into()));
    }
    let n = reports.len() as f64;
    let avg_mi_f1_all = reports.iter().map(|r| r.mi_f1_all).sum::<f64>() / n;
    let avg_ma_f1_all = reports.iter().map(|r| r.ma_f1_all).sum::<f64>() / n;
    let later = &reports[1..];
    let (avg_ma_f1_old, avg_ma_f1_new) = if later.is_empty() {
        (None, None)
    } else {
        let m = later.len() as f64;
        let old = later.iter().filter_map(|r| r.ma_f1_old).sum::<f64>() / m;
        let new = later.iter().map(|r| r.ma_f1_new).sum::<f64>() / m;
        (Some(old), Some(new))
    };
    Ok(RunSummary {
        avg_mi_f1_all,
        avg_ma_f1_all,
        avg_ma_f1_old,
        avg_ma_f1_new,
    })
}
