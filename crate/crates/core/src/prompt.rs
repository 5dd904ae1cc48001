//! Prompt layout, placeholder substitution, region shuffling, target
//! serialization and parsing of generated reports.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::decoder::TokenEmbedder;
use crate::encoders::{GlobalFeature, LocalFeature};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tokenizer::Tokenizer;
use crate::volume::Area;

pub const DEFAULT_INSTRUCTION: &str =
    "Please describe the findings in the image and each referred region.";
/// `{instruction}` is replaced by the instruction text and `<regions>` expands
/// to `<region 1>` … `<region n>`.
pub const DEFAULT_TEMPLATE: &str = "{instruction}<image><regions>";
pub const IMAGE_TOKEN: &str = "<image>";
pub const UNKNOWN_AREA: &str = "UNKNOWN";
pub const MAX_REGIONS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptTemplate {
    pub template: String,
    pub instruction: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            template: DEFAULT_TEMPLATE.into(),
            instruction: DEFAULT_INSTRUCTION.into(),
        }
    }
}

impl PromptTemplate {
    pub fn build(&self, n_regions: usize) -> Result<PromptSpec> {
        build_prompt_from_template(&self.template, n_regions, &self.instruction)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSegment {
    Text(String),
    Global,
    /// 1-based slot.
    Region(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub segments: Vec<PromptSegment>,
    pub instruction: String,
}

impl PromptSpec {
    pub fn n_regions(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| matches!(s, PromptSegment::Region(_)))
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        let globals = self
            .segments
            .iter()
            .filter(|s| **s == PromptSegment::Global)
            .count();
        if globals != 1 {
            return Err(Error::Prompt(format!("expected one {IMAGE_TOKEN}, found {globals}")));
        }
        let slots: Vec<usize> = self
            .segments
            .iter()
            .filter_map(|s| match s {
                PromptSegment::Region(i) => Some(*i),
                _ => None,
            })
            .collect();
        if slots.is_empty() || slots.len() > MAX_REGIONS {
            return Err(Error::Prompt(format!(
                "region count {} outside 1..={MAX_REGIONS}",
                slots.len()
            )));
        }
        if slots.iter().enumerate().any(|(k, &s)| s != k + 1) {
            return Err(Error::Prompt(format!("region slots {slots:?} not 1..n in order")));
        }
        if !self
            .segments
            .iter()
            .any(|s| matches!(s, PromptSegment::Text(t) if !t.is_empty()))
        {
            return Err(Error::Prompt("prompt has no text segment".into()));
        }
        Ok(())
    }
}

pub fn build_prompt(n_regions: usize, instruction: &str) -> Result<PromptSpec> {
    build_prompt_from_template(DEFAULT_TEMPLATE, n_regions, instruction)
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<image>|<regions>|<region (\d+)>").expect("valid regex"))
}

pub fn build_prompt_from_template(template: &str, n_regions: usize, instruction: &str) -> Result<PromptSpec> {
    if !(1..=MAX_REGIONS).contains(&n_regions) {
        return Err(Error::Prompt(format!(
            "region count {n_regions} outside 1..={MAX_REGIONS}"
        )));
    }
    let text = template.replace("{instruction}", instruction);
    let mut segments = Vec::new();
    let mut last = 0;
    for caps in placeholder_re().captures_iter(&text) {
        let m = caps.get(0).expect("whole match");
        if m.start() > last {
            segments.push(PromptSegment::Text(text[last..m.start()].to_string()));
        }
        match m.as_str() {
            IMAGE_TOKEN => segments.push(PromptSegment::Global),
            "<regions>" => segments.extend((1..=n_regions).map(PromptSegment::Region)),
            _ => {
                let slot: usize = caps[1]
                    .parse()
                    .map_err(|_| Error::Prompt(format!("bad slot in {}", m.as_str())))?;
                segments.push(PromptSegment::Region(slot));
            }
        }
        last = m.end();
    }
    if last < text.len() {
        segments.push(PromptSegment::Text(text[last..].to_string()));
    }
    let spec = PromptSpec {
        segments,
        instruction: instruction.to_string(),
    };
    spec.validate()?;
    if spec.n_regions() != n_regions {
        return Err(Error::Prompt(format!(
            "template yields {} region slots, expected {n_regions}",
            spec.n_regions()
        )));
    }
    Ok(spec)
}

/// Slot `i` (0-based here) shows the local feature at `order[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionAssignment {
    pub order: Vec<usize>,
}

impl RegionAssignment {
    pub fn identity(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
        }
    }

    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Prompt(format!("{order:?} is not a permutation")));
            }
        }
        Ok(Self { order })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Areas in slot order.
    pub fn slot_areas(&self, areas: &[Area]) -> Vec<Area> {
        self.order.iter().map(|&i| areas[i]).collect()
    }
}

/// Uniform random permutation of `items`' indices.
pub fn shuffle_regions<T, R: Rng + ?Sized>(items: &[T], rng: &mut R) -> RegionAssignment {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    RegionAssignment { order }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    Text,
    Global,
    Region(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub kind: SpanKind,
    pub start: usize,
    pub len: usize,
}

/// Fully substituted prompt on a tape.
#[derive(Debug, Clone)]
pub struct EmbeddingSequence {
    pub rows: Var,
    pub len: usize,
    pub text_tokens: usize,
    pub layout: Vec<Span>,
}

/// Replaces text spans with token embeddings, `<image>` with the global
/// feature (omitted when `global` is `None`) and `<region i>` with the local
/// feature assigned to slot `i`.
#[allow(clippy::too_many_arguments)]
pub fn substitute_embeddings<E: TokenEmbedder + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    spec: &PromptSpec,
    global: Option<GlobalFeature>,
    locals: &[LocalFeature],
    assignment: &RegionAssignment,
    embedder: &E,
    tokenizer: &Tokenizer,
) -> Result<EmbeddingSequence> {
    if spec.n_regions() != assignment.len() || locals.len() != assignment.len() {
        return Err(Error::Prompt(format!(
            "{} region slots, {} assigned, {} local features",
            spec.n_regions(),
            assignment.len(),
            locals.len()
        )));
    }
    let width = embedder.width();
    let check = |tape: &Tape, v: Var, what: &str| -> Result<()> {
        let w = tape.shape(v).1;
        if w != width {
            return Err(Error::Shape(format!("{what} width {w}, decoder width {width}")));
        }
        Ok(())
    };
    let mut parts = Vec::new();
    let mut layout = Vec::new();
    let mut start = 0;
    let mut text_tokens = 0;
    for seg in &spec.segments {
        let (kind, v) = match seg {
            PromptSegment::Text(t) => {
                let ids = tokenizer.encode(t);
                if ids.is_empty() {
                    continue;
                }
                text_tokens += ids.len();
                (SpanKind::Text, embedder.embed(tape, store, &ids))
            }
            PromptSegment::Global => match global {
                Some(g) => {
                    check(tape, g.0, "global feature")?;
                    (SpanKind::Global, g.0)
                }
                None => continue,
            },
            PromptSegment::Region(slot) => {
                let local = &locals[assignment.order[slot - 1]];
                check(tape, local.rows, "local feature")?;
                (SpanKind::Region(*slot), local.rows)
            }
        };
        let len = tape.shape(v).0;
        layout.push(Span { kind, start, len });
        start += len;
        parts.push(v);
    }
    let rows = tape.concat_rows(&parts);
    Ok(EmbeddingSequence {
        rows,
        len: start,
        text_tokens,
        layout,
    })
}

pub fn region_prefix(slot: usize, area: Area) -> String {
    format!("The region [{slot}] is {area}.")
}

/// Target text: per slot, optional prefix, the area's report body, newline.
pub fn serialize_target_text(
    slot_areas: &[Area],
    reports: &BTreeMap<Area, String>,
    with_prefix: bool,
) -> Result<String> {
    let mut out = String::new();
    for (k, &area) in slot_areas.iter().enumerate() {
        let body = reports.get(&area).ok_or_else(|| Error::MissingReport {
            record: "target".into(),
            area: area.to_string(),
        })?;
        if with_prefix {
            out.push_str(&region_prefix(k + 1, area));
            out.push(' ');
        }
        out.push_str(body);
        out.push('\n');
    }
    Ok(out)
}

/// Token ids of the target; the caller appends EOS.
pub fn serialize_target(
    slot_areas: &[Area],
    reports: &BTreeMap<Area, String>,
    tokenizer: &Tokenizer,
    with_prefix: bool,
) -> Result<Vec<u32>> {
    Ok(tokenizer.encode(&serialize_target_text(slot_areas, reports, with_prefix)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportSection {
    pub slot: usize,
    /// Canonical area name, the literal text for unknown names, or UNKNOWN.
    pub area: String,
    pub valid: bool,
    pub body: String,
}

impl ReportSection {
    pub fn parsed_area(&self) -> Option<Area> {
        if self.valid {
            Area::parse(&self.area)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredReport {
    pub raw: String,
    pub sections: Vec<ReportSection>,
}

fn prefix_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)the region \[(\d+)\] is ([^.\n]*)\.").expect("valid regex"))
}

fn append_body(body: &mut String, more: &str) {
    if more.is_empty() {
        return;
    }
    if !body.is_empty() {
        body.push(' ');
    }
    body.push_str(more);
}

/// Splits generated text into prefixed sections. Total on any input.
pub fn parse_generated(text: &str) -> StructuredReport {
    let re = prefix_re();
    let mut sections: Vec<ReportSection> = Vec::new();
    let mut preamble = String::new();
    let mut cursor = 0;
    let mut pending: Option<usize> = None;
    let flush = |sections: &mut Vec<ReportSection>, preamble: &mut String, idx: Option<usize>, gap: &str| {
        let gap = gap.trim();
        match idx {
            Some(i) => append_body(&mut sections[i].body, gap),
            None => append_body(preamble, gap),
        }
    };
    for caps in re.captures_iter(text) {
        let m = caps.get(0).expect("whole match");
        flush(&mut sections, &mut preamble, pending, &text[cursor..m.start()]);
        cursor = m.end();
        let slot = caps[1].parse::<usize>().ok();
        let duplicate = slot.map_or(true, |s| sections.iter().any(|x| x.slot == s));
        if duplicate {
            // Unusable prefix: its text is dropped and what follows extends
            // the current section.
            continue;
        }
        let name = caps[2].trim();
        let (area, valid) = match Area::parse(name) {
            Some(a) => (a.name().to_string(), true),
            None => (name.to_string(), false),
        };
        sections.push(ReportSection {
            slot: slot.expect("checked above"),
            area,
            valid,
            body: String::new(),
        });
        pending = Some(sections.len() - 1);
    }
    flush(&mut sections, &mut preamble, pending, &text[cursor..]);
    if sections.is_empty() {
        sections.push(ReportSection {
            slot: 1,
            area: UNKNOWN_AREA.into(),
            valid: false,
            body: preamble,
        });
    } else if !preamble.is_empty() {
        let first = &mut sections[0].body;
        *first = if first.is_empty() {
            preamble
        } else {
            format!("{preamble} {first}")
        };
    }
    StructuredReport {
        raw: text.to_string(),
        sections,
    }
}

impl StructuredReport {
    /// Section bodies joined by spaces with no prefix left in the text.
    pub fn evaluation_text(&self) -> String {
        let mut text = self
            .sections
            .iter()
            .map(|s| s.body.as_str())
            .filter(|b| !b.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        while prefix_re().is_match(&text) {
            text = prefix_re().replace_all(&text, "").into_owned();
        }
        text
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Predicted area per slot (None for invalid names).
    pub fn slot_predictions(&self) -> BTreeMap<usize, Option<Area>> {
        self.sections.iter().map(|s| (s.slot, s.parsed_area())).collect()
    }
}
