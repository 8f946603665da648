//! Rendering of stage-1 reasoning prompts and stage-2 selection prompts.
//!
//! A prompt is an ordered list of text and image segments. Rendering is a
//! pure function of the question, the exemplars and the template set, and
//! every bundle carries a SHA-256 fingerprint of its segment sequence.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::retriever::{ExemplarSet, ExemplarShape};
use crate::taxonomy::{AnswerMode, QuestionSpec};

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("exemplar shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stage-1 reasoning text is empty")]
    EmptyReasoning,
    #[error("template file {path}: {message}")]
    Template { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Reasoning,
    Selection,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Segment {
    Text { text: String },
    Image { image_ref: String },
}

impl Segment {
    fn text(s: impl Into<String>) -> Self {
        Segment::Text { text: s.into() }
    }

    fn image(r: impl Into<String>) -> Self {
        Segment::Image { image_ref: r.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub stage: Stage,
    pub segments: Vec<Segment>,
    pub cot_enabled: bool,
    pub fingerprint: String,
}

/// Hash of a stage tag and segment sequence; length-prefixed so segment
/// boundaries are part of the content.
pub fn fingerprint(stage: Stage, segments: &[Segment]) -> String {
    let mut h = Sha256::new();
    h.update(match stage {
        Stage::Reasoning => b"reasoning".as_slice(),
        Stage::Selection => b"selection".as_slice(),
    });
    for seg in segments {
        let (tag, body) = match seg {
            Segment::Text { text } => (b'T', text.as_bytes()),
            Segment::Image { image_ref } => (b'I', image_ref.as_bytes()),
        };
        h.update([tag]);
        h.update((body.len() as u64).to_le_bytes());
        h.update(body);
    }
    hex::encode(h.finalize())
}

impl PromptBundle {
    fn new(stage: Stage, segments: Vec<Segment>, cot_enabled: bool) -> Self {
        let fingerprint = fingerprint(stage, &segments);
        Self {
            stage,
            segments,
            cot_enabled,
            fingerprint,
        }
    }

    pub fn image_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| matches!(s, Segment::Image { .. }))
            .count()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Text { text } => Some(text.as_str()),
            Segment::Image { .. } => None,
        })
    }

    /// Recomputes the fingerprint from the segments.
    pub fn verify_fingerprint(&self) -> bool {
        fingerprint(self.stage, &self.segments) == self.fingerprint
    }

    /// Plain-text rendering: segments separated by blank lines, images as
    /// `<image:REF>` placeholders.
    pub fn render_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for PromptBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, seg) in self.segments.iter().enumerate() {
            if i > 0 {
                f.write_str("\n\n")?;
            }
            match seg {
                Segment::Text { text } => f.write_str(text)?,
                Segment::Image { image_ref } => write!(f, "<image:{image_ref}>")?,
            }
        }
        Ok(())
    }
}

/// Template strings with `{slot}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Templates {
    pub role: String,
    pub question_closed: String,
    pub question_open: String,
    pub exemplar_intro: String,
    pub exemplar: String,
    pub query: String,
    pub cot_icl: String,
    pub cot_zero_shot: String,
    pub selection_closed: String,
    pub selection_numeric: String,
    pub candidate_separator: String,
}

const BUILTIN_TEMPLATES: &str = include_str!("../templates/prompts.toml");

impl Default for Templates {
    fn default() -> Self {
        toml::from_str(BUILTIN_TEMPLATES).expect("shipped templates parse")
    }
}

impl Templates {
    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let err = |message: String| PromptError::Template {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        toml::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    // Single pass so slot values containing `{...}` are never re-expanded.
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let filled = after.find('}').and_then(|end| {
            let name = &after[..end];
            slots
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (*v, end))
        });
        match filled {
            Some((value, end)) => {
                out.push_str(value);
                rest = &after[end + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, Default)]
pub struct Prompter {
    templates: Templates,
}

impl Prompter {
    pub fn new(templates: Templates) -> Self {
        Self { templates }
    }

    pub fn templates(&self) -> &Templates {
        &self.templates
    }

    fn candidates(&self, choices: &[String]) -> String {
        choices.join(&self.templates.candidate_separator)
    }

    /// True if `text` contains either chain-of-thought trigger sentence.
    pub fn has_cot_trigger(&self, text: &str) -> bool {
        text.contains(&self.templates.cot_icl) || text.contains(&self.templates.cot_zero_shot)
    }

    fn check_shape(spec: &QuestionSpec, exemplars: &ExemplarSet) -> Result<(), PromptError> {
        match (&spec.answer_mode, exemplars.shape) {
            (_, ExemplarShape::Empty) if exemplars.entries.is_empty() => Ok(()),
            (_, ExemplarShape::Empty) => Err(PromptError::ShapeMismatch(
                "empty-shaped exemplar set has entries".into(),
            )),
            (AnswerMode::Closed(space), ExemplarShape::MultipleChoice) => {
                match exemplars
                    .entries
                    .iter()
                    .find(|e| !space.iter().any(|c| c == &e.answer_text))
                {
                    Some(e) => Err(PromptError::ShapeMismatch(format!(
                        "exemplar answer {:?} is not in the answer space",
                        e.answer_text
                    ))),
                    None => Ok(()),
                }
            }
            (AnswerMode::OpenNumeric, ExemplarShape::Counting) => Ok(()),
            (AnswerMode::Closed(_), ExemplarShape::Counting) => Err(PromptError::ShapeMismatch(
                "closed question given counting exemplars".into(),
            )),
            (AnswerMode::OpenNumeric, ExemplarShape::MultipleChoice) => Err(
                PromptError::ShapeMismatch("counting question given multiple-choice exemplars".into()),
            ),
        }
    }

    /// Stage-1 prompt: role and question, one block per exemplar followed by
    /// its image, the query instruction, the input image, and optionally the
    /// chain-of-thought trigger.
    ///
    /// With no exemplars the example-introduction sentence is dropped and the
    /// zero-shot trigger wording is used.
    pub fn build_reasoning_prompt(
        &self,
        spec: &QuestionSpec,
        exemplars: &ExemplarSet,
        input_image: &str,
        cot: bool,
    ) -> Result<PromptBundle, PromptError> {
        Self::check_shape(spec, exemplars)?;
        let t = &self.templates;
        let q = spec.canonical_text.as_str();
        let with_examples = !exemplars.entries.is_empty();

        let question_line = match &spec.answer_mode {
            AnswerMode::Closed(choices) => {
                if choices.is_empty() {
                    return Err(PromptError::ShapeMismatch("closed answer list is empty".into()));
                }
                let candidates = self.candidates(choices);
                fill(&t.question_closed, &[("question", q), ("candidates", &candidates)])
            }
            AnswerMode::OpenNumeric => fill(&t.question_open, &[("question", q)]),
        };
        let mut preamble = vec![fill(&t.role, &[("disaster", spec.disaster())]), question_line];
        if with_examples {
            preamble.push(t.exemplar_intro.clone());
        }

        let mut segments = vec![Segment::text(preamble.join(" "))];
        for e in &exemplars.entries {
            segments.push(Segment::text(fill(&t.exemplar, &[("answer", &e.answer_text)])));
            segments.push(Segment::image(&e.image_ref));
        }
        segments.push(Segment::text(fill(&t.query, &[("question", q)])));
        segments.push(Segment::image(input_image));
        if cot {
            let trigger = if with_examples { &t.cot_icl } else { &t.cot_zero_shot };
            segments.push(Segment::text(trigger.clone()));
        }
        Ok(PromptBundle::new(Stage::Reasoning, segments, cot))
    }

    /// Stage-2 prompt carrying the full stage-1 output.
    pub fn build_selection_prompt(
        &self,
        spec: &QuestionSpec,
        stage1_text: &str,
    ) -> Result<PromptBundle, PromptError> {
        if stage1_text.trim().is_empty() {
            return Err(PromptError::EmptyReasoning);
        }
        let t = &self.templates;
        let q = spec.canonical_text.as_str();
        let text = match &spec.answer_mode {
            AnswerMode::Closed(choices) => {
                if choices.is_empty() {
                    return Err(PromptError::ShapeMismatch("closed answer list is empty".into()));
                }
                let candidates = self.candidates(choices);
                fill(
                    &t.selection_closed,
                    &[("question", q), ("answer", stage1_text), ("candidates", &candidates)],
                )
            }
            AnswerMode::OpenNumeric => {
                fill(&t.selection_numeric, &[("question", q), ("answer", stage1_text)])
            }
        };
        Ok(PromptBundle::new(Stage::Selection, vec![Segment::text(text)], false))
    }
}
