//! Final answer assignment from the stage-1 reasoning.
//!
//! Closed questions go through a second model call that picks one candidate,
//! and the reply is then mapped onto the answer space with a strict ladder:
//! exact match, then unique whole-word containment, else `Unresolved`.
//! Counting questions go through a numeric variant of the same call and the
//! integer is parsed from the reply.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::gateway::{DecodeParams, Gateway, GatewayError, ModelExchange};
use crate::prompter::{PromptError, Prompter};
use crate::taxonomy::{normalize_answer, AnswerMode, QuestionSpec};

/// Full stage-1 output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub raw: String,
    /// Last non-empty line of `raw`; informational only.
    pub stage1_answer_guess: Option<String>,
}

impl ReasoningTrace {
    pub fn new(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let stage1_answer_guess = raw
            .lines()
            .rev()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .map(str::to_string);
        Self {
            raw,
            stage1_answer_guess,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum VerdictValue {
    Choice(String),
    Count(u64),
    Unresolved,
}

impl fmt::Display for VerdictValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerdictValue::Choice(c) => write!(f, "Choice({c})"),
            VerdictValue::Count(n) => write!(f, "Count({n})"),
            VerdictValue::Unresolved => f.write_str("Unresolved"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStage {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    Exact,
    Substring,
    Numeric,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalVerdict {
    pub value: VerdictValue,
    pub stage: VerdictStage,
    pub match_rule: MatchRule,
    pub diagnostics: Vec<String>,
}

impl FinalVerdict {
    pub fn unresolved(stage: VerdictStage, diagnostic: impl Into<String>) -> Self {
        Self {
            value: VerdictValue::Unresolved,
            stage,
            match_rule: MatchRule::Failed,
            diagnostics: vec![diagnostic.into()],
        }
    }

    pub fn is_resolved(&self) -> bool {
        self.value != VerdictValue::Unresolved
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AssignError {
    #[error("{source}")]
    Gateway {
        #[source]
        source: GatewayError,
        trace: ReasoningTrace,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("question `{0}` has the wrong answer mode for this operation")]
    WrongMode(String),
}

/// Finds `needle` in `hay` with non-alphanumeric characters (or the ends of
/// the string) on both sides.
fn contains_word(hay: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let mut from = 0;
    while let Some(pos) = hay[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before_ok = hay[..start].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
        let after_ok = hay[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            return true;
        }
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    false
}

/// Maps a free-text reply onto a closed answer space.
///
/// Returns the index of the matched candidate and the rule that fired.
/// Containment only fires when it singles out one candidate: if the reply
/// contains a candidate that is itself part of another candidate's text
/// (`flooded` inside `non-flooded`), the match is ambiguous.
pub fn match_choice(reply: &str, space: &[String]) -> Option<(usize, MatchRule)> {
    let n = normalize_answer(reply);
    if n.is_empty() {
        return None;
    }
    let cands: Vec<String> = space.iter().map(|c| normalize_answer(c)).collect();
    if let Some(i) = cands.iter().position(|c| *c == n) {
        return Some((i, MatchRule::Exact));
    }

    let contained: Vec<usize> = (0..cands.len())
        .filter(|&i| contains_word(&n, &cands[i]))
        .collect();
    let ambiguous = contained.iter().any(|&i| {
        cands
            .iter()
            .enumerate()
            .any(|(j, other)| j != i && other.contains(cands[i].as_str()))
    });
    if ambiguous {
        return None;
    }
    let mut hits = contained;
    for (i, c) in cands.iter().enumerate() {
        if contains_word(c, &n) && !hits.contains(&i) {
            hits.push(i);
        }
    }
    match hits.as_slice() {
        [i] => Some((*i, MatchRule::Substring)),
        _ => None,
    }
}

fn verdict_from_reply(reply: &str, space: &[String], stage: VerdictStage) -> FinalVerdict {
    match match_choice(reply, space) {
        Some((i, rule)) => FinalVerdict {
            value: VerdictValue::Choice(space[i].clone()),
            stage,
            match_rule: rule,
            diagnostics: Vec::new(),
        },
        None => FinalVerdict::unresolved(stage, format!("reply matched no unique candidate: {reply:?}")),
    }
}

const NUMBER_WORDS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
    "nineteen", "twenty",
];

pub fn number_word(word: &str) -> Option<u64> {
    let w = word.to_lowercase();
    NUMBER_WORDS.iter().position(|&n| n == w).map(|i| i as u64)
}

/// The last integer literal in `text`; failing that, the last English number
/// word from zero to twenty.
pub fn parse_count(text: &str) -> Option<u64> {
    let literal = text
        .split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .filter_map(|s| s.parse::<u64>().ok())
        .next_back();
    literal.or_else(|| {
        text.split(|c: char| !c.is_alphabetic())
            .filter_map(number_word)
            .next_back()
    })
}

fn count_verdict(text: &str, stage: VerdictStage) -> FinalVerdict {
    match parse_count(text) {
        Some(n) => FinalVerdict {
            value: VerdictValue::Count(n),
            stage,
            match_rule: MatchRule::Numeric,
            diagnostics: Vec::new(),
        },
        None => FinalVerdict::unresolved(stage, format!("no count found in reply: {text:?}")),
    }
}

fn call(
    gateway: &Gateway,
    bundle: &crate::prompter::PromptBundle,
    params: &DecodeParams,
    trace: &ReasoningTrace,
) -> Result<ModelExchange, AssignError> {
    gateway
        .complete(bundle, params)
        .map_err(|source| AssignError::Gateway {
            source,
            trace: trace.clone(),
        })
}

/// Second model call for a closed question, constrained to its answer space.
pub fn assign_choice(
    trace: &ReasoningTrace,
    spec: &QuestionSpec,
    prompter: &Prompter,
    gateway: &Gateway,
    params: &DecodeParams,
) -> Result<(FinalVerdict, ModelExchange), AssignError> {
    let AnswerMode::Closed(space) = &spec.answer_mode else {
        return Err(AssignError::WrongMode(spec.question_id.clone()));
    };
    let bundle = prompter.build_selection_prompt(spec, &trace.raw)?;
    let exchange = call(gateway, &bundle, params, trace)?;
    let verdict = verdict_from_reply(&exchange.response_text, space, VerdictStage::Two);
    Ok((verdict, exchange))
}

/// Second model call for a counting question; the count is parsed from the
/// reply.
pub fn assign_count(
    trace: &ReasoningTrace,
    spec: &QuestionSpec,
    prompter: &Prompter,
    gateway: &Gateway,
    params: &DecodeParams,
) -> Result<(FinalVerdict, ModelExchange), AssignError> {
    if spec.is_closed() {
        return Err(AssignError::WrongMode(spec.question_id.clone()));
    }
    let bundle = prompter.build_selection_prompt(spec, &trace.raw)?;
    let exchange = call(gateway, &bundle, params, trace)?;
    let verdict = count_verdict(&exchange.response_text, VerdictStage::Two);
    Ok((verdict, exchange))
}

/// Verdict taken straight from the stage-1 output, without a second call.
pub fn bypass_selection(trace: &ReasoningTrace, spec: &QuestionSpec) -> FinalVerdict {
    match &spec.answer_mode {
        AnswerMode::Closed(space) => match &trace.stage1_answer_guess {
            Some(last) => verdict_from_reply(last, space, VerdictStage::One),
            None => FinalVerdict::unresolved(VerdictStage::One, "stage-1 output is empty"),
        },
        AnswerMode::OpenNumeric => count_verdict(&trace.raw, VerdictStage::One),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{RateLimits, RetryPolicy, Script, ScriptRule, ScriptedBackend};
    use crate::prompter::Stage;
    use crate::taxonomy::{Dataset, Registry};
    use std::sync::Arc;

    fn space(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn gateway_replying(reply: &str) -> Gateway {
        let backend = ScriptedBackend::new(Script {
            name: None,
            rules: vec![ScriptRule {
                fingerprint: None,
                stage: Some(Stage::Selection),
                contains: None,
                response: reply.into(),
            }],
        })
        .unwrap();
        Gateway::new(Arc::new(backend), RetryPolicy::default(), RateLimits::default())
    }

    #[test]
    fn ladder_examples() {
        let yn = space(&["Yes", "No"]);
        assert_eq!(match_choice("Yes", &yn), Some((0, MatchRule::Exact)));
        assert_eq!(match_choice("  \"no.\" ", &yn), Some((1, MatchRule::Exact)));
        assert_eq!(match_choice("Answer: No", &yn), Some((1, MatchRule::Substring)));
        assert_eq!(match_choice("Yes, the area is mostly non-flooded", &yn), Some((0, MatchRule::Substring)));
        assert_eq!(match_choice("yes or no", &yn), None);
        assert_eq!(match_choice("", &yn), None);

        let fl = space(&["partially flooded", "non-flooded", "flooded"]);
        assert_eq!(match_choice("The answer is: flooded.", &fl), None);
        assert_eq!(match_choice("non-flooded", &fl), Some((1, MatchRule::Exact)));
        assert_eq!(match_choice("Flooded", &fl), Some((2, MatchRule::Exact)));
        assert_eq!(match_choice("partially", &fl), Some((0, MatchRule::Substring)));

        let dens = space(&["low", "moderate", "high"]);
        assert_eq!(match_choice("The density is moderate.", &dens), Some((1, MatchRule::Substring)));
        assert_eq!(match_choice("slower", &dens), None);
    }

    /// Independent check of the "flooded" example: enumerate which
    /// candidates appear in the normalized reply and which candidates are
    /// substrings of others.
    #[test]
    fn flooded_family_is_ambiguous_by_enumeration() {
        let fl = ["partially flooded", "non-flooded", "flooded"];
        let reply = "the answer is: flooded";
        let present: Vec<_> = fl.iter().filter(|c| reply.contains(*c)).collect();
        assert_eq!(present, [&"flooded"]);
        let inside_others = fl.iter().filter(|c| c.contains("flooded")).count();
        assert_eq!(inside_others, 3);
        assert_eq!(match_choice("The answer is: flooded.", &space(&fl)), None);
    }

    #[test]
    fn number_word_table() {
        for (i, w) in NUMBER_WORDS.iter().enumerate() {
            assert_eq!(number_word(w), Some(i as u64));
            assert_eq!(number_word(&w.to_uppercase()), Some(i as u64));
        }
        assert_eq!(number_word("twentyone"), None);
        assert_eq!(number_word("many"), None);
    }

    #[test]
    fn parse_count_examples() {
        assert_eq!(parse_count("I count 3, then 2 more: 5 total"), Some(5));
        assert_eq!(parse_count("no buildings are visible, so zero"), Some(0));
        assert_eq!(parse_count("many buildings"), None);
        assert_eq!(parse_count("There are six buildings."), Some(6));
        assert_eq!(parse_count("someone saw seventeen, then one"), Some(1));
        assert_eq!(parse_count("99999999999999999999999 or 4"), Some(4));
    }

    #[test]
    fn trace_guess_is_last_nonempty_line() {
        let t = ReasoningTrace::new("step one\nAnswer: No\n\n  ");
        assert_eq!(t.stage1_answer_guess.as_deref(), Some("Answer: No"));
        assert_eq!(t.raw, "step one\nAnswer: No\n\n  ");
        assert_eq!(ReasoningTrace::new(" \n").stage1_answer_guess, None);
    }

    #[test]
    fn assign_choice_examples() {
        let reg = Registry::builtin(Dataset::FloodNet);
        let p = Prompter::default();
        let yn = reg.classify("is the area mostly non-flooded?").unwrap();
        let trace = ReasoningTrace::new("The image shows dry land.\nAnswer: Yes");
        let (v, ex) = assign_choice(&trace, yn, &p, &gateway_replying("Yes"), &DecodeParams::default()).unwrap();
        assert_eq!(v.value, VerdictValue::Choice("Yes".into()));
        assert_eq!((v.stage, v.match_rule), (VerdictStage::Two, MatchRule::Exact));
        let sent = ex.request.render_text();
        assert!(sent.contains(&trace.raw));
        assert!(sent.contains("<[Yes, No]>"));

        let mc = reg.classify("What is the condition of most buildings in this image?").unwrap();
        let (v, _) = assign_choice(&trace, mc, &p, &gateway_replying("The answer is: flooded."), &DecodeParams::default()).unwrap();
        assert_eq!(v.value, VerdictValue::Unresolved);
        assert_eq!(v.match_rule, MatchRule::Failed);
        assert!(v.diagnostics[0].contains("The answer is: flooded."));
        let (v, _) = assign_choice(&trace, mc, &p, &gateway_replying("non-flooded"), &DecodeParams::default()).unwrap();
        assert_eq!(v.value, VerdictValue::Choice("non-flooded".into()));
    }

    #[test]
    fn assign_count_examples() {
        let reg = Registry::builtin(Dataset::FloodNet);
        let p = Prompter::default();
        let spec = reg.classify("How many damaged buildings are in this image?").unwrap();
        let trace = ReasoningTrace::new("I see buildings 1 through 6.\nFinal answer: 8");
        for (reply, want) in [
            ("6", VerdictValue::Count(6)),
            ("There are six buildings.", VerdictValue::Count(6)),
            ("I cannot tell.", VerdictValue::Unresolved),
        ] {
            let (v, _) = assign_count(&trace, spec, &p, &gateway_replying(reply), &DecodeParams::default()).unwrap();
            assert_eq!(v.value, want, "reply {reply:?}");
            assert_eq!(v.stage, VerdictStage::Two);
        }
        assert!(matches!(
            assign_choice(&trace, spec, &p, &gateway_replying("6"), &DecodeParams::default()),
            Err(AssignError::WrongMode(_))
        ));
    }

    #[test]
    fn gateway_errors_carry_the_trace() {
        let reg = Registry::builtin(Dataset::FloodNet);
        let spec = reg.classify("is the area mostly non-flooded?").unwrap();
        let backend = ScriptedBackend::new(Script {
            name: None,
            rules: vec![ScriptRule {
                fingerprint: Some("nothing".into()),
                stage: None,
                contains: None,
                response: "x".into(),
            }],
        })
        .unwrap();
        let gw = Gateway::new(Arc::new(backend), RetryPolicy::default(), RateLimits::default());
        let trace = ReasoningTrace::new("reasoning");
        match assign_choice(&trace, spec, &Prompter::default(), &gw, &DecodeParams::default()) {
            Err(AssignError::Gateway { source: GatewayError::NoScript { .. }, trace: t }) => {
                assert_eq!(t, trace)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bypass_examples() {
        let reg = Registry::builtin(Dataset::FloodNet);
        let yn = reg.classify("is the area mostly non-flooded?").unwrap();
        let v = bypass_selection(&ReasoningTrace::new("Looking at water...\nAnswer: No"), yn);
        assert_eq!(v.value, VerdictValue::Choice("No".into()));
        assert_eq!(v.stage, VerdictStage::One);
        let v = bypass_selection(&ReasoningTrace::new("The scene is hard to judge."), yn);
        assert_eq!(v.value, VerdictValue::Unresolved);

        let count = reg.classify("How many damaged buildings are in this image?").unwrap();
        let v = bypass_selection(&ReasoningTrace::new("Buildings 1..6 visible.\nFinal answer: 8"), count);
        assert_eq!(v.value, VerdictValue::Count(8));
        assert_eq!(v.stage, VerdictStage::One);
    }
}
