//! Question categories, canonical question registries and dataset loading.
//!
//! Question typing is an exact lookup: incoming text is normalized and
//! matched against the canonical strings of a registry file. Each dataset
//! ships its registry as editable JSON under `data/`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum TaxonomyError {
    #[error("unknown question: {0:?}")]
    UnknownQuestion(String),
    #[error("line {line}: unknown question: {text:?}")]
    UnknownQuestionAt { line: usize, text: String },
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid registry: {0}")]
    InvalidRegistry(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    FloodNet,
    RescueNet,
}

impl Dataset {
    /// Disaster kind named in the reasoning prompt's role preamble.
    pub fn disaster(self) -> &'static str {
        match self {
            Dataset::FloodNet => "flood",
            Dataset::RescueNet => "hurricane",
        }
    }
}

/// Question category. Declaration order is the row order used in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    BuildingCondition,
    DensityEstimation,
    EntireImageCondition,
    RiskAssessment,
    RoadCondition,
    ComplexCounting,
    SimpleCounting,
    AreaBased,
    LevelOfDamage,
    Positional,
    ChangeDetection,
}

impl Category {
    pub const ALL: [Category; 11] = [
        Category::BuildingCondition,
        Category::DensityEstimation,
        Category::EntireImageCondition,
        Category::RiskAssessment,
        Category::RoadCondition,
        Category::ComplexCounting,
        Category::SimpleCounting,
        Category::AreaBased,
        Category::LevelOfDamage,
        Category::Positional,
        Category::ChangeDetection,
    ];

    pub fn is_counting(self) -> bool {
        matches!(self, Category::SimpleCounting | Category::ComplexCounting)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::BuildingCondition => "building_condition",
            Category::DensityEstimation => "density_estimation",
            Category::EntireImageCondition => "entire_image_condition",
            Category::RiskAssessment => "risk_assessment",
            Category::RoadCondition => "road_condition",
            Category::ComplexCounting => "complex_counting",
            Category::SimpleCounting => "simple_counting",
            Category::AreaBased => "area_based",
            Category::LevelOfDamage => "level_of_damage",
            Category::Positional => "positional",
            Category::ChangeDetection => "change_detection",
        }
    }

    /// Row label used in human-readable report tables.
    pub fn label(self) -> &'static str {
        match self {
            Category::BuildingCondition => "Building Condition Recognition",
            Category::DensityEstimation => "Density Estimation",
            Category::EntireImageCondition => "Entire Image Condition Recognition",
            Category::RiskAssessment => "Risk Assessment",
            Category::RoadCondition => "Road Condition Recognition",
            Category::ComplexCounting => "Complex Counting",
            Category::SimpleCounting => "Simple Counting",
            Category::AreaBased => "Area based",
            Category::LevelOfDamage => "Level of damage",
            Category::Positional => "Positional",
            Category::ChangeDetection => "Change Detection",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    Closed(Vec<String>),
    OpenNumeric,
}

impl AnswerMode {
    pub fn choices(&self) -> Option<&[String]> {
        match self {
            AnswerMode::Closed(c) => Some(c),
            AnswerMode::OpenNumeric => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub question_id: String,
    pub canonical_text: String,
    pub dataset: Dataset,
    pub category: Category,
    pub answer_mode: AnswerMode,
    /// Overrides the dataset's disaster wording in the role preamble.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disaster: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl QuestionSpec {
    pub fn disaster(&self) -> &str {
        self.disaster
            .as_deref()
            .unwrap_or_else(|| self.dataset.disaster())
    }

    pub fn is_closed(&self) -> bool {
        matches!(self.answer_mode, AnswerMode::Closed(_))
    }
}

/// Answer space of a question, in registry declaration order.
pub fn answer_space(spec: &QuestionSpec) -> &AnswerMode {
    &spec.answer_mode
}

/// Lowercase, trim, collapse internal whitespace, strip terminal punctuation.
pub fn normalize_question(text: &str) -> String {
    let collapsed = text
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

fn is_wrapper(c: char) -> bool {
    c.is_whitespace()
        || c.is_ascii_punctuation()
        || matches!(c, '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{00AB}' | '\u{00BB}')
}

/// Lowercase, trim, collapse whitespace and strip surrounding punctuation
/// and quote characters.
pub fn normalize_answer(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
        .trim_matches(is_wrapper)
        .to_string()
}

/// A loaded, validated question registry for one dataset.
#[derive(Debug, Clone)]
pub struct Registry {
    entries: Vec<QuestionSpec>,
    by_text: HashMap<String, usize>,
    hash: String,
}

const FLOODNET_REGISTRY: &str = include_str!("../data/floodnet.json");
const RESCUENET_REGISTRY: &str = include_str!("../data/rescuenet.json");

impl Registry {
    pub fn from_json(text: &str) -> Result<Self, TaxonomyError> {
        let entries: Vec<QuestionSpec> =
            serde_json::from_str(text).map_err(|e| TaxonomyError::InvalidRegistry(e.to_string()))?;
        Self::new(entries)
    }

    pub fn new(entries: Vec<QuestionSpec>) -> Result<Self, TaxonomyError> {
        let invalid = |m: String| Err(TaxonomyError::InvalidRegistry(m));
        let mut by_text = HashMap::new();
        let mut ids = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !ids.insert(e.question_id.as_str()) {
                return invalid(format!("duplicate question_id `{}`", e.question_id));
            }
            let key = normalize_question(&e.canonical_text);
            if key.is_empty() {
                return invalid(format!("`{}` has empty canonical text", e.question_id));
            }
            if by_text.insert(key, i).is_some() {
                return invalid(format!(
                    "`{}` duplicates another entry's canonical text",
                    e.question_id
                ));
            }
            match (&e.answer_mode, e.category.is_counting()) {
                (AnswerMode::OpenNumeric, true) => {}
                (AnswerMode::Closed(choices), false) => {
                    if choices.is_empty() {
                        return invalid(format!("`{}` has an empty answer list", e.question_id));
                    }
                    let mut seen = HashSet::new();
                    for c in choices {
                        let n = normalize_answer(c);
                        if n.is_empty() || !seen.insert(n) {
                            return invalid(format!(
                                "`{}` answer {c:?} is empty or collides after normalization",
                                e.question_id
                            ));
                        }
                    }
                }
                (_, true) => {
                    return invalid(format!("counting question `{}` must be open_numeric", e.question_id))
                }
                (_, false) => {
                    return invalid(format!("`{}` must have a closed answer list", e.question_id))
                }
            }
        }
        let canonical = serde_json::to_vec(&entries).expect("registry serializes");
        let hash = hex::encode(Sha256::digest(&canonical));
        Ok(Self {
            entries,
            by_text,
            hash,
        })
    }

    pub fn builtin(dataset: Dataset) -> Self {
        let text = match dataset {
            Dataset::FloodNet => FLOODNET_REGISTRY,
            Dataset::RescueNet => RESCUENET_REGISTRY,
        };
        Self::from_json(text).expect("shipped registry is valid")
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        let text = fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn entries(&self) -> &[QuestionSpec] {
        &self.entries
    }

    /// Hash of the canonical serialization of all entries.
    pub fn content_hash(&self) -> &str {
        &self.hash
    }

    pub fn classify(&self, question_text: &str) -> Result<&QuestionSpec, TaxonomyError> {
        self.by_text
            .get(&normalize_question(question_text))
            .map(|&i| &self.entries[i])
            .ok_or_else(|| TaxonomyError::UnknownQuestion(question_text.to_string()))
    }

    pub fn get(&self, question_id: &str) -> Option<&QuestionSpec> {
        self.entries.iter().find(|e| e.question_id == question_id)
    }
}

/// One evaluation question about one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub item_id: String,
    #[serde(rename = "image")]
    pub image_ref: String,
    #[serde(rename = "question")]
    pub question_text: String,
    #[serde(rename = "answer")]
    pub ground_truth: String,
}

/// Parses a JSON-lines dataset, classifying every question.
///
/// Blank lines are skipped; line numbers in errors are 1-based file lines.
pub fn parse_dataset(text: &str, registry: &Registry) -> Result<Vec<EvalItem>, TaxonomyError> {
    let mut items = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let item: EvalItem = serde_json::from_str(line).map_err(|e| TaxonomyError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if registry.classify(&item.question_text).is_err() {
            return Err(TaxonomyError::UnknownQuestionAt {
                line: line_no,
                text: item.question_text,
            });
        }
        items.push(item);
    }
    Ok(items)
}

pub fn load_dataset(path: &Path, registry: &Registry) -> Result<Vec<EvalItem>, TaxonomyError> {
    let text = fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text, registry)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_examples() {
        let reg = Registry::builtin(Dataset::FloodNet);
        let s = reg.classify("is the area mostly non-flooded?").unwrap();
        assert_eq!(s.category, Category::EntireImageCondition);
        assert_eq!(s.answer_mode, AnswerMode::Closed(vec!["Yes".into(), "No".into()]));

        let s = reg.classify("How many damaged buildings are in this image?").unwrap();
        assert_eq!(s.category, Category::ComplexCounting);
        assert_eq!(s.answer_mode, AnswerMode::OpenNumeric);

        assert!(matches!(
            reg.classify("what color is the sky"),
            Err(TaxonomyError::UnknownQuestion(_))
        ));
    }

    #[test]
    fn classify_normalizes_case_space_and_punctuation() {
        let reg = Registry::builtin(Dataset::FloodNet);
        let s = reg.classify("  IS the   area mostly NON-FLOODED ").unwrap();
        assert_eq!(s.question_id, "fn-entire-01");
        assert!(reg.classify("is the area mostly non-flooded?!").is_ok());
    }

    #[test]
    fn answer_spaces() {
        let reg = Registry::builtin(Dataset::FloodNet);
        let density = reg
            .entries()
            .iter()
            .find(|e| e.category == Category::DensityEstimation)
            .unwrap();
        assert_eq!(answer_space(density).choices().unwrap(), ["low", "moderate", "high"]);
        let mc = reg.classify("What is the condition of most buildings in this image?").unwrap();
        assert_eq!(
            answer_space(mc).choices().unwrap(),
            ["partially flooded", "non-flooded", "flooded"]
        );
        let simple = reg
            .entries()
            .iter()
            .find(|e| e.category == Category::SimpleCounting)
            .unwrap();
        assert_eq!(answer_space(simple), &AnswerMode::OpenNumeric);
    }

    #[test]
    fn builtin_registries_cover_categories() {
        let fn_cats: HashSet<_> = Registry::builtin(Dataset::FloodNet)
            .entries()
            .iter()
            .map(|e| e.category)
            .collect();
        assert_eq!(fn_cats.len(), 7);
        let rn = Registry::builtin(Dataset::RescueNet);
        for e in rn.entries() {
            assert_eq!(e.disaster(), "hurricane");
        }
    }

    #[test]
    fn classify_inverts_canonical_text() {
        for ds in [Dataset::FloodNet, Dataset::RescueNet] {
            let reg = Registry::builtin(ds);
            for e in reg.entries() {
                assert_eq!(reg.classify(&e.canonical_text).unwrap(), e);
            }
        }
    }

    fn spec(id: &str, text: &str, cat: Category, mode: AnswerMode) -> QuestionSpec {
        QuestionSpec {
            question_id: id.into(),
            canonical_text: text.into(),
            dataset: Dataset::FloodNet,
            category: cat,
            answer_mode: mode,
            disaster: None,
            note: None,
        }
    }

    #[test]
    fn registry_validation() {
        let closed = |v: &[&str]| AnswerMode::Closed(v.iter().map(|s| s.to_string()).collect());
        let bad = [
            vec![spec("a", "q?", Category::RiskAssessment, closed(&["Yes", "yes"]))],
            vec![spec("a", "q?", Category::RiskAssessment, closed(&[]))],
            vec![spec("a", "q?", Category::SimpleCounting, closed(&["1"]))],
            vec![spec("a", "q?", Category::RiskAssessment, AnswerMode::OpenNumeric)],
            vec![
                spec("a", "q?", Category::RiskAssessment, closed(&["Yes", "No"])),
                spec("b", "Q", Category::RiskAssessment, closed(&["Yes", "No"])),
            ],
            vec![
                spec("a", "q1", Category::RiskAssessment, closed(&["Yes", "No"])),
                spec("a", "q2", Category::RiskAssessment, closed(&["Yes", "No"])),
            ],
        ];
        for entries in bad {
            assert!(matches!(Registry::new(entries), Err(TaxonomyError::InvalidRegistry(_))));
        }
    }

    #[test]
    fn dataset_parsing() {
        let reg = Registry::builtin(Dataset::FloodNet);
        let text = concat!(
            r#"{"item_id":"1","image":"a.jpg","question":"Are there any flooded buildings?","answer":"yes"}"#,
            "\n\n",
            r#"{"item_id":"2","image":"b.jpg","question":"what color is the sky","answer":"blue"}"#,
            "\n"
        );
        match parse_dataset(text, &reg) {
            Err(TaxonomyError::UnknownQuestionAt { line, text }) => {
                assert_eq!(line, 3);
                assert_eq!(text, "what color is the sky");
            }
            other => panic!("unexpected {other:?}"),
        }
        match parse_dataset("{not json}\n", &reg) {
            Err(TaxonomyError::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn answer_normalization() {
        assert_eq!(normalize_answer("  \"Flooded.\" "), "flooded");
        assert_eq!(normalize_answer("**Non-Flooded**"), "non-flooded");
        assert_eq!(normalize_answer("\u{201C}Yes\u{201D}"), "yes");
        assert_eq!(normalize_answer("The answer is: flooded."), "the answer is: flooded");
    }
}
