use serde::{Deserialize, Serialize};

use super::Exemplar;

/// Few-shot prompt layout.
///
/// A demonstration renders as
/// `{input_prefix}{input}\n{answer_prefix}{answer_separator}{answer}` and
/// demonstrations are joined by `example_separator`. The query renders the
/// same way with the answer left open.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    /// Printed once before the demonstrations, followed by a blank line.
    pub instruction: Option<String>,
    pub input_prefix: String,
    pub answer_prefix: String,
    pub answer_separator: String,
    pub example_separator: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::sst2()
    }
}

impl PromptTemplate {
    fn classification(input_prefix: &str, answer_prefix: &str) -> Self {
        Self {
            instruction: None,
            input_prefix: input_prefix.into(),
            answer_prefix: answer_prefix.into(),
            answer_separator: " ".into(),
            example_separator: "\n\n".into(),
        }
    }

    pub fn sst2() -> Self {
        Self::classification("Review: ", "Sentiment:")
    }

    pub fn amazon() -> Self {
        Self::classification("", "Sentiment")
    }

    pub fn agnews() -> Self {
        Self::classification("Article: ", "Answer:")
    }

    pub fn trec() -> Self {
        Self {
            instruction: Some(
                "Classify the questions based on whether their answer type is a Number, Location, Person, \
                 Description, Entity, or Abbreviation."
                    .into(),
            ),
            ..Self::classification("Question: ", "Answer Type:")
        }
    }

    pub fn dialogue_summary() -> Self {
        Self {
            instruction: None,
            input_prefix: "Dialogue:\n".into(),
            answer_prefix: "Summarize the above dialogue:".into(),
            answer_separator: "\n".into(),
            example_separator: "\n\n".into(),
        }
    }

    /// Preset by dataset name (`sst2`, `amazon`, `agnews`, `trec`, `samsum`).
    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "sst2" => Some(Self::sst2()),
            "amazon" => Some(Self::amazon()),
            "agnews" => Some(Self::agnews()),
            "trec" => Some(Self::trec()),
            "samsum" | "dialogue" => Some(Self::dialogue_summary()),
            _ => None,
        }
    }

    /// Default label set of a preset.
    pub fn preset_labels(name: &str) -> Option<Vec<String>> {
        let labels: &[&str] = match name.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "sst2" | "amazon" => &["Positive", "Negative"],
            "agnews" => &["World", "Sports", "Business", "Technology"],
            "trec" => &["Number", "Location", "Person", "Description", "Entity", "Abbreviation"],
            _ => return None,
        };
        Some(labels.iter().map(|s| s.to_string()).collect())
    }

    fn head(&self) -> String {
        self.instruction.as_ref().map(|i| format!("{i}\n\n")).unwrap_or_default()
    }

    fn open_query(&self, query: &str, answer_prefix: &str) -> String {
        // A trailing space would split the answer's first token; a newline is kept.
        let sep = self.answer_separator.trim_end_matches(' ');
        format!("{}{}\n{}{}", self.input_prefix, query, answer_prefix, sep)
    }

    pub fn render(&self, exemplars: &[Exemplar], query: &str) -> String {
        let mut out = self.head();
        for e in exemplars {
            out.push_str(&format!(
                "{}{}\n{}{}{}{}",
                self.input_prefix, e.input, self.answer_prefix, self.answer_separator, e.answer, self.example_separator
            ));
        }
        out.push_str(&self.open_query(query, &self.answer_prefix));
        out
    }

    /// Zero-shot prompt whose answer line carries released keywords.
    pub fn render_with_keywords(&self, query: &str, instruction: &str, keywords: &[String]) -> String {
        let line = format!("{instruction} {}", keywords.join(", "));
        format!("{}{}", self.head(), self.open_query(query, &line))
    }
}

/// Answer-line replacements used when re-prompting with released keywords.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeywordPrompts {
    pub template: PromptTemplate,
    /// Used for an unordered keyword set.
    pub set_instruction: String,
    /// Used when keywords come in frequency order.
    pub ranked_instruction: String,
}

impl Default for KeywordPrompts {
    fn default() -> Self {
        Self {
            template: PromptTemplate::dialogue_summary(),
            set_instruction: "Summarize the above dialogue with the following word suggestions:".into(),
            ranked_instruction: "Summarize the above dialogue with the following word suggestions ranked by their \
                                 frequency from high to low:"
                .into(),
        }
    }
}
