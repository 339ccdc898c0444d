//! Benchmark items and how each one is scored.

use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, MetricKind, NormalizationRule};
use crate::tokenize::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Qa,
    Mc,
    Summ,
    Dialogue,
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskType::Qa => "qa",
            TaskType::Mc => "mc",
            TaskType::Summ => "summ",
            TaskType::Dialogue => "dialogue",
        })
    }
}

impl TaskType {
    pub fn allows(self, metric: MetricKind) -> bool {
        use MetricKind::*;
        match self {
            TaskType::Qa => matches!(metric, F1 | Em | RougeGeo | RougeLsum),
            TaskType::Mc => matches!(metric, Mc | Em),
            TaskType::Summ => matches!(metric, RougeLsum | RougeGeo),
            TaskType::Dialogue => matches!(metric, Em | F1),
        }
    }
}

/// One benchmark item, as stored one-per-line in task JSONL files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub id: String,
    /// Grouping key for result rows.
    #[serde(default = "default_dataset")]
    pub dataset: String,
    pub document: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default)]
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_choice: Option<usize>,
    pub task_type: TaskType,
    pub metric: MetricKind,
}

fn default_dataset() -> String {
    "default".to_string()
}

impl EvalTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Data(format!("task {:?}: {msg}", self.id)));
        if !self.task_type.allows(self.metric) {
            return bad(format!(
                "metric {} is not valid for task type {}",
                self.metric, self.task_type
            ));
        }
        if self.task_type != TaskType::Summ && self.question.as_deref().is_none_or(str::is_empty) {
            return bad("question is required".into());
        }
        if self.task_type == TaskType::Mc {
            let Some(choices) = &self.choices else {
                return bad("multiple-choice task without choices".into());
            };
            match self.correct_choice {
                Some(c) if c < choices.len() => {}
                _ => return bad("correct_choice missing or out of range".into()),
            }
        } else if self.answers.is_empty() {
            return bad("at least one answer is required".into());
        }
        Ok(())
    }

    /// Gold strings; multiple-choice items fall back to the correct choice text.
    pub fn golds(&self) -> Vec<String> {
        if !self.answers.is_empty() {
            return self.answers.clone();
        }
        match (&self.choices, self.correct_choice) {
            (Some(ch), Some(c)) if c < ch.len() => vec![ch[c].clone()],
            _ => Vec::new(),
        }
    }

    /// Score in `[0, 1]` for one model output.
    pub fn score(&self, prediction: &str, tokenizer: &Tokenizer) -> Result<f64> {
        let rule = NormalizationRule::default();
        let golds = self.golds();
        let best = |f: &dyn Fn(&str) -> f64| golds.iter().map(|g| f(g)).fold(0.0, f64::max);
        match self.metric {
            MetricKind::F1 => metrics::token_f1(prediction, &golds, &rule, tokenizer),
            MetricKind::Em => metrics::exact_match(prediction, &golds, &rule),
            MetricKind::RougeLsum => Ok(best(&|g| metrics::rouge_l_sum(prediction, g).score)),
            MetricKind::RougeGeo => Ok(best(&|g| metrics::rouge_geo_mean(prediction, g))),
            MetricKind::Mc => {
                let choices = self
                    .choices
                    .as_deref()
                    .ok_or_else(|| Error::Data(format!("task {:?} has no choices", self.id)))?;
                let correct = self.correct_choice.ok_or_else(|| {
                    Error::Data(format!("task {:?} has no correct choice", self.id))
                })?;
                metrics::mc_accuracy(prediction, correct, choices)
            }
        }
    }
}

/// Reads and validates a task JSONL file.
pub fn read_tasks(path: &Path) -> Result<Vec<EvalTask>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tasks = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let task: EvalTask = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        task.validate()?;
        tasks.push(task);
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qa() -> EvalTask {
        EvalTask {
            id: "q1".into(),
            dataset: "toy".into(),
            document: "Paris is the capital of France.".into(),
            question: Some("What is the capital of France?".into()),
            answers: vec!["Paris".into()],
            choices: None,
            correct_choice: None,
            task_type: TaskType::Qa,
            metric: MetricKind::F1,
        }
    }

    #[test]
    fn validation_rules() {
        assert!(qa().validate().is_ok());
        let mut t = qa();
        t.metric = MetricKind::Mc;
        assert!(t.validate().is_err());
        let mut t = qa();
        t.question = None;
        assert!(t.validate().is_err());
        let mut t = qa();
        t.task_type = TaskType::Mc;
        t.metric = MetricKind::Mc;
        t.choices = Some(vec!["Paris".into(), "Rome".into()]);
        t.correct_choice = Some(2);
        assert!(t.validate().is_err());
        t.correct_choice = Some(0);
        t.answers.clear();
        assert!(t.validate().is_ok());
        assert_eq!(t.golds(), ["Paris"]);
    }

    #[test]
    fn unknown_task_type_fails_to_parse() {
        let line = r#"{"id":"x","document":"d","question":"q","answers":["a"],"task_type":"poetry","metric":"f1"}"#;
        assert!(serde_json::from_str::<EvalTask>(line).is_err());
        let ok = line.replace("poetry", "qa");
        let t: EvalTask = serde_json::from_str(&ok).unwrap();
        assert_eq!(t.dataset, "default");
    }

    #[test]
    fn scoring_dispatch() {
        let tok = Tokenizer::default_rule();
        assert_eq!(qa().score("Paris", &tok).unwrap(), 1.0);
        let mut summ = qa();
        summ.task_type = TaskType::Summ;
        summ.metric = MetricKind::RougeLsum;
        summ.answers = vec!["A short summary.".into()];
        assert_eq!(summ.score("A short summary.", &tok).unwrap(), 1.0);
    }
}
