//! Rubric judge reports: one strict JSON object per sample with seven
//! integer axis scores in 1..=5, a free-text analysis, and one-word theme and
//! emotion labels for the video and the audio.

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const AXES: [&str; 7] = [
    "rhythmic_sync",
    "theme_coherence",
    "emotion_alignment",
    "cultural_relevance",
    "temporal_dynamics",
    "instrumentation_fit",
    "overall_alignment",
];

const LABELS: [&str; 4] = ["video_theme", "audio_theme", "video_emotion", "audio_emotion"];
const ANALYSIS: &str = "global_analysis";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct JudgeReport {
    pub global_analysis: String,
    /// Scores in [`AXES`] order.
    pub scores: [u8; 7],
    pub video_theme: String,
    pub audio_theme: String,
    pub video_emotion: String,
    pub audio_emotion: String,
}

impl JudgeReport {
    pub fn score(&self, axis: &str) -> Option<u8> {
        AXES.iter().position(|a| *a == axis).map(|i| self.scores[i])
    }
}

/// Validates one judge response; every problem is reported with its field.
pub fn parse_judge(text: &str) -> Result<JudgeReport> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Validation(vec![format!("json: {e}")]))?;
    let Value::Object(obj) = value else {
        return Err(Error::Validation(vec!["json: top level must be an object".into()]));
    };
    let mut errors = Vec::new();
    for key in obj.keys() {
        if !AXES.contains(&key.as_str()) && !LABELS.contains(&key.as_str()) && key != ANALYSIS {
            errors.push(format!("{key}: unknown field"));
        }
    }
    let mut scores = [0u8; 7];
    for (i, axis) in AXES.iter().enumerate() {
        match obj.get(*axis) {
            None => errors.push(format!("{axis}: missing")),
            Some(v) => match v.as_i64().filter(|_| v.is_i64() || v.is_u64()) {
                Some(s @ 1..=5) => scores[i] = s as u8,
                Some(s) => errors.push(format!("{axis}: score {s} outside 1..=5")),
                None => errors.push(format!("{axis}: score must be an integer, got {v}")),
            },
        }
    }
    let analysis = string_field(&obj, ANALYSIS, false, &mut errors);
    let labels: Vec<String> = LABELS.iter().map(|f| string_field(&obj, f, true, &mut errors)).collect();
    if !errors.is_empty() {
        return Err(Error::Validation(errors));
    }
    let [video_theme, audio_theme, video_emotion, audio_emotion]: [String; 4] =
        labels.try_into().expect("four labels");
    Ok(JudgeReport {
        global_analysis: analysis,
        scores,
        video_theme,
        audio_theme,
        video_emotion,
        audio_emotion,
    })
}

fn string_field(obj: &Map<String, Value>, field: &str, one_word: bool, errors: &mut Vec<String>) -> String {
    match obj.get(field) {
        None => {
            errors.push(format!("{field}: missing"));
            String::new()
        }
        Some(Value::String(s)) => {
            if s.trim().is_empty() {
                errors.push(format!("{field}: empty"));
            } else if one_word && s.split_whitespace().count() != 1 {
                errors.push(format!("{field}: must be a single word, got {s:?}"));
            }
            s.clone()
        }
        Some(other) => {
            errors.push(format!("{field}: must be a string, got {other}"));
            String::new()
        }
    }
}

/// Per-axis arithmetic means.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgeMeans {
    pub means: [f64; 7],
    pub count: usize,
}

impl JudgeMeans {
    pub fn mean(&self, axis: &str) -> Option<f64> {
        AXES.iter().position(|a| *a == axis).map(|i| self.means[i])
    }

    /// Axis name to mean, rounded to 3 decimals.
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        for (axis, v) in AXES.iter().zip(self.means) {
            m.insert(axis.to_string(), Value::from((v * 1000.0).round() / 1000.0));
        }
        m.insert("count".into(), Value::from(self.count));
        Value::Object(m)
    }
}

pub fn aggregate_judges(reports: &[JudgeReport]) -> Result<JudgeMeans> {
    if reports.is_empty() {
        return Err(Error::Data("no judge reports to aggregate".into()));
    }
    let mut means = [0.0; 7];
    for r in reports {
        for (m, s) in means.iter_mut().zip(r.scores) {
            *m += s as f64;
        }
    }
    for m in means.iter_mut() {
        *m /= reports.len() as f64;
    }
    Ok(JudgeMeans {
        means,
        count: reports.len(),
    })
}

/// A source of judge responses, e.g. a hosted multimodal model. Only
/// the validation and aggregation side lives in this crate.
pub trait JudgeClient {
    /// Raw JSON text judging one generated sample.
    fn judge(&self, sample_id: &str) -> Result<String>;
}
