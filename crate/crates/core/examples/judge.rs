//! Validate rubric judge responses and average the accepted ones.

use robin::eval::{aggregate_judges, parse_judge};
use robin::Error;

const RESPONSES: [&str; 3] = [
    r#"{"global_analysis": "Drums land on every cut.", "rhythmic_sync": 5, "theme_coherence": 4,
        "emotion_alignment": 4, "cultural_relevance": 3, "temporal_dynamics": 4,
        "instrumentation_fit": 4, "overall_alignment": 4, "video_theme": "sport",
        "audio_theme": "rock", "video_emotion": "excited", "audio_emotion": "energetic"}"#,
    r#"{"global_analysis": "Calm, but misses the climax.", "rhythmic_sync": 2, "theme_coherence": 3,
        "emotion_alignment": 3, "cultural_relevance": 3, "temporal_dynamics": 2,
        "instrumentation_fit": 3, "overall_alignment": 3, "video_theme": "travel",
        "audio_theme": "ambient", "video_emotion": "joyful", "audio_emotion": "calm"}"#,
    r#"{"global_analysis": "", "rhythmic_sync": 6, "theme_coherence": 3.5,
        "video_theme": "city life", "mood": "?"}"#,
];

fn main() -> robin::Result<()> {
    let mut accepted = Vec::new();
    for (i, text) in RESPONSES.iter().enumerate() {
        match parse_judge(text) {
            Ok(r) => accepted.push(r),
            Err(Error::Validation(msgs)) => {
                println!("response {i} rejected:");
                for m in msgs {
                    println!("  {m}");
                }
            }
            Err(e) => return Err(e),
        }
    }
    println!("means over {} accepted: {}", accepted.len(), aggregate_judges(&accepted)?.to_json());
    Ok(())
}
