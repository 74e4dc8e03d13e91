//! Prediction prompt construction and in-context example packing.
//!
//! Layout of a built prompt (one fixed interleaving):
//!
//! ```text
//! system: Role: ...
//! user:   Task: ...
//!         Example 1:                      } repeated per
//!         Video Frames: <img> ... <img>   } in-context
//!         Scene Graph: {...}              } example
//!         Answer: [[...]]                 }
//!         Video Frames: <img> ... <img>
//!         Scene Graph: {...}
//!         Output Format: ...
//! ```

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::labels::{emit_prediction, PredictionGrid};
use crate::room::RoomType;
use crate::store::FrameRef;

pub const ROLE: &str = "You are an expert in predicting human behaviors.";

pub const OUTPUT_FORMAT: &str = "The output should be formulated as a 2D list, where the first dimension (rows) \
indicates the number of humans, the second dimension (elements in each row) refers to the prediction horizon T, \
i.e., the number of future behavior labels. Each behavior label is defined as a tuple (h_id, action, object), \
where h_id means the id of the human.";

pub const DEFAULT_MAX_IMAGES: usize = 50;

fn task_text(h: usize, t: usize) -> String {
    format!(
        "Given {h} video frames showing multiple humans performing different actions, and a scene graph describing \
the available objects and their relationships in the environment, your task is to predict {t} future action labels \
for each human in the scene."
    )
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("{images} images exceed the budget of {max_images}")]
    BudgetExceeded { images: usize, max_images: usize },
    #[error("scene graph text is missing for {0}")]
    MissingSceneGraph(String),
    #[error("{what} has {found} frames, expected H={expected}")]
    FrameCount { what: String, found: usize, expected: usize },
    #[error("history H and horizon T must be at least 1")]
    ZeroWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclExample {
    pub sample_id: String,
    pub room_type: RoomType,
    pub num_humans: usize,
    pub frame_refs: Vec<FrameRef>,
    pub scene_graph_text: String,
    pub gt_grid: PredictionGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub h: usize,
    pub t: usize,
    pub frame_refs: Vec<FrameRef>,
    pub scene_graph_text: String,
    pub icl_examples: Vec<IclExample>,
    pub max_images: usize,
}

impl PromptSpec {
    pub fn image_count(&self) -> usize {
        (self.icl_examples.len() + 1) * self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PromptPart {
    Text { text: String },
    Image { frame: FrameRef, label: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub parts: Vec<PromptPart>,
}

impl Prompt {
    fn push_text(&mut self, text: impl AsRef<str>) {
        match self.parts.last_mut() {
            Some(PromptPart::Text { text: prev }) => prev.push_str(text.as_ref()),
            _ => self.parts.push(PromptPart::Text {
                text: text.as_ref().to_string(),
            }),
        }
    }

    fn push_frames(&mut self, frames: &[FrameRef]) {
        self.push_text("Video Frames: ");
        for (i, f) in frames.iter().enumerate() {
            self.parts.push(PromptPart::Image {
                frame: f.clone(),
                label: format!("frame_{}.png", i + 1),
            });
        }
        self.push_text("\n");
    }

    pub fn image_count(&self) -> usize {
        self.parts.iter().filter(|p| matches!(p, PromptPart::Image { .. })).count()
    }

    pub fn images(&self) -> impl Iterator<Item = &FrameRef> {
        self.parts.iter().filter_map(|p| match p {
            PromptPart::Image { frame, .. } => Some(frame),
            PromptPart::Text { .. } => None,
        })
    }

    /// Text rendering with images shown as `<frame_k.png>`.
    pub fn render_text(&self) -> String {
        let mut out = format!("{}\n\n", self.system);
        let mut prev_image = false;
        for p in &self.parts {
            match p {
                PromptPart::Text { text } => {
                    out.push_str(text);
                    prev_image = false;
                }
                PromptPart::Image { label, .. } => {
                    if prev_image {
                        out.push(' ');
                    }
                    out.push('<');
                    out.push_str(label);
                    out.push('>');
                    prev_image = true;
                }
            }
        }
        out
    }

    /// Chat-completion messages; `image_url` maps each frame to a URL (usually a data URL).
    pub fn chat_messages<E>(&self, mut image_url: impl FnMut(&FrameRef) -> Result<String, E>) -> Result<Value, E> {
        let mut content = Vec::with_capacity(self.parts.len());
        for p in &self.parts {
            content.push(match p {
                PromptPart::Text { text } => json!({"type": "text", "text": text}),
                PromptPart::Image { frame, .. } => {
                    json!({"type": "image_url", "image_url": {"url": image_url(frame)?}})
                }
            });
        }
        Ok(json!([
            {"role": "system", "content": self.system},
            {"role": "user", "content": content},
        ]))
    }
}

fn check_frames(what: &str, frames: &[FrameRef], h: usize) -> Result<(), PromptError> {
    if frames.len() != h {
        return Err(PromptError::FrameCount {
            what: what.to_string(),
            found: frames.len(),
            expected: h,
        });
    }
    Ok(())
}

pub fn build_prompt(spec: &PromptSpec) -> Result<Prompt, PromptError> {
    if spec.h == 0 || spec.t == 0 {
        return Err(PromptError::ZeroWindow);
    }
    if spec.image_count() > spec.max_images {
        return Err(PromptError::BudgetExceeded {
            images: spec.image_count(),
            max_images: spec.max_images,
        });
    }
    check_frames("query", &spec.frame_refs, spec.h)?;
    if spec.scene_graph_text.trim().is_empty() {
        return Err(PromptError::MissingSceneGraph("query".into()));
    }
    for ex in &spec.icl_examples {
        check_frames(&ex.sample_id, &ex.frame_refs, spec.h)?;
        if ex.scene_graph_text.trim().is_empty() {
            return Err(PromptError::MissingSceneGraph(ex.sample_id.clone()));
        }
    }

    let mut p = Prompt {
        system: format!("Role: {ROLE}"),
        parts: Vec::new(),
    };
    p.push_text(format!("Task: {}\n\n", task_text(spec.h, spec.t)));
    for (i, ex) in spec.icl_examples.iter().enumerate() {
        p.push_text(format!("Example {}:\n", i + 1));
        p.push_frames(&ex.frame_refs);
        p.push_text(format!(
            "Scene Graph: {}\nAnswer: {}\n\n",
            ex.scene_graph_text.trim_end(),
            emit_prediction(&ex.gt_grid)
        ));
    }
    p.push_frames(&spec.frame_refs);
    p.push_text(format!(
        "Scene Graph: {}\n\nOutput Format: {OUTPUT_FORMAT}",
        spec.scene_graph_text.trim_end()
    ));
    Ok(p)
}

/// Largest number of examples that fit next to the query: `(k + 1) * h <= max_images`.
pub fn icl_capacity(h: usize, max_images: usize) -> usize {
    assert!(h >= 1, "history must be at least 1");
    (max_images / h).saturating_sub(1)
}

/// Orders candidates (same room, then same human count, then sample id) and
/// keeps the longest prefix that fits the image budget.
pub fn pack_icl(candidates: &[IclExample], query: (RoomType, usize), h: usize, max_images: usize) -> Vec<IclExample> {
    let mut ordered: Vec<&IclExample> = candidates.iter().collect();
    ordered.sort_by(|a, b| {
        let key = |e: &IclExample| (e.room_type != query.0, e.num_humans != query.1);
        key(a).cmp(&key(b)).then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    ordered.into_iter().take(icl_capacity(h, max_images)).cloned().collect()
}
