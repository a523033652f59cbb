//! Message types for external VOS adapters.
//!
//! An adapter process reads one JSON request per line on stdin and answers
//! with one JSON response per line on stdout:
//!
//! ```text
//! {"frames": ["f0.pgm", ...], "prompts": [{"index": 0, "mask_path": "m0.pgm"}]}
//! {"masks": ["out1.pgm", ...], "confidences": [0.93, ...]}
//! ```
//!
//! The response lists one mask per unprompted frame, in frame order.

use serde::{Deserialize, Serialize};

use super::VosError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterPrompt {
    pub index: usize,
    pub mask_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterRequest {
    pub frames: Vec<String>,
    pub prompts: Vec<AdapterPrompt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterResponse {
    pub masks: Vec<String>,
    pub confidences: Vec<f64>,
}

impl AdapterRequest {
    pub fn parse_line(line: &str) -> Result<Self, VosError> {
        let req: Self = serde_json::from_str(line).map_err(|e| VosError::Adapter(e.to_string()))?;
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), VosError> {
        if self.prompts.is_empty() {
            return Err(VosError::NoPrompts);
        }
        for (k, p) in self.prompts.iter().enumerate() {
            if p.index >= self.frames.len() {
                return Err(VosError::PromptIndex {
                    index: p.index,
                    len: self.frames.len(),
                });
            }
            if p.index != k {
                return Err(VosError::PromptOrder { index: p.index });
            }
        }
        Ok(())
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

impl AdapterResponse {
    /// Parses a response to `request`, checking counts and confidence range.
    pub fn parse_line(line: &str, request: &AdapterRequest) -> Result<Self, VosError> {
        let resp: Self =
            serde_json::from_str(line).map_err(|e| VosError::Adapter(e.to_string()))?;
        let expected = request.frames.len() - request.prompts.len();
        if resp.masks.len() != expected || resp.confidences.len() != expected {
            return Err(VosError::Adapter(format!(
                "expected {expected} masks and confidences, got {} and {}",
                resp.masks.len(),
                resp.confidences.len()
            )));
        }
        if let Some(c) = resp.confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(VosError::Adapter(format!("confidence {c} outside [0, 1]")));
        }
        Ok(resp)
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}
