use std::time::{SystemTime, UNIX_EPOCH};

use adapterbot::dialogue::{DialogueHistory, MetaKnowledge, Speaker, Utterance};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Manual,
    #[default]
    Auto,
}

/// One transcript entry. System turns carry the skill that produced them
/// and the knowledge the engine consumed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skill_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge: Option<MetaKnowledge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_id: Option<u32>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub filtered: bool,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::User,
            text: text.into(),
            skill_id: None,
            confidence: None,
            knowledge: None,
            style_id: None,
            filtered: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub created_at: u64,
    pub updated_at: u64,
    pub mode: Mode,
    pub skill_id: Option<u32>,
    pub style_id: Option<u32>,
    /// Exchanges completed over the session's lifetime, evicted ones included.
    pub exchanges: u64,
    pub turns: Vec<Turn>,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl Session {
    pub fn new() -> Self {
        let t = now_ms();
        Self {
            session_id: uuid::Uuid::new_v4().to_string(),
            created_at: t,
            updated_at: t,
            mode: Mode::Auto,
            skill_id: None,
            style_id: None,
            exchanges: 0,
            turns: Vec::new(),
        }
    }

    pub fn history(&self) -> DialogueHistory {
        DialogueHistory::new(
            self.turns
                .iter()
                .map(|t| Utterance {
                    speaker: t.speaker,
                    text: t.text.clone(),
                })
                .collect(),
        )
    }

    /// Appends a user/system pair, then evicts the oldest pairs beyond
    /// `max_turns` utterances.
    pub fn push_exchange(&mut self, user: Turn, system: Turn, max_turns: usize) {
        self.turns.push(user);
        self.turns.push(system);
        self.exchanges += 1;
        let keep = max_turns - max_turns % 2;
        if self.turns.len() > keep {
            let drop = self.turns.len() - keep;
            self.turns.drain(..drop);
        }
        self.updated_at = now_ms();
    }
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}
