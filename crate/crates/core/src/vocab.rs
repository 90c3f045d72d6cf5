//! Token table shared by the policy, the reward functions and the task generator.

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

/// Surface strings for each token id plus the two control tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    end: TokenId,
    pose: TokenId,
}

pub const END: TokenId = 0;
pub const POSE: TokenId = 1;
pub const ANSWER_PREFIX: TokenId = 2;
pub const PERIOD: TokenId = 3;

/// Surface string of the pose-trigger token.
pub const POSE_TRIGGER: &str = " <POSE>";

const STANDARD: &[&str] = &[
    // control and answer template
    "",
    POSE_TRIGGER,
    "The SMPL pose of this person is",
    ".",
    // near-miss pieces
    "The pose is",
    "the SMPL pose of this person is",
    "The SMPL pose of this person",
    " <pose>",
    ":",
    // pose descriptors (text-to-pose prompts)
    " raise",
    " lower",
    " left",
    " right",
    " arm",
    " leg",
    " bend",
    " knee",
    " twist",
    " lean",
    " forward",
    " back",
    // task prompts
    "Generate the SMPL pose for",
    "Estimate the SMPL pose of the person in the image",
    // question pieces
    "What color is",
    "How many",
    "Is",
    " the sky",
    " grass",
    " snow",
    " the sun",
    " hands",
    " legs",
    " wheels",
    " a cat",
    " a car",
    " an animal",
    " hot",
    " does a person have",
    " does a car have",
    " does a cat have",
    // answers
    "Blue",
    "Green",
    "White",
    "Yellow",
    "Two",
    "Four",
    "Yes",
    "No",
    " it is",
];

impl Vocabulary {
    pub fn new(tokens: Vec<String>, end: TokenId, pose: TokenId) -> Self {
        assert!((end as usize) < tokens.len() && (pose as usize) < tokens.len());
        Self { tokens, end, pose }
    }

    /// The vocabulary used by every synthetic task.
    pub fn standard() -> Self {
        Self::new(STANDARD.iter().map(|s| s.to_string()).collect(), END, POSE)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn end(&self) -> TokenId {
        self.end
    }

    pub fn pose(&self) -> TokenId {
        self.pose
    }

    pub fn surface(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    /// Looks up a token by its exact surface string.
    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.tokens
            .iter()
            .position(|t| t == surface)
            .map(|i| i as TokenId)
    }

    /// Concatenates surface strings, stopping at the first END.
    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .take_while(|&&t| t != self.end)
            .map(|&t| self.surface(t))
            .collect()
    }
}
