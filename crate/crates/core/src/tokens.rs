//! Fallback token estimate, used only when an endpoint omits usage.

/// Characters per token for English text under common BPE vocabularies.
pub const CHARS_PER_TOKEN: usize = 4;

/// Rough token count: one token per four characters, rounded up.
///
/// This is an estimate and never replaces usage reported by an endpoint.
pub fn estimate_tokens(text: &str) -> u32 {
    let chars = text.chars().count();
    chars.div_ceil(CHARS_PER_TOKEN) as u32
}
