//! Natural-language rendering of knowledge groups.
//!
//! Off by default: nothing in the training path calls it. Each skeleton has
//! `{bg}`, `{x}` and `{y}` slots; tokens are rendered as `t<id>`.

use super::KnowledgeGroup;

pub const DEFAULT_SKELETONS: &[&str] = &[
    "In {bg}, {x} is known for {y}.",
    "Regarding {bg}: the {x} one leads to {y}.",
    "{bg} with {x} gives {y}.",
];

fn word(t: usize) -> String {
    format!("t{t}")
}

pub fn render_group(group: &KnowledgeGroup, skeletons: &[&str]) -> Vec<String> {
    if skeletons.is_empty() {
        return Vec::new();
    }
    let bg = group.x_bg.iter().map(|&t| word(t)).collect::<Vec<_>>().join(" ");
    group
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            skeletons[i % skeletons.len()]
                .replace("{bg}", &bg)
                .replace("{x}", &word(r.tokens[super::ENTITY_POS]))
                .replace("{y}", &word(r.answer))
        })
        .collect()
}
