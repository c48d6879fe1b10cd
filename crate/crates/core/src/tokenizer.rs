//! One-word-per-token toy tokenizer.

use crate::embedding::{PromptLayout, EOT, PAD, SOT};
use crate::error::{Error, Result};

/// Template whose object row is used as the context-light ("pure") embedding.
pub const PURE_TEMPLATE_PREFIX: [&str; 4] = ["a", "photo", "of", "a"];

/// Position of the object token inside the pure template (after `<sot>`).
pub const PURE_TEMPLATE_OBJECT_INDEX: usize = 5;

/// Lowercased words with surrounding punctuation stripped.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Normalize an object name, rejecting names that do not form exactly one token.
pub fn object_token(name: &str) -> Result<String> {
    match words(name).as_slice() {
        [single] => Ok(single.clone()),
        _ => Err(Error::MultiTokenObject(name.to_string())),
    }
}

/// Tokenize `text` into a padded layout of length `n`.
///
/// Each object is located at its first occurrence after the previous
/// object's position, so repeated words resolve in mention order.
pub fn layout_for(text: &str, objects: &[&str], n: usize) -> Result<PromptLayout> {
    let ws = words(text);
    if ws.len() + 2 > n {
        return Err(Error::Layout(format!(
            "prompt has {} tokens plus sot/eot but N = {n}",
            ws.len()
        )));
    }
    let mut tokens = Vec::with_capacity(n);
    tokens.push(SOT.to_string());
    tokens.extend(ws.iter().cloned());
    tokens.push(EOT.to_string());
    let eot = tokens.len() - 1;
    tokens.resize(n, PAD.to_string());

    let mut critical = Vec::with_capacity(objects.len());
    let mut names = Vec::with_capacity(objects.len());
    let mut from = 1;
    for obj in objects {
        let tok = object_token(obj)?;
        let pos = (from..eot)
            .find(|&i| tokens[i] == tok)
            .ok_or_else(|| Error::Layout(format!("object {tok:?} not found in {text:?} after position {from}")))?;
        critical.push(pos);
        names.push(tok);
        from = pos + 1;
    }
    PromptLayout::new(tokens, eot, critical, names)
}

/// Layout of `"a photo of a <object>"`.
pub fn pure_template_layout(object: &str, n: usize) -> Result<PromptLayout> {
    let tok = object_token(object)?;
    let text = format!("{} {tok}", PURE_TEMPLATE_PREFIX.join(" "));
    let layout = layout_for(&text, &[tok.as_str()], n)?;
    debug_assert_eq!(layout.critical(), &[PURE_TEMPLATE_OBJECT_INDEX]);
    Ok(layout)
}
