//! `$$NAME$$` substitution.
//!
//! A token is `$$`, one or more of `[A-Za-z0-9_.-]`, then `$$`. Any other
//! `$` is literal text.

use std::collections::BTreeMap;

use super::PolicyError;

fn is_name_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-')
}

pub fn is_secret_name(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(is_name_byte)
}

enum Piece<'a> {
    Text(&'a str),
    Token(&'a str),
}

fn pieces(text: &str) -> Vec<Piece<'_>> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let (mut start, mut i) = (0, 0);
    while i + 1 < b.len() {
        if b[i] == b'$' && b[i + 1] == b'$' {
            let name_end = (i + 2..b.len()).find(|&j| !is_name_byte(b[j])).unwrap_or(b.len());
            if name_end > i + 2 && b.get(name_end) == Some(&b'$') && b.get(name_end + 1) == Some(&b'$') {
                if start < i {
                    out.push(Piece::Text(&text[start..i]));
                }
                out.push(Piece::Token(&text[i + 2..name_end]));
                i = name_end + 2;
                start = i;
                continue;
            }
        }
        i += 1;
    }
    if start < b.len() {
        out.push(Piece::Text(&text[start..]));
    }
    out
}

/// Secret names referenced by `text`, in order of appearance.
pub fn template_tokens(text: &str) -> Vec<&str> {
    pieces(text)
        .into_iter()
        .filter_map(|p| match p {
            Piece::Token(t) => Some(t),
            Piece::Text(_) => None,
        })
        .collect()
}

/// Replaces every token with its value from `secrets`.
pub fn render_template(text: &str, secrets: &BTreeMap<String, String>) -> Result<String, PolicyError> {
    let mut out = String::with_capacity(text.len());
    for p in pieces(text) {
        match p {
            Piece::Text(t) => out.push_str(t),
            Piece::Token(name) => out.push_str(
                secrets
                    .get(name)
                    .ok_or_else(|| PolicyError::TemplateError(name.to_string()))?,
            ),
        }
    }
    Ok(out)
}
