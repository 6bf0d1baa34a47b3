use alloc::collections::BTreeMap;
use alloc::string::String;

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Replace whole identifier tokens (maximal runs of `[A-Za-z0-9_]`) found in
/// `renames`. All replacements happen simultaneously, so swaps are safe.
pub(crate) fn rename_tokens(text: &str, renames: &BTreeMap<&str, &str>) -> String {
    if renames.is_empty() {
        return text.into();
    }
    let mut out = String::with_capacity(text.len());
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (is_ident_char(c), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                push_token(&mut out, &text[s..i], renames);
                start = None;
                out.push(c);
            }
            (false, None) => out.push(c),
            (true, Some(_)) => {}
        }
    }
    if let Some(s) = start {
        push_token(&mut out, &text[s..], renames);
    }
    out
}

fn push_token(out: &mut String, token: &str, renames: &BTreeMap<&str, &str>) {
    out.push_str(renames.get(token).copied().unwrap_or(token));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_tokens_only_and_simultaneous() {
        let map: BTreeMap<&str, &str> = [("a_tool", "b_tool"), ("b_tool", "a_tool")].into_iter().collect();
        assert_eq!(
            rename_tokens("use a_tool, not b_tool or a_tools", &map),
            "use b_tool, not a_tool or a_tools"
        );
        assert_eq!(rename_tokens("a_tool", &map), "b_tool");
    }
}
