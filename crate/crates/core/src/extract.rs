//! Locating structured blocks inside free-form model completions.

/// A structured block found in a completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block<'a> {
    /// Byte offset of `body` within the completion.
    pub offset: usize,
    pub body: &'a str,
    pub fenced: bool,
}

/// Returns the first fenced (```` ``` ````) or bare `{...}` / `[...]` block,
/// whichever starts earlier. A bare block that never closes runs to the end
/// of the text.
pub fn first_block(text: &str) -> Option<Block<'_>> {
    let fence = text.find("```");
    let bare = text.find(['{', '[']);
    match (fence, bare) {
        (Some(f), Some(b)) if b < f => Some(bare_block(text, b)),
        (Some(f), _) => Some(fenced_block(text, f)),
        (None, Some(b)) => Some(bare_block(text, b)),
        (None, None) => None,
    }
}

fn fenced_block(text: &str, start: usize) -> Block<'_> {
    let after = start + 3;
    // skip the info string (`json`, `text`, ...) up to the end of the line
    let body_start = text[after..].find('\n').map_or(text.len(), |i| after + i + 1);
    let body_end = text[body_start..]
        .find("```")
        .map_or(text.len(), |i| body_start + i);
    Block {
        offset: body_start,
        body: &text[body_start..body_end],
        fenced: true,
    }
}

fn bare_block(text: &str, start: usize) -> Block<'_> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' | '[' => depth += 1,
            '}' | ']' => {
                depth = depth.saturating_sub(1);
                if depth == 0 {
                    let end = start + i + c.len_utf8();
                    return Block {
                        offset: start,
                        body: &text[start..end],
                        fenced: false,
                    };
                }
            }
            _ => {}
        }
    }
    Block {
        offset: start,
        body: &text[start..],
        fenced: false,
    }
}

/// Converts a 1-based (line, column) position into a byte offset in `text`.
pub fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}
