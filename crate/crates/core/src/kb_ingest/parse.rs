//! Format-specific parsing into ordered blocks.

use super::{Block, BlockKind, DocFormat, IngestError, SourceDocument};

pub fn parse_document(raw: &[u8], format: DocFormat, doc_id: &str, source: &str, version_tag: &str) -> Result<SourceDocument, IngestError> {
    let text =
        std::str::from_utf8(raw).map_err(|e| IngestError::InvalidEncoding { doc_id: doc_id.to_string(), offset: e.valid_up_to() })?;
    let blocks = match format {
        DocFormat::Markdown => parse_markdown(text),
        DocFormat::Plaintext => parse_plaintext(text),
    };
    Ok(SourceDocument { doc_id: doc_id.to_string(), format, source: source.to_string(), version_tag: version_tag.to_string(), blocks })
}

fn parse_plaintext(text: &str) -> Vec<Block> {
    let mut blocks = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            flush_paragraph(&mut current, &mut blocks);
        } else {
            current.push(line.trim_end());
        }
    }
    flush_paragraph(&mut current, &mut blocks);
    blocks
}

fn flush_paragraph(lines: &mut Vec<&str>, blocks: &mut Vec<Block>) {
    if !lines.is_empty() {
        blocks.push(Block::new(BlockKind::Paragraph, lines.join("\n")));
        lines.clear();
    }
}

fn heading_level(line: &str) -> Option<(u8, &str)> {
    let trimmed = line.trim_start();
    // More than three spaces of indentation makes it a code line, not a heading.
    if line.len() - trimmed.len() > 3 {
        return None;
    }
    let hashes = trimmed.bytes().take_while(|&b| b == b'#').count();
    if !(1..=6).contains(&hashes) {
        return None;
    }
    let rest = &trimmed[hashes..];
    if rest.is_empty() {
        return Some((hashes as u8, ""));
    }
    if rest.starts_with(' ') || rest.starts_with('\t') {
        return Some((hashes as u8, rest.trim()));
    }
    None
}

fn fence_open(line: &str) -> Option<(String, String)> {
    let trimmed = line.trim_start();
    if line.len() - trimmed.len() > 3 {
        return None;
    }
    let marker = trimmed.chars().next()?;
    if marker != '`' && marker != '~' {
        return None;
    }
    let count = trimmed.chars().take_while(|&c| c == marker).count();
    if count < 3 {
        return None;
    }
    let fence: String = std::iter::repeat_n(marker, count).collect();
    let info = trimmed[count..].trim().to_string();
    if marker == '`' && info.contains('`') {
        return None;
    }
    Some((fence, info))
}

fn closes_fence(line: &str, fence: &str) -> bool {
    let trimmed = line.trim();
    let marker = fence.chars().next().unwrap_or('`');
    trimmed.len() >= fence.len() && trimmed.chars().all(|c| c == marker)
}

fn is_table_line(line: &str) -> bool {
    line.trim_start().starts_with('|')
}

fn list_marker_len(line: &str) -> Option<usize> {
    let trimmed = line.trim_start();
    let indent = line.len() - trimmed.len();
    if indent > 3 {
        return None;
    }
    let bytes = trimmed.as_bytes();
    if bytes.len() >= 2 && matches!(bytes[0], b'-' | b'*' | b'+') && bytes[1] == b' ' {
        return Some(indent + 2);
    }
    let digits = trimmed.bytes().take_while(u8::is_ascii_digit).count();
    if (1..=9).contains(&digits) && bytes.len() > digits + 1 && matches!(bytes[digits], b'.' | b')') && bytes[digits + 1] == b' ' {
        return Some(indent + digits + 2);
    }
    None
}

fn parse_markdown(text: &str) -> Vec<Block> {
    let lines: Vec<&str> = text.lines().collect();
    let mut blocks = Vec::new();
    let mut paragraph: Vec<&str> = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if line.trim().is_empty() {
            flush_paragraph(&mut paragraph, &mut blocks);
            i += 1;
            continue;
        }
        if let Some((fence, info)) = fence_open(line) {
            flush_paragraph(&mut paragraph, &mut blocks);
            let mut body = Vec::new();
            let mut closed = false;
            i += 1;
            while i < lines.len() {
                if closes_fence(lines[i], &fence) {
                    closed = true;
                    i += 1;
                    break;
                }
                body.push(lines[i]);
                i += 1;
            }
            blocks.push(Block::new(BlockKind::CodeFence { info, fence, closed }, body.join("\n")));
            continue;
        }
        if let Some((level, title)) = heading_level(line) {
            flush_paragraph(&mut paragraph, &mut blocks);
            blocks.push(Block::new(BlockKind::Heading { level }, title.to_string()));
            i += 1;
            continue;
        }
        if is_table_line(line) {
            flush_paragraph(&mut paragraph, &mut blocks);
            let mut rows = Vec::new();
            while i < lines.len() && is_table_line(lines[i]) {
                rows.push(lines[i].trim());
                i += 1;
            }
            blocks.push(Block::new(BlockKind::Table, rows.join("\n")));
            continue;
        }
        if let Some(marker_len) = list_marker_len(line) {
            flush_paragraph(&mut paragraph, &mut blocks);
            let mut item = vec![line.trim_end()];
            i += 1;
            // Indented continuation lines stay with their item.
            while i < lines.len() {
                let next = lines[i];
                let indent = next.len() - next.trim_start().len();
                if next.trim().is_empty() || indent < marker_len.min(2) || list_marker_len(next).is_some() || fence_open(next).is_some() {
                    break;
                }
                item.push(next.trim_end());
                i += 1;
            }
            blocks.push(Block::new(BlockKind::ListItem, item.join("\n")));
            continue;
        }
        paragraph.push(line.trim_end());
        i += 1;
    }
    flush_paragraph(&mut paragraph, &mut blocks);
    blocks
}
