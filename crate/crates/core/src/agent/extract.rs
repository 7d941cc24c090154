use thiserror::Error;

pub const CODE_LABEL: &str = "labscript";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("no code block")]
    NoCodeBlock,
    #[error("empty code block")]
    EmptyBlock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extracted {
    pub code: String,
    /// `DONE` appeared as a standalone word outside every fence.
    pub done: bool,
    pub warnings: Vec<String>,
}

struct Block {
    label: String,
    body: Vec<String>,
    closed: bool,
}

fn is_done_word(line: &str) -> bool {
    line.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).any(|w| w == "DONE")
}

/// Pulls the first ```` ```labscript ```` block out of an assistant reply.
pub fn extract_code_block(text: &str) -> Result<Extracted, ExtractError> {
    let mut blocks: Vec<Block> = Vec::new();
    let mut open: Option<Block> = None;
    let mut done = false;
    for line in text.lines() {
        let trimmed = line.trim();
        match open.as_mut() {
            Some(block) if trimmed == "```" => {
                block.closed = true;
                blocks.extend(open.take());
            }
            Some(block) => block.body.push(line.to_string()),
            None => match trimmed.strip_prefix("```") {
                Some(label) => {
                    open = Some(Block { label: label.trim().to_string(), body: Vec::new(), closed: false })
                }
                None => done |= is_done_word(line),
            },
        }
    }
    blocks.extend(open);

    let mut warnings = Vec::new();
    let first = blocks.iter().position(|b| b.label.eq_ignore_ascii_case(CODE_LABEL)).ok_or(ExtractError::NoCodeBlock)?;
    let extra = blocks.len() - 1;
    if extra > 0 {
        warnings.push(format!("{extra} additional code block(s) ignored; only the first labscript block runs"));
    }
    let block = &blocks[first];
    if !block.closed {
        warnings.push("code block was not closed with ```".into());
    }
    let code = block.body.join("\n");
    if code.trim().is_empty() {
        return Err(ExtractError::EmptyBlock);
    }
    Ok(Extracted { code, done, warnings })
}
