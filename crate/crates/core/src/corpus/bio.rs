use super::{EntitySpan, Sentence};
use crate::error::{Error, Result};

/// How to treat an `I-X` tag that does not continue an open `X` span.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BioMode {
    /// Open a new span.
    #[default]
    Lenient,
    /// Reject the input.
    Strict,
}

/// Lenient BIO decoding of `token<TAB or space>tag` lines.
pub fn parse_bio(text: &str) -> Result<Vec<Sentence>> {
    parse_bio_with(text, BioMode::Lenient)
}

struct Builder {
    tokens: Vec<String>,
    spans: Vec<EntitySpan>,
    open: Option<(usize, String)>,
    first_line: usize,
}

impl Builder {
    fn new() -> Self {
        Self {
            tokens: Vec::new(),
            spans: Vec::new(),
            open: None,
            first_line: 0,
        }
    }

    fn close(&mut self) {
        if let Some((start, label)) = self.open.take() {
            self.spans
                .push(EntitySpan::new(start, self.tokens.len() - 1, label));
        }
    }

    fn finish(&mut self, out: &mut Vec<Sentence>) -> Result<()> {
        if self.tokens.is_empty() {
            return Ok(());
        }
        self.close();
        let tokens = std::mem::take(&mut self.tokens);
        let spans = std::mem::take(&mut self.spans);
        let s = Sentence::new(tokens, spans).map_err(|e| Error::Parse {
            line: self.first_line,
            message: e.to_string(),
        })?;
        out.push(s);
        Ok(())
    }
}

pub fn parse_bio_with(text: &str, mode: BioMode) -> Result<Vec<Sentence>> {
    let mut out = Vec::new();
    let mut b = Builder::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            b.finish(&mut out)?;
            continue;
        }
        let cols: Vec<&str> = line.split(['\t', ' ']).filter(|c| !c.is_empty()).collect();
        if cols.len() != 2 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 2 columns, found {}", cols.len()),
            });
        }
        if b.tokens.is_empty() {
            b.first_line = line_no;
        }
        let (token, tag) = (cols[0], cols[1]);
        let pos = b.tokens.len();
        if tag == "O" {
            b.close();
        } else if let Some(label) = tag.strip_prefix("B-").filter(|l| !l.is_empty()) {
            b.close();
            b.open = Some((pos, label.to_owned()));
        } else if let Some(label) = tag.strip_prefix("I-").filter(|l| !l.is_empty()) {
            let continues = matches!(&b.open, Some((_, l)) if l == label);
            if !continues {
                if mode == BioMode::Strict {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("I-{label} does not continue a {label} span"),
                    });
                }
                b.close();
                b.open = Some((pos, label.to_owned()));
            }
        } else {
            return Err(Error::Parse {
                line: line_no,
                message: format!("unrecognized tag {tag:?}"),
            });
        }
        b.tokens.push(token.to_owned());
    }
    b.finish(&mut out)?;
    Ok(out)
}

/// Serializes sentences as `token\ttag` lines with blank-line separators.
pub fn to_bio(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for (k, s) in sentences.iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        let mut tags = vec!["O".to_owned(); s.tokens.len()];
        for span in &s.spans {
            tags[span.start] = format!("B-{}", span.label);
            for t in tags.iter_mut().take(span.end + 1).skip(span.start + 1) {
                *t = format!("I-{}", span.label);
            }
        }
        for (tok, tag) in s.tokens.iter().zip(&tags) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(tag);
            out.push('\n');
        }
    }
    out
}
