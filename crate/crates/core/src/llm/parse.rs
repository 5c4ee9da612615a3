//! Output grammar: free-form reasoning, then `Answer:` followed by the answer.

use crate::types::TokenSpan;

pub const ANSWER_MARKER: &str = "Answer:";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOutput {
    pub reasoning_text: String,
    /// Answer with whitespace collapsed to single spaces.
    pub answer_text: String,
    pub degraded: bool,
    /// Byte offset where the answer starts.
    answer_start: usize,
    /// Byte offset where the reasoning ends.
    reasoning_end: usize,
}

fn collapse(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits generated text into reasoning and answer.
///
/// The last `Answer:` marker wins. Without a marker the final non-empty line is
/// taken as the answer and `degraded` is set.
pub fn parse_output(text: &str) -> ParsedOutput {
    if let Some(pos) = text.rfind(ANSWER_MARKER) {
        let start = pos + ANSWER_MARKER.len();
        let answer = collapse(&text[start..]);
        if !answer.is_empty() {
            return ParsedOutput {
                reasoning_text: text[..pos].trim().to_owned(),
                answer_text: answer,
                degraded: false,
                answer_start: start,
                reasoning_end: pos,
            };
        }
    }
    let trimmed_end = text.trim_end().len();
    let line_start = text[..trimmed_end].rfind('\n').map_or(0, |i| i + 1);
    ParsedOutput {
        reasoning_text: text[..line_start].trim().to_owned(),
        answer_text: collapse(&text[line_start..]),
        degraded: true,
        answer_start: line_start,
        reasoning_end: line_start,
    }
}

/// Whitespace-token spans of `text`, used by backends without a model tokenizer.
pub fn whitespace_spans(text: &str, parsed: &ParsedOutput) -> (TokenSpan, TokenSpan) {
    let mut reasoning_end = 0;
    let mut answer_start = None;
    let mut count = 0;
    let mut offset = 0;
    for tok in text.split_whitespace() {
        let at = offset + text[offset..].find(tok).expect("token comes from text");
        offset = at + tok.len();
        if at + tok.len() <= parsed.reasoning_end {
            reasoning_end = count + 1;
        }
        if answer_start.is_none() && at + tok.len() > parsed.answer_start {
            answer_start = Some(count);
        }
        count += 1;
    }
    let answer_start = answer_start.unwrap_or(count);
    (
        TokenSpan::new(0, reasoning_end.min(answer_start)),
        TokenSpan::new(answer_start, count),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marker_splits_reasoning_and_answer() {
        let text = "The movie premiered in Japan. Answer: July 5, 2018";
        let p = parse_output(text);
        assert_eq!(p.answer_text, "July 5, 2018");
        assert_eq!(p.reasoning_text, "The movie premiered in Japan.");
        assert!(!p.degraded);
        let (r, a) = whitespace_spans(text, &p);
        assert_eq!(r, TokenSpan::new(0, 5));
        assert_eq!(a, TokenSpan::new(6, 9));
        let toks: Vec<_> = text.split_whitespace().collect();
        assert_eq!(toks[a.start..a.end].join(" "), p.answer_text);
    }

    #[test]
    fn missing_marker_degrades_to_last_line() {
        let p = parse_output("Paris");
        assert_eq!(p.answer_text, "Paris");
        assert!(p.degraded);
        let p = parse_output("thinking hard\nstill thinking\nLyon\n");
        assert_eq!(p.answer_text, "Lyon");
        assert_eq!(p.reasoning_text, "thinking hard\nstill thinking");
        let (r, a) = whitespace_spans("thinking hard\nstill thinking\nLyon\n", &p);
        assert_eq!((r, a), (TokenSpan::new(0, 4), TokenSpan::new(4, 5)));
    }

    #[test]
    fn empty_answer_after_marker_falls_back() {
        let p = parse_output("reasoning\nAnswer:");
        assert!(p.degraded);
        assert_eq!(p.answer_text, "Answer:");
    }

    #[test]
    fn marker_glued_to_answer() {
        let text = "x Answer:Rome";
        let p = parse_output(text);
        assert_eq!(p.answer_text, "Rome");
        let (r, a) = whitespace_spans(text, &p);
        assert_eq!((r, a), (TokenSpan::new(0, 1), TokenSpan::new(1, 2)));
    }
}
