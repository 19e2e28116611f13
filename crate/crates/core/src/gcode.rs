//! Lexing, parsing and syntactic validation of lathe G-code.
//!
//! The lexer is whitespace-insensitive: a word is an uppercase letter followed
//! by every character up to the next uppercase letter, with interior blanks
//! dropped. `G 00X1.0` therefore reads as `G00 X1.0`. Comments in both the
//! `( ... )` and `; ...` styles are stripped before word scanning.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}, column {column}: unexpected character {ch:?} at start of word")]
pub struct LexError {
    pub line: usize,
    pub column: usize,
    pub ch: char,
}

/// A single letter/value pair such as `X-0.5`.
#[derive(Debug, Clone, PartialEq)]
pub struct Word {
    pub letter: char,
    pub raw_value: String,
    pub numeric_value: Option<f64>,
}

impl Word {
    pub fn new(letter: char, raw_value: impl Into<String>) -> Self {
        let raw_value = raw_value.into();
        let numeric_value = parse_decimal(&raw_value);
        Word {
            letter,
            raw_value,
            numeric_value,
        }
    }

    /// Integer code for G/M style words: `G01` → 1. `None` when the value is
    /// missing, fractional or negative.
    pub fn code(&self) -> Option<u32> {
        let v = self.numeric_value?;
        if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
            Some(v as u32)
        } else {
            None
        }
    }

    fn is_motion(&self) -> bool {
        self.letter == 'G' && matches!(self.code(), Some(0..=3))
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.letter, self.raw_value)
    }
}

/// Signed decimal: optional sign, digits with at most one point, at least one digit.
fn parse_decimal(s: &str) -> Option<f64> {
    let body = s.strip_prefix(['+', '-']).unwrap_or(s);
    let mut digits = 0;
    let mut points = 0;
    for c in body.chars() {
        match c {
            '0'..='9' => digits += 1,
            '.' => points += 1,
            _ => return None,
        }
    }
    if digits == 0 || points > 1 {
        return None;
    }
    s.parse::<f64>().ok()
}

/// One non-blank source line.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub line_no: usize,
    pub words: Vec<Word>,
    pub comment: Option<String>,
    /// The source line as written, without the line terminator.
    pub text: String,
}

impl Block {
    pub fn has_motion(&self) -> bool {
        self.words.iter().any(Word::is_motion)
    }

    pub fn has_letter(&self, letter: char) -> bool {
        self.words.iter().any(|w| w.letter == letter)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub blocks: Vec<Block>,
    pub source: String,
}

impl Program {
    /// Re-emit the parsed words (and comments) one block per line.
    pub fn reserialize(&self) -> String {
        let mut out = String::new();
        for block in &self.blocks {
            let mut line = block
                .words
                .iter()
                .map(Word::to_string)
                .collect::<Vec<_>>()
                .join(" ");
            if let Some(c) = &block.comment {
                if !line.is_empty() {
                    line.push(' ');
                }
                line.push('(');
                line.push_str(c);
                line.push(')');
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

/// Splits a line into (code part, comment text).
fn strip_comments(line: &str) -> (String, Option<String>) {
    let mut code = String::with_capacity(line.len());
    let mut comments: Vec<String> = Vec::new();
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        match c {
            ';' => {
                comments.push(chars.as_str().trim().to_string());
                break;
            }
            '(' => {
                let mut text = String::new();
                for c in chars.by_ref() {
                    if c == ')' {
                        break;
                    }
                    text.push(c);
                }
                comments.push(text.trim().to_string());
                // keep column positions of the remaining code stable
                code.push(' ');
            }
            _ => code.push(c),
        }
    }
    let comment = if comments.is_empty() {
        None
    } else {
        Some(comments.join(" "))
    };
    (code, comment)
}

pub fn tokenize(text: &str) -> Result<Program, LexError> {
    let mut blocks = Vec::new();
    for (idx, raw_line) in text.split('\n').enumerate() {
        let line_no = idx + 1;
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        let (code, comment) = strip_comments(line);
        let trimmed = code.trim();
        // `%` alone is the tape start/end marker
        if trimmed == "%" {
            continue;
        }
        let mut words: Vec<Word> = Vec::new();
        let mut current: Option<(char, String)> = None;
        for (col, c) in code.chars().enumerate() {
            if c.is_whitespace() {
                continue;
            }
            if c.is_ascii_uppercase() {
                if let Some((l, v)) = current.take() {
                    words.push(Word::new(l, v));
                }
                current = Some((c, String::new()));
            } else if let Some((_, value)) = current.as_mut() {
                value.push(c);
            } else if c.is_ascii_lowercase() {
                current = Some((c.to_ascii_uppercase(), String::new()));
            } else {
                return Err(LexError {
                    line: line_no,
                    column: col + 1,
                    ch: c,
                });
            }
        }
        if let Some((l, v)) = current.take() {
            words.push(Word::new(l, v));
        }
        if words.is_empty() {
            continue;
        }
        blocks.push(Block {
            line_no,
            words,
            comment,
            text: line.to_string(),
        });
    }
    Ok(Program {
        blocks,
        source: text.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IssueCategory {
    ModalConflict,
    InvalidCommand,
    NonNumericCoordinate,
    MissingFeedValue,
    UnknownCode,
    EmptyMotionBlock,
    UnsafeFeed,
    Other,
}

impl IssueCategory {
    /// Human label used at the start of every issue message.
    pub fn label(self) -> &'static str {
        match self {
            IssueCategory::ModalConflict => "Modal conflict",
            IssueCategory::InvalidCommand => "Invalid command",
            IssueCategory::NonNumericCoordinate => "Non-numeric coordinate",
            IssueCategory::MissingFeedValue => "Feed F missing value",
            IssueCategory::UnknownCode => "Unknown code",
            IssueCategory::EmptyMotionBlock => "Empty motion block",
            IssueCategory::UnsafeFeed => "Unsafe feed",
            IssueCategory::Other => "Other",
        }
    }
}

impl fmt::Display for IssueCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GcodeIssue {
    pub line_no: usize,
    pub category: IssueCategory,
    /// Offending word(s) as written, e.g. `G00 G01`.
    pub offending: String,
    pub message: String,
}

impl GcodeIssue {
    fn new(block: &Block, category: IssueCategory, offending: String, detail: &str) -> Self {
        // Quoted with whitespace runs collapsed so spacing never changes the message.
        let quoted = block.text.split_whitespace().collect::<Vec<_>>().join(" ");
        let message = format!(
            "Line {}: {}: {} in \"{}\"",
            block.line_no,
            category.label(),
            detail,
            quoted
        );
        GcodeIssue {
            line_no: block.line_no,
            category,
            offending,
            message,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationLimits {
    pub max_feed: f64,
    pub known_g_codes: BTreeSet<u32>,
    pub known_m_codes: BTreeSet<u32>,
}

impl Default for ValidationLimits {
    fn default() -> Self {
        ValidationLimits {
            max_feed: 500.0,
            known_g_codes: [0, 1, 2, 3, 4, 18, 20, 21, 28, 40, 54, 90, 91, 94, 95, 96, 97]
                .into_iter()
                .collect(),
            known_m_codes: [3, 4, 5, 8, 9, 30].into_iter().collect(),
        }
    }
}

impl ValidationLimits {
    /// Adds the mandatory codes and rejects a non-positive feed ceiling.
    pub fn normalized(mut self) -> Result<Self, String> {
        if self.max_feed.is_nan() || self.max_feed <= 0.0 || self.max_feed.is_infinite() {
            return Err(format!("max_feed must be positive, got {}", self.max_feed));
        }
        self.known_g_codes.extend([0, 1, 2, 3]);
        self.known_m_codes.extend([3, 4, 5, 30]);
        Ok(self)
    }
}

fn is_axis(letter: char) -> bool {
    matches!(letter, 'X' | 'Z')
}

/// Runs every rule over every block and returns all findings in source order.
pub fn validate(program: &Program, limits: &ValidationLimits) -> Vec<GcodeIssue> {
    let mut issues = Vec::new();
    for block in &program.blocks {
        validate_block(block, limits, &mut issues);
    }
    issues
}

fn validate_block(block: &Block, limits: &ValidationLimits, issues: &mut Vec<GcodeIssue>) {
    let motions: Vec<&Word> = block.words.iter().filter(|w| w.is_motion()).collect();
    if motions.len() >= 2 {
        let offending = motions
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let detail = format!("conflicting motion commands {offending} in one block");
        issues.push(GcodeIssue::new(
            block,
            IssueCategory::ModalConflict,
            offending,
            &detail,
        ));
    }

    for word in &block.words {
        let text = word.to_string();
        if word.letter == 'N' {
            continue;
        }
        if word.letter == 'F' && word.raw_value.is_empty() {
            issues.push(GcodeIssue::new(
                block,
                IssueCategory::MissingFeedValue,
                text,
                "feed word `F` has no value",
            ));
            continue;
        }
        let Some(value) = word.numeric_value else {
            let (category, detail) = if is_axis(word.letter) {
                (
                    IssueCategory::NonNumericCoordinate,
                    format!("coordinate `{text}` is not a number"),
                )
            } else {
                (
                    IssueCategory::InvalidCommand,
                    format!("malformed word `{text}`"),
                )
            };
            issues.push(GcodeIssue::new(block, category, text, &detail));
            continue;
        };
        match word.letter {
            'G' | 'M' => {
                let known = if word.letter == 'G' {
                    &limits.known_g_codes
                } else {
                    &limits.known_m_codes
                };
                if !word.code().is_some_and(|c| known.contains(&c)) {
                    let detail = format!("unsupported code `{text}`");
                    issues.push(GcodeIssue::new(
                        block,
                        IssueCategory::UnknownCode,
                        text,
                        &detail,
                    ));
                }
            }
            'F' if value > limits.max_feed => {
                let detail = format!(
                    "feed `{text}` exceeds the limit of {} units/min",
                    limits.max_feed
                );
                issues.push(GcodeIssue::new(block, IssueCategory::UnsafeFeed, text, &detail));
            }
            _ => {}
        }
    }

    if !motions.is_empty() && !block.has_letter('X') && !block.has_letter('Z') {
        let offending = motions[0].to_string();
        let detail = format!("motion command `{offending}` has no X or Z target");
        issues.push(GcodeIssue::new(
            block,
            IssueCategory::EmptyMotionBlock,
            offending,
            &detail,
        ));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(p: &Program) -> Vec<(char, String)> {
        p.blocks
            .iter()
            .flat_map(|b| b.words.iter().map(|w| (w.letter, w.raw_value.clone())))
            .collect()
    }

    fn categories(text: &str, limits: &ValidationLimits) -> Vec<IssueCategory> {
        validate(&tokenize(text).unwrap(), limits)
            .into_iter()
            .map(|i| i.category)
            .collect()
    }

    #[test]
    fn tokenize_simple_block() {
        let p = tokenize("G00 X1.0 Z-0.5").unwrap();
        assert_eq!(p.blocks.len(), 1);
        let w = &p.blocks[0].words;
        assert_eq!(w.len(), 3);
        assert_eq!((w[0].letter, w[0].numeric_value), ('G', Some(0.0)));
        assert_eq!((w[1].letter, w[1].numeric_value), ('X', Some(1.0)));
        assert_eq!((w[2].letter, w[2].numeric_value), ('Z', Some(-0.5)));
    }

    #[test]
    fn tokenize_ignores_spacing() {
        let p = tokenize("G 00X1.0").unwrap();
        assert_eq!(
            words(&p),
            vec![('G', "00".to_string()), ('X', "1.0".to_string())]
        );
        assert_eq!(p.blocks[0].words[0].numeric_value, Some(0.0));
    }

    #[test]
    fn tokenize_empty_and_comment_lines() {
        assert!(tokenize("").unwrap().blocks.is_empty());
        let p = tokenize("(setup)\n\n; note\n%\nG0 X1 (rapid) ; trailing\r\n").unwrap();
        assert_eq!(p.blocks.len(), 1);
        assert_eq!(p.blocks[0].line_no, 5);
        assert_eq!(p.blocks[0].comment.as_deref(), Some("rapid trailing"));
        assert_eq!(p.blocks[0].words.len(), 2);
    }

    #[test]
    fn comment_text_never_contributes_words() {
        let p = tokenize("G1 (X9 Z9 F9999) X1.0").unwrap();
        assert_eq!(
            words(&p),
            vec![('G', "1".to_string()), ('X', "1.0".to_string())]
        );
    }

    #[test]
    fn lex_error_reports_position() {
        let err = tokenize("G0 X1\n#1=5").unwrap_err();
        assert_eq!(
            err,
            LexError {
                line: 2,
                column: 1,
                ch: '#'
            }
        );
    }

    #[test]
    fn decimal_parsing() {
        assert_eq!(parse_decimal("-0.5"), Some(-0.5));
        assert_eq!(parse_decimal("+.5"), Some(0.5));
        assert_eq!(parse_decimal("12."), Some(12.0));
        for bad in ["", "-", ".", "1.2.3", "abc", "1,200", "1e3"] {
            assert_eq!(parse_decimal(bad), None, "{bad}");
        }
    }

    #[test]
    fn validate_examples() {
        let d = ValidationLimits::default();
        use IssueCategory::*;
        assert_eq!(categories("N10 G00 G01 X5.0", &d), vec![ModalConflict]);
        assert_eq!(categories("G1 Xabc F100", &d), vec![NonNumericCoordinate]);
        assert_eq!(categories("G1 X2.0 F", &d), vec![MissingFeedValue]);
        assert_eq!(categories("G999 X1.0", &d), vec![UnknownCode]);
        assert_eq!(categories("G01", &d), vec![EmptyMotionBlock]);
        assert_eq!(categories("G1 X1.0 F9999", &d), vec![UnsafeFeed]);
        assert_eq!(categories("G0 X1.0\nG1 Z-2.0 F100", &d), vec![]);
        assert_eq!(categories("M3 S1,200", &d), vec![InvalidCommand]);
        assert_eq!(categories("M7", &d), vec![UnknownCode]);
    }

    #[test]
    fn issue_message_cites_word_and_line() {
        let issues = validate(
            &tokenize("G0 X0\nN10 G00 G01 X5.0").unwrap(),
            &ValidationLimits::default(),
        );
        assert_eq!(issues.len(), 1);
        let i = &issues[0];
        assert_eq!(i.line_no, 2);
        assert!(i.message.contains("G00 G01"));
        assert!(i.message.contains("N10 G00 G01 X5.0"));
        assert!(i.message.starts_with("Line 2: Modal conflict"));
    }

    #[test]
    fn multiple_issues_accumulate() {
        use IssueCategory::*;
        let cats = categories("G00 G01 X1.0\nG1 Z-1.0 F", &ValidationLimits::default());
        assert_eq!(cats, vec![ModalConflict, MissingFeedValue]);
    }

    #[test]
    fn custom_limits() {
        let limits = ValidationLimits {
            max_feed: 50.0,
            known_g_codes: [70].into_iter().collect(),
            known_m_codes: BTreeSet::new(),
        }
        .normalized()
        .unwrap();
        assert!(limits.known_g_codes.contains(&1));
        assert!(limits.known_m_codes.contains(&30));
        assert_eq!(
            categories("G70 X1 F60", &limits),
            vec![IssueCategory::UnsafeFeed]
        );
        assert!(ValidationLimits {
            max_feed: 0.0,
            ..ValidationLimits::default()
        }
        .normalized()
        .is_err());
    }

    #[test]
    fn line_numbers_are_ignored() {
        assert!(categories("Nabc G0 X1", &ValidationLimits::default()).is_empty());
    }
}
