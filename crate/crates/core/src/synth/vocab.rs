use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Size of the instruction embedding table.
pub const VOCAB_SIZE: usize = 64;
/// Padding token.
pub const PAD: u32 = 0;
/// Longest instruction, in tokens.
pub const MAX_TOKENS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Add,
    Remove,
    Replace,
    Recolor,
    Keep,
}

impl Verb {
    pub const ALL: [Verb; 5] = [Verb::Add, Verb::Remove, Verb::Replace, Verb::Recolor, Verb::Keep];

    pub fn word(self) -> &'static str {
        ["add", "remove", "replace", "recolor", "keep"][self as usize]
    }

    fn token(self) -> u32 {
        1 + self as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Box,
    Sphere,
    Cylinder,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Box, Shape::Sphere, Shape::Cylinder];

    pub fn word(self) -> &'static str {
        ["box", "sphere", "cylinder"][self as usize]
    }

    fn token(self) -> u32 {
        6 + self as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
    Black,
    Orange,
    Purple,
}

impl Color {
    pub const ALL: [Color; 8] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::White, Color::Black, Color::Orange, Color::Purple];

    pub fn word(self) -> &'static str {
        ["red", "green", "blue", "yellow", "white", "black", "orange", "purple"][self as usize]
    }

    fn token(self) -> u32 {
        9 + self as u32
    }
}

/// Where an attachment sits relative to the base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Top,
    Bottom,
    Left,
    Right,
    Front,
}

impl Position {
    pub const ALL: [Position; 5] = [Position::Top, Position::Bottom, Position::Left, Position::Right, Position::Front];

    pub fn word(self) -> &'static str {
        ["top", "bottom", "left", "right", "front"][self as usize]
    }

    fn token(self) -> u32 {
        17 + self as u32
    }

    /// Unit direction from the base center.
    pub fn direction(self) -> [f64; 3] {
        match self {
            Position::Top => [0.0, 0.0, 1.0],
            Position::Bottom => [0.0, 0.0, -1.0],
            Position::Left => [-1.0, 0.0, 0.0],
            Position::Right => [1.0, 0.0, 0.0],
            Position::Front => [0.0, 1.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Word {
    Verb(Verb),
    Shape(Shape),
    Color(Color),
    Position(Position),
}

fn word_of_token(t: u32) -> Option<Word> {
    let t = t as usize;
    match t {
        1..=5 => Some(Word::Verb(Verb::ALL[t - 1])),
        6..=8 => Some(Word::Shape(Shape::ALL[t - 6])),
        9..=16 => Some(Word::Color(Color::ALL[t - 9])),
        17..=21 => Some(Word::Position(Position::ALL[t - 17])),
        _ => None,
    }
}

fn word_of_text(s: &str) -> Option<Word> {
    (1..=21).map(|t| (t, word_of_token(t).expect("dense token range"))).find(|(_, w)| word_text(*w) == s).map(|(_, w)| w)
}

fn word_text(w: Word) -> &'static str {
    match w {
        Word::Verb(v) => v.word(),
        Word::Shape(s) => s.word(),
        Word::Color(c) => c.word(),
        Word::Position(p) => p.word(),
    }
}

/// A templated edit: `verb noun [noun]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "verb", rename_all = "snake_case")]
pub enum EditInstruction {
    Add { shape: Shape, position: Position },
    Remove { shape: Shape },
    Replace { from: Shape, to: Shape },
    Recolor { shape: Shape, color: Color },
    Keep,
}

impl EditInstruction {
    pub fn verb(&self) -> Verb {
        match self {
            Self::Add { .. } => Verb::Add,
            Self::Remove { .. } => Verb::Remove,
            Self::Replace { .. } => Verb::Replace,
            Self::Recolor { .. } => Verb::Recolor,
            Self::Keep => Verb::Keep,
        }
    }

    /// Vocabulary ids without padding.
    pub fn tokens(&self) -> Vec<u32> {
        let mut t = vec![self.verb().token()];
        match *self {
            Self::Add { shape, position } => t.extend([shape.token(), position.token()]),
            Self::Remove { shape } => t.push(shape.token()),
            Self::Replace { from, to } => t.extend([from.token(), to.token()]),
            Self::Recolor { shape, color } => t.extend([shape.token(), color.token()]),
            Self::Keep => {}
        }
        t
    }

    /// Tokens right-padded with [`PAD`] to [`MAX_TOKENS`].
    pub fn padded_tokens(&self) -> [u32; MAX_TOKENS] {
        let mut out = [PAD; MAX_TOKENS];
        for (o, t) in out.iter_mut().zip(self.tokens()) {
            *o = t;
        }
        out
    }

    /// Inverse of [`Self::tokens`]; trailing padding is ignored.
    pub fn from_tokens(tokens: &[u32]) -> Result<Self> {
        let end = tokens.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
        let words = tokens[..end]
            .iter()
            .map(|&t| {
                if t as usize >= VOCAB_SIZE {
                    return Err(Error::Encoding(format!("token {t} outside the {VOCAB_SIZE}-word vocabulary")));
                }
                word_of_token(t).ok_or_else(|| Error::Encoding(format!("token {t} is not a word")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_words(&words)
    }

    fn from_words(w: &[Word]) -> Result<Self> {
        use Word as W;
        Ok(match *w {
            [W::Verb(Verb::Add), W::Shape(shape), W::Position(position)] => Self::Add { shape, position },
            [W::Verb(Verb::Remove), W::Shape(shape)] => Self::Remove { shape },
            [W::Verb(Verb::Replace), W::Shape(from), W::Shape(to)] => Self::Replace { from, to },
            [W::Verb(Verb::Recolor), W::Shape(shape), W::Color(color)] => Self::Recolor { shape, color },
            [W::Verb(Verb::Keep)] => Self::Keep,
            _ => return Err(Error::Encoding(format!("`{}` does not fit any template", w.iter().map(|&x| word_text(x)).collect::<Vec<_>>().join(" ")))),
        })
    }
}

impl fmt::Display for EditInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<&str> = self.tokens().into_iter().map(|t| word_text(word_of_token(t).expect("valid token"))).collect();
        f.write_str(&words.join(" "))
    }
}

impl FromStr for EditInstruction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let words = s
            .split_whitespace()
            .map(|w| word_of_text(&w.to_ascii_lowercase()).ok_or_else(|| Error::Encoding(format!("unknown word `{w}`"))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_words(&words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_and_tokens_round_trip() {
        let all = [
            EditInstruction::Add { shape: Shape::Sphere, position: Position::Front },
            EditInstruction::Remove { shape: Shape::Box },
            EditInstruction::Replace { from: Shape::Box, to: Shape::Cylinder },
            EditInstruction::Recolor { shape: Shape::Cylinder, color: Color::Purple },
            EditInstruction::Keep,
        ];
        for i in all {
            assert_eq!(i.to_string().parse::<EditInstruction>().unwrap(), i);
            assert_eq!(EditInstruction::from_tokens(&i.padded_tokens()).unwrap(), i);
            assert!(i.tokens().iter().all(|&t| (t as usize) < VOCAB_SIZE));
        }
        assert_eq!(EditInstruction::Keep.padded_tokens(), [5, 0, 0]);
        assert_eq!("add sphere front".parse::<EditInstruction>().unwrap().tokens(), vec![1, 7, 21]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(EditInstruction::from_tokens(&[1, 64]).is_err());
        assert!(EditInstruction::from_tokens(&[1, 30, 17]).is_err());
        assert!("remove red".parse::<EditInstruction>().is_err());
        assert!("paint box".parse::<EditInstruction>().is_err());
        assert!("".parse::<EditInstruction>().is_err());
    }
}
