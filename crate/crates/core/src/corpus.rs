//! Synthetic text corpora and the character vocabulary used to train on them.
//!
//! Three categories give the blend sampler distinguishable data: arithmetic
//! equations that are always true, balanced bracket strings, and word soup
//! drawn from a skewed lexicon.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every character a corpus can contain; token id = position.
pub const ALPHABET: &str = "\n 0123456789+-*=()[]{}<>abcdefghijklmnopqrstuvwxyz.,";

pub fn vocab_size() -> usize {
    ALPHABET.len()
}

pub fn encode(text: &str) -> Result<Vec<u32>> {
    text.bytes()
        .map(|b| {
            ALPHABET
                .bytes()
                .position(|a| a == b)
                .map(|i| i as u32)
                .ok_or_else(|| Error::InvalidArgument(format!("character {:?} is not in the alphabet", b as char)))
        })
        .collect()
}

pub fn decode(tokens: &[u32]) -> Result<String> {
    let alpha = ALPHABET.as_bytes();
    tokens
        .iter()
        .map(|&t| {
            alpha.get(t as usize).map(|&b| b as char).ok_or(Error::TokenOutOfRange {
                id: t,
                vocab: alpha.len(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Arithmetic,
    Bracket,
    Soup,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Arithmetic, Category::Bracket, Category::Soup];

    pub fn name(self) -> &'static str {
        match self {
            Category::Arithmetic => "arithmetic",
            Category::Bracket => "bracket",
            Category::Soup => "soup",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown corpus category {name:?}")))
    }

    fn stream_id(self) -> u64 {
        match self {
            Category::Arithmetic => 1,
            Category::Bracket => 2,
            Category::Soup => 3,
        }
    }

    fn line(self, rng: &mut ChaCha8Rng) -> String {
        match self {
            Category::Arithmetic => arithmetic_line(rng),
            Category::Bracket => bracket_line(rng),
            Category::Soup => soup_line(rng),
        }
    }
}

/// Generates at least `bytes` characters of whole lines per category.
/// Each category draws from its own stream derived from `seed`, so the
/// output for one category does not depend on which others are requested.
pub fn generate(seed: u64, bytes: usize, categories: &[Category]) -> Result<BTreeMap<Category, String>> {
    if bytes == 0 {
        return Err(Error::Config("corpus size must be positive".into()));
    }
    if categories.is_empty() {
        return Err(Error::Config("no corpus categories requested".into()));
    }
    let mut out = BTreeMap::new();
    for &c in categories {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c.stream_id());
        let mut text = String::with_capacity(bytes + 64);
        while text.len() < bytes {
            text.push_str(&c.line(&mut rng));
            text.push('\n');
        }
        out.insert(c, text);
    }
    Ok(out)
}

/// Splits `text` at a line boundary so roughly `fraction` of it lands in the
/// second part.
pub fn split_holdout(text: &str, fraction: f64) -> (&str, &str) {
    let target = ((1.0 - fraction) * text.len() as f64) as usize;
    let cut = text[..target.min(text.len())].rfind('\n').map(|i| i + 1).unwrap_or(0);
    text.split_at(cut)
}

fn arithmetic_line(rng: &mut ChaCha8Rng) -> String {
    let n = |rng: &mut ChaCha8Rng| rng.random_range(0..100i64);
    let (a, b) = (n(rng), n(rng));
    match rng.random_range(0..5) {
        0 => format!("{a}+{b}={}", a + b),
        1 => format!("{a}-{b}={}", a - b),
        2 => {
            let (a, b) = (a % 13, b % 13);
            format!("{a}*{b}={}", a * b)
        }
        3 => {
            let c = rng.random_range(0..10i64);
            format!("({a}+{b})*{c}={}", (a + b) * c)
        }
        _ => {
            let c = rng.random_range(0..10i64);
            format!("{a}+{b}*{c}={}", a + b * c)
        }
    }
}

const PAIRS: [(char, char); 4] = [('(', ')'), ('[', ']'), ('{', '}'), ('<', '>')];

fn bracket_line(rng: &mut ChaCha8Rng) -> String {
    fn group(rng: &mut ChaCha8Rng, depth: u32, out: &mut String) {
        let (open, close) = PAIRS[rng.random_range(0..PAIRS.len())];
        out.push(open);
        if depth < 4 {
            let children = rng.random_range(0..3);
            for _ in 0..children {
                group(rng, depth + 1, out);
            }
        }
        out.push(close);
    }
    let mut s = String::new();
    for _ in 0..rng.random_range(1..4) {
        group(rng, 0, &mut s);
    }
    s
}

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Lexicon word `i`: one to three syllables built from its digits.
fn word(mut i: usize) -> String {
    let mut w = String::new();
    loop {
        w.push_str(ONSETS[i % ONSETS.len()]);
        i /= ONSETS.len();
        w.push_str(NUCLEI[i % NUCLEI.len()]);
        i /= NUCLEI.len();
        if i == 0 {
            break w;
        }
        i -= 1;
    }
}

fn soup_line(rng: &mut ChaCha8Rng) -> String {
    let words = rng.random_range(4..10);
    let mut s = String::new();
    for k in 0..words {
        // Zipf-like rank: heavy head, long tail
        let u: f64 = rng.random();
        let rank = ((400.0f64).powf(u) - 1.0) as usize;
        if k > 0 {
            s.push(if rng.random_range(0..8) == 0 { ',' } else { ' ' });
            if s.ends_with(',') {
                s.push(' ');
            }
        }
        s.push_str(&word(rank));
    }
    s.push('.');
    s
}

/// Checks an arithmetic line `expr=value` with the usual precedence.
pub fn arithmetic_line_holds(line: &str) -> Result<bool> {
    let (lhs, rhs) = line
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("no '=' in {line:?}")))?;
    let value: i64 = rhs
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad right-hand side in {line:?}")))?;
    let mut p = ExprParser {
        s: lhs.as_bytes(),
        i: 0,
    };
    let v = p.expr()?;
    if p.i != p.s.len() {
        return Err(Error::InvalidArgument(format!("trailing input in {line:?}")));
    }
    Ok(v == value)
}

struct ExprParser<'a> {
    s: &'a [u8],
    i: usize,
}

impl ExprParser<'_> {
    fn peek(&self) -> Option<u8> {
        self.s.get(self.i).copied()
    }

    fn expr(&mut self) -> Result<i64> {
        let mut v = self.term()?;
        while let Some(op @ (b'+' | b'-')) = self.peek() {
            self.i += 1;
            let t = self.term()?;
            v = if op == b'+' { v + t } else { v - t };
        }
        Ok(v)
    }

    fn term(&mut self) -> Result<i64> {
        let mut v = self.atom()?;
        while self.peek() == Some(b'*') {
            self.i += 1;
            v *= self.atom()?;
        }
        Ok(v)
    }

    fn atom(&mut self) -> Result<i64> {
        if self.peek() == Some(b'(') {
            self.i += 1;
            let v = self.expr()?;
            if self.peek() != Some(b')') {
                return Err(Error::InvalidArgument("unbalanced parenthesis".into()));
            }
            self.i += 1;
            return Ok(v);
        }
        let start = self.i;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.i += 1;
        }
        std::str::from_utf8(&self.s[start..self.i])
            .unwrap()
            .parse()
            .map_err(|_| Error::InvalidArgument("expected a number".into()))
    }
}

/// True when every bracket closes the most recent open one.
pub fn brackets_balanced(line: &str) -> bool {
    let mut stack = Vec::new();
    for c in line.chars() {
        if let Some(&(_, close)) = PAIRS.iter().find(|(o, _)| *o == c) {
            stack.push(close);
        } else if PAIRS.iter().any(|(_, cl)| *cl == c) {
            if stack.pop() != Some(c) {
                return false;
            }
        } else {
            return false;
        }
    }
    stack.is_empty()
}
