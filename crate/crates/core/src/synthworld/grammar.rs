//! Caption grammar: deterministic realisation and an error-tolerant
//! recursive-descent parser.
//!
//! ```text
//! caption   := clause* EOS?
//! clause    := object | relation
//! object    := "a" CATEGORY COLOR? SIZE? POSITION? "."
//! relation  := CATEGORY RELATION CATEGORY "."
//! ```

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::scene::{Element, Scene};
use super::vocab::{TokenClass, TokenId, Vocabulary, ARTICLE, BOS, EOS, PAD, PERIOD};
use crate::error::{Error, Result};

/// Generated or reference token sequence, without the leading BOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Caption {
    tokens: Vec<TokenId>,
}

impl Caption {
    /// Validates that BOS is only ever leading and EOS only terminal.
    pub fn new(tokens: Vec<TokenId>) -> Result<Self> {
        if let Some(p) = tokens.iter().skip(1).position(|&t| t == BOS) {
            return Err(Error::Data(format!("BOS at position {}", p + 1)));
        }
        if let Some(p) = tokens.iter().position(|&t| t == EOS) {
            if p + 1 != tokens.len() {
                return Err(Error::Data(format!("EOS at non-terminal position {p}")));
            }
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// True iff the last token is EOS.
    pub fn terminated(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    /// Tokens without specials.
    pub fn words(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.tokens
            .iter()
            .copied()
            .filter(|&t| !Vocabulary::is_special(t))
    }

    pub fn render(&self) -> String {
        Vocabulary::standard().render(&self.tokens)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetailLevel {
    Short,
    Full,
}

/// Realises a scene as a caption ending in EOS.
///
/// `Full` gives one clause per object in canonical order followed by one
/// clause per relation; `Short` gives only the first object's category.
pub fn describe(scene: &Scene, level: DetailLevel) -> Caption {
    let mut tokens = Vec::new();
    match level {
        DetailLevel::Short => {
            tokens.extend([ARTICLE, scene.objects[0].category.token(), PERIOD]);
        }
        DetailLevel::Full => {
            for o in &scene.objects {
                tokens.extend([
                    ARTICLE,
                    o.category.token(),
                    o.color.token(),
                    o.size.token(),
                    o.position.token(),
                    PERIOD,
                ]);
            }
            for r in &scene.relations {
                tokens.extend([
                    scene.objects[r.subject].category.token(),
                    r.kind.token(),
                    scene.objects[r.object].category.token(),
                    PERIOD,
                ]);
            }
        }
    }
    tokens.push(EOS);
    Caption { tokens }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParseResult {
    /// Union of all successfully parsed clauses.
    pub elements: BTreeSet<Element>,
    /// Elements of each successful clause, in order.
    pub clauses: Vec<Vec<Element>>,
    pub clause_failures: usize,
}

impl ParseResult {
    pub fn parse_success(&self) -> bool {
        self.clause_failures == 0 && !self.elements.is_empty()
    }

    /// Successful plus failed clause slots.
    pub fn clause_slots(&self) -> usize {
        self.clauses.len() + self.clause_failures
    }
}

struct Cursor<'t> {
    tokens: &'t [TokenId],
    pos: usize,
}

impl Cursor<'_> {
    fn peek(&self) -> Option<TokenClass> {
        self.tokens
            .get(self.pos)
            .map(|&t| Vocabulary::classify(t).unwrap_or(TokenClass::Pad))
    }

    fn at_end(&self) -> bool {
        self.pos >= self.tokens.len() || self.tokens[self.pos] == EOS
    }

    fn bump(&mut self) {
        self.pos += 1;
    }

    /// Skips past the next clause delimiter, stopping at EOS.
    fn resync(&mut self) {
        while !self.at_end() {
            let t = self.tokens[self.pos];
            self.pos += 1;
            if t == PERIOD {
                return;
            }
        }
    }

    fn expect_period(&mut self) -> Option<()> {
        if self.peek() == Some(TokenClass::Period) {
            self.bump();
            Some(())
        } else {
            None
        }
    }

    fn object_clause(&mut self) -> Option<Vec<Element>> {
        self.bump(); // article
        let Some(TokenClass::Category(cat)) = self.peek() else {
            return None;
        };
        self.bump();
        let mut out = vec![Element::Object(cat)];
        if let Some(TokenClass::Color(c)) = self.peek() {
            self.bump();
            out.push(Element::Color(cat, c));
        }
        if let Some(TokenClass::Size(s)) = self.peek() {
            self.bump();
            out.push(Element::Size(cat, s));
        }
        if let Some(TokenClass::Position(p)) = self.peek() {
            self.bump();
            out.push(Element::Position(cat, p));
        }
        self.expect_period()?;
        Some(out)
    }

    fn relation_clause(&mut self) -> Option<Vec<Element>> {
        let Some(TokenClass::Category(subject)) = self.peek() else {
            return None;
        };
        self.bump();
        let Some(TokenClass::Relation(kind)) = self.peek() else {
            return None;
        };
        self.bump();
        let Some(TokenClass::Category(object)) = self.peek() else {
            return None;
        };
        self.bump();
        self.expect_period()?;
        Some(vec![Element::Relation(subject, kind, object)])
    }
}

/// Greedy clause-by-clause parse. Never fails: malformed spans are counted
/// and skipped up to the next `.`.
pub fn parse_caption(tokens: &[TokenId]) -> ParseResult {
    let mut cur = Cursor { tokens, pos: 0 };
    if tokens.first() == Some(&BOS) {
        cur.bump();
    }
    let mut result = ParseResult::default();
    loop {
        while cur.pos < tokens.len() && tokens[cur.pos] == PAD {
            cur.bump();
        }
        if cur.at_end() {
            break;
        }
        let parsed = match cur.peek() {
            Some(TokenClass::Article) => cur.object_clause(),
            Some(TokenClass::Category(_)) => cur.relation_clause(),
            _ => None,
        };
        match parsed {
            Some(elements) => {
                result.elements.extend(elements.iter().copied());
                result.clauses.push(elements);
            }
            None => {
                result.clause_failures += 1;
                cur.resync();
            }
        }
    }
    result
}
