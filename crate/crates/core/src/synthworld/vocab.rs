use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

/// Index of a token in the [`Vocabulary`].
pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const ARTICLE: TokenId = 3;
pub const PERIOD: TokenId = 4;

pub const CATEGORY_NAMES: [&str; 12] = [
    "cat", "dog", "bird", "horse", "sheep", "cow", "car", "bus", "boat", "chair", "table", "lamp",
];
pub const COLOR_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "black", "white"];
pub const SIZE_NAMES: [&str; 3] = ["small", "medium", "large"];
pub const CELL_NAMES: [&str; 9] = [
    "top-left",
    "top",
    "top-right",
    "left",
    "center",
    "right",
    "bottom-left",
    "bottom",
    "bottom-right",
];
pub const RELATION_NAMES: [&str; 3] = ["left-of", "above", "next-to"];

pub const GRID_ROWS: usize = 3;
pub const GRID_COLS: usize = 3;

const CATEGORY_BASE: usize = 5;
const COLOR_BASE: usize = CATEGORY_BASE + CATEGORY_NAMES.len();
const SIZE_BASE: usize = COLOR_BASE + COLOR_NAMES.len();
const CELL_BASE: usize = SIZE_BASE + SIZE_NAMES.len();
const RELATION_BASE: usize = CELL_BASE + CELL_NAMES.len();
const VOCAB_SIZE: usize = RELATION_BASE + RELATION_NAMES.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Category(pub u8);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Color(pub u8);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Size {
    Small,
    Medium,
    Large,
}

/// A cell of the 3x3 grid, numbered row-major from the top-left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell(pub u8);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationKind {
    LeftOf,
    Above,
    NextTo,
}

impl Category {
    pub const COUNT: usize = CATEGORY_NAMES.len();
    pub fn index(self) -> usize {
        self.0 as usize
    }
    pub fn name(self) -> &'static str {
        CATEGORY_NAMES[self.index()]
    }
    pub fn token(self) -> TokenId {
        CATEGORY_BASE + self.index()
    }
}

impl Color {
    pub const COUNT: usize = COLOR_NAMES.len();
    pub fn index(self) -> usize {
        self.0 as usize
    }
    pub fn name(self) -> &'static str {
        COLOR_NAMES[self.index()]
    }
    pub fn token(self) -> TokenId {
        COLOR_BASE + self.index()
    }
}

impl Size {
    pub const COUNT: usize = 3;
    pub const ALL: [Size; 3] = [Size::Small, Size::Medium, Size::Large];
    pub fn index(self) -> usize {
        self as usize
    }
    pub fn name(self) -> &'static str {
        SIZE_NAMES[self.index()]
    }
    pub fn token(self) -> TokenId {
        SIZE_BASE + self.index()
    }
}

impl Cell {
    pub const COUNT: usize = GRID_ROWS * GRID_COLS;
    pub fn index(self) -> usize {
        self.0 as usize
    }
    pub fn row(self) -> usize {
        self.index() / GRID_COLS
    }
    pub fn col(self) -> usize {
        self.index() % GRID_COLS
    }
    pub fn name(self) -> &'static str {
        CELL_NAMES[self.index()]
    }
    pub fn token(self) -> TokenId {
        CELL_BASE + self.index()
    }
}

impl RelationKind {
    pub const ALL: [RelationKind; 3] = [RelationKind::LeftOf, RelationKind::Above, RelationKind::NextTo];
    pub fn index(self) -> usize {
        self as usize
    }
    pub fn name(self) -> &'static str {
        RELATION_NAMES[self.index()]
    }
    pub fn token(self) -> TokenId {
        RELATION_BASE + self.index()
    }
}

/// Grammatical role of a token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenClass {
    Pad,
    Bos,
    Eos,
    Article,
    Period,
    Category(Category),
    Color(Color),
    Size(Size),
    Position(Cell),
    Relation(RelationKind),
}

/// Closed vocabulary of the scene grammar plus the PAD/BOS/EOS specials.
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// The fixed grammar vocabulary, built once.
    pub fn standard() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let mut tokens: Vec<String> = ["<pad>", "<bos>", "<eos>", "a", "."]
                .iter()
                .map(|s| s.to_string())
                .collect();
            for group in [
                &CATEGORY_NAMES[..],
                &COLOR_NAMES[..],
                &SIZE_NAMES[..],
                &CELL_NAMES[..],
                &RELATION_NAMES[..],
            ] {
                tokens.extend(group.iter().map(|s| s.to_string()));
            }
            debug_assert_eq!(tokens.len(), VOCAB_SIZE);
            let index = tokens
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), i))
                .collect();
            Vocabulary { tokens, index }
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(id: TokenId) -> bool {
        matches!(id, PAD | BOS | EOS)
    }

    pub fn classify(id: TokenId) -> Option<TokenClass> {
        let class = match id {
            PAD => TokenClass::Pad,
            BOS => TokenClass::Bos,
            EOS => TokenClass::Eos,
            ARTICLE => TokenClass::Article,
            PERIOD => TokenClass::Period,
            i if i < COLOR_BASE => TokenClass::Category(Category((i - CATEGORY_BASE) as u8)),
            i if i < SIZE_BASE => TokenClass::Color(Color((i - COLOR_BASE) as u8)),
            i if i < CELL_BASE => TokenClass::Size(Size::ALL[i - SIZE_BASE]),
            i if i < RELATION_BASE => TokenClass::Position(Cell((i - CELL_BASE) as u8)),
            i if i < VOCAB_SIZE => TokenClass::Relation(RelationKind::ALL[i - RELATION_BASE]),
            _ => return None,
        };
        Some(class)
    }

    /// Space-separated rendering; unknown ids show as `<unk:N>`.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| match self.token(t) {
                Some(s) => s.to_string(),
                None => format!("<unk:{t}>"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Inverse of [`render`](Self::render) for known tokens.
    pub fn encode(&self, text: &str) -> Option<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }
}

impl fmt::Debug for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocabulary").field("len", &self.len()).finish()
    }
}
