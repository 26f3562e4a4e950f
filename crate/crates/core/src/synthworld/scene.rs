use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Category, Cell, Color, RelationKind, Size};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct SceneConfig {
    pub max_objects: usize,
    pub noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            max_objects: 6,
            noise_sigma: 0.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_objects == 0 {
            return Err(Error::Config("scene.max_objects must be at least 1".into()));
        }
        let limit = Cell::COUNT.min(Category::COUNT);
        if self.max_objects > limit {
            return Err(Error::Config(format!(
                "scene.max_objects = {} exceeds the {limit} objects a 3x3 grid with distinct categories can hold",
                self.max_objects
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "scene.noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub category: Category,
    pub color: Color,
    pub size: Size,
    pub position: Cell,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub kind: RelationKind,
    pub object: usize,
}

/// Extractable visual element, keyed by category (categories are unique
/// within a scene).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Element {
    Object(Category),
    Color(Category, Color),
    Size(Category, Size),
    Position(Category, Cell),
    Relation(Category, RelationKind, Category),
}

impl Element {
    pub fn is_object(&self) -> bool {
        matches!(self, Element::Object(_))
    }
}

/// Ground-truth world state. Objects are stored in canonical (row-major
/// grid) order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<ObjectInstance>,
    pub relations: Vec<Relation>,
    pub seed: u64,
}

impl Scene {
    /// Builds a scene from objects, sorting them canonically and deriving
    /// relations.
    pub fn from_objects(seed: u64, mut objects: Vec<ObjectInstance>) -> Result<Self> {
        if objects.is_empty() {
            return Err(Error::Data("a scene needs at least one object".into()));
        }
        objects.sort_by_key(|o| o.position);
        for pair in objects.windows(2) {
            if pair[0].position == pair[1].position {
                return Err(Error::Data(format!(
                    "two objects share cell {}",
                    pair[0].position.name()
                )));
            }
        }
        let categories: BTreeSet<Category> = objects.iter().map(|o| o.category).collect();
        if categories.len() != objects.len() {
            return Err(Error::Data("object categories must be distinct".into()));
        }
        let relations = derive_relations(&objects);
        Ok(Self {
            objects,
            relations,
            seed,
        })
    }

    pub fn categories(&self) -> BTreeSet<Category> {
        self.objects.iter().map(|o| o.category).collect()
    }

    pub fn object_at(&self, cell: Cell) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.position == cell)
    }

    /// Ground-truth element set: one object, three attributes per object,
    /// one tuple per relation.
    pub fn elements(&self) -> BTreeSet<Element> {
        let mut out = BTreeSet::new();
        for o in &self.objects {
            out.insert(Element::Object(o.category));
            out.insert(Element::Color(o.category, o.color));
            out.insert(Element::Size(o.category, o.size));
            out.insert(Element::Position(o.category, o.position));
        }
        for r in &self.relations {
            out.insert(Element::Relation(
                self.objects[r.subject].category,
                r.kind,
                self.objects[r.object].category,
            ));
        }
        out
    }
}

/// Relations between consecutive objects in canonical order: same row is
/// `left-of`, same column is `above`, diagonal neighbours are `next-to`.
fn derive_relations(objects: &[ObjectInstance]) -> Vec<Relation> {
    let mut out = Vec::new();
    for i in 1..objects.len() {
        let (a, b) = (objects[i - 1].position, objects[i].position);
        let kind = if a.row() == b.row() {
            Some(RelationKind::LeftOf)
        } else if a.col() == b.col() {
            Some(RelationKind::Above)
        } else if b.row() == a.row() + 1 && a.col().abs_diff(b.col()) == 1 {
            Some(RelationKind::NextTo)
        } else {
            None
        };
        if let Some(kind) = kind {
            out.push(Relation {
                subject: i - 1,
                kind,
                object: i,
            });
        }
    }
    out
}

/// Samples a scene: object count uniform in `1..=max_objects`, distinct
/// cells and categories, uniform colours and sizes.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = substream(seed, Stream::Scene, 0);
    let count = rng.random_range(1..=config.max_objects);
    let cells = sample(&mut rng, Cell::COUNT, count);
    let categories = sample(&mut rng, Category::COUNT, count);
    let objects = cells
        .iter()
        .zip(categories.iter())
        .map(|(cell, cat)| ObjectInstance {
            category: Category(cat as u8),
            color: Color(rng.random_range(0..Color::COUNT) as u8),
            size: Size::ALL[rng.random_range(0..Size::COUNT)],
            position: Cell(cell as u8),
        })
        .collect();
    Scene::from_objects(seed, objects)
}
