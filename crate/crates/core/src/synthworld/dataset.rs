//! Line-delimited scene dataset.
//!
//! ```text
//! # eoslab-scenes v1
//! # seed<TAB>objects<TAB>short<TAB>full
//! 42<TAB>cat:red:small:top-left,dog:blue:large:center<TAB>a cat . <eos><TAB>a cat red ...
//! ```
//!
//! Objects are `category:color:size:position`, comma-separated, in canonical
//! order. Captions are space-separated token strings. Relations are not
//! stored; they are re-derived from the objects.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::grammar::{describe, Caption, DetailLevel};
use super::scene::{ObjectInstance, Scene};
use super::vocab::{TokenClass, Vocabulary};
use crate::error::{Error, Result};

pub const DATASET_HEADER: &str = "# eoslab-scenes v1\n# seed\tobjects\tshort\tfull\n";

/// A scene with both reference captions.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub scene: Scene,
    pub short: Caption,
    pub full: Caption,
}

impl Sample {
    pub fn from_scene(scene: Scene) -> Self {
        let short = describe(&scene, DetailLevel::Short);
        let full = describe(&scene, DetailLevel::Full);
        Self { scene, short, full }
    }

    fn to_line(&self) -> String {
        let objects = self
            .scene
            .objects
            .iter()
            .map(|o| {
                format!(
                    "{}:{}:{}:{}",
                    o.category.name(),
                    o.color.name(),
                    o.size.name(),
                    o.position.name()
                )
            })
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "{}\t{}\t{}\t{}",
            self.scene.seed,
            objects,
            self.short.render(),
            self.full.render()
        )
    }

    fn from_line(line: &str, lineno: usize) -> Result<Self> {
        let bad = |what: &str| Error::Data(format!("line {lineno}: {what}"));
        let fields: Vec<&str> = line.split('\t').collect();
        let [seed, objects, short, full] = fields[..] else {
            return Err(bad(&format!("expected 4 tab-separated fields, got {}", fields.len())));
        };
        let seed: u64 = seed.parse().map_err(|_| bad("seed is not an integer"))?;
        let vocab = Vocabulary::standard();
        let mut parsed = Vec::new();
        for obj in objects.split(',') {
            let parts: Vec<&str> = obj.split(':').collect();
            let [cat, color, size, pos] = parts[..] else {
                return Err(bad(&format!("malformed object `{obj}`")));
            };
            let class = |word: &str| {
                vocab
                    .id(word)
                    .and_then(Vocabulary::classify)
                    .ok_or_else(|| bad(&format!("unknown token `{word}`")))
            };
            let (
                TokenClass::Category(category),
                TokenClass::Color(color),
                TokenClass::Size(size),
                TokenClass::Position(position),
            ) = (class(cat)?, class(color)?, class(size)?, class(pos)?)
            else {
                return Err(bad(&format!("object fields out of order in `{obj}`")));
            };
            parsed.push(ObjectInstance {
                category,
                color,
                size,
                position,
            });
        }
        let scene = Scene::from_objects(seed, parsed).map_err(|e| bad(&e.to_string()))?;
        let caption = |text: &str| -> Result<Caption> {
            let toks = vocab
                .encode(text)
                .ok_or_else(|| bad(&format!("unknown token in caption `{text}`")))?;
            Caption::new(toks)
        };
        let sample = Sample {
            scene,
            short: caption(short)?,
            full: caption(full)?,
        };
        let expected = Sample::from_scene(sample.scene.clone());
        if expected != sample {
            return Err(bad("captions do not match the scene"));
        }
        Ok(sample)
    }
}

pub fn write_samples<W: Write>(mut out: W, samples: &[Sample]) -> std::io::Result<()> {
    out.write_all(DATASET_HEADER.as_bytes())?;
    for s in samples {
        writeln!(out, "{}", s.to_line())?;
    }
    out.flush()
}

pub fn read_samples<R: Read>(input: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line.map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        if i == 0 && line.trim() != DATASET_HEADER.lines().next().unwrap_or_default() {
            return Err(Error::Data(format!("missing header, found `{line}`")));
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        out.push(Sample::from_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_samples(BufWriter::new(file), samples).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_samples(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::scene::{generate_scene, SceneConfig};

    fn samples(n: u64) -> Vec<Sample> {
        (0..n)
            .map(|s| Sample::from_scene(generate_scene(s * 31 + 5, &SceneConfig::default()).unwrap()))
            .collect()
    }

    #[test]
    fn round_trip() {
        let data = samples(200);
        let mut buf = Vec::new();
        write_samples(&mut buf, &data).unwrap();
        let back = read_samples(&buf[..]).unwrap();
        assert_eq!(back, data);
        let mut again = Vec::new();
        write_samples(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn empty_dataset_has_header_only() {
        let mut buf = Vec::new();
        write_samples(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), DATASET_HEADER);
        assert!(read_samples(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn rejects_tampered_lines() {
        let data = samples(1);
        let mut buf = Vec::new();
        write_samples(&mut buf, &data).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let tampered = text.replacen("<eos>\t", "\t", 1);
        assert!(read_samples(tampered.as_bytes()).is_err());
        assert!(read_samples("no header\n".as_bytes()).is_err());
        let bad_seed = format!("{DATASET_HEADER}x\ta\tb\tc\n");
        assert!(read_samples(bad_seed.as_bytes()).is_err());
    }
}
