//! JSON-lines dataset files with a sidecar `manifest.json`.
//!
//! Pixels are stored as base64 of row-major little-endian `f32`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::fewshot::{gen_fewshot_universe, FewShotConfig, FewShotPool};
use super::sqoop::{self, Placement, Relation, SqoopConfig, SqoopDataset, SqoopSample, Triple};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn encode_pixels(t: &Tensor) -> String {
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    STANDARD.encode(bytes)
}

pub fn decode_pixels(s: &str, shape: &[usize]) -> Result<Tensor> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::Data(format!("bad base64 image: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Data(
            "image byte length is not a multiple of 4".into(),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape.to_vec(), data)
}

#[derive(Serialize, Deserialize)]
struct SqoopLine {
    image: String,
    shape: Vec<usize>,
    question: [usize; 3],
    answer: u8,
    coords: Vec<[usize; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqoopManifest {
    pub kind: String,
    pub seed: u64,
    pub config: SqoopConfig,
    pub splits: SplitSizes,
    pub train_triples: usize,
    pub test_triples: usize,
    pub vocab_size: usize,
}

#[derive(Serialize, Deserialize)]
struct FewShotLine {
    image: String,
    shape: Vec<usize>,
    label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotManifest {
    pub kind: String,
    pub seed: u64,
    pub config: FewShotConfig,
    pub splits: SplitSizes,
    pub train_classes: Vec<usize>,
    pub val_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_lines<T: Serialize>(path: &Path, lines: impl Iterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for line in lines {
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn sqoop_manifest(d: &SqoopDataset) -> SqoopManifest {
    SqoopManifest {
        kind: "sqoop".into(),
        seed: d.config.seed,
        config: d.config.clone(),
        splits: SplitSizes {
            train: d.train.len(),
            val: d.val.len(),
            test: d.test.len(),
        },
        train_triples: d.train_triples.len(),
        test_triples: d.test_triples.len(),
        vocab_size: d.config.vocab_size(),
    }
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and `manifest.json`.
pub fn write_sqoop(d: &SqoopDataset, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    for (name, split) in [("train", &d.train), ("val", &d.val), ("test", &d.test)] {
        let lines = split.iter().map(|s| SqoopLine {
            image: encode_pixels(&s.image),
            shape: s.image.shape().to_vec(),
            question: s.question.ids(),
            answer: s.answer as u8,
            coords: s
                .placements
                .iter()
                .map(|p| [p.glyph, p.row, p.col])
                .collect(),
        });
        write_lines(&dir.join(format!("{name}.jsonl")), lines)?;
    }
    write_json(&dir.join("manifest.json"), &sqoop_manifest(d))
}

fn parse_sqoop_line(line: SqoopLine) -> Result<SqoopSample> {
    let [x, r, y] = line.question;
    let relation =
        Relation::from_id(r).ok_or_else(|| Error::Data(format!("unknown relation id {r}")))?;
    if line.answer > 1 {
        return Err(Error::Data(format!(
            "answer must be 0 or 1, got {}",
            line.answer
        )));
    }
    Ok(SqoopSample {
        image: decode_pixels(&line.image, &line.shape)?,
        question: Triple { x, relation, y },
        answer: line.answer == 1,
        placements: line
            .coords
            .iter()
            .map(|&[glyph, row, col]| Placement { glyph, row, col })
            .collect(),
    })
}

pub fn read_sqoop(dir: &Path) -> Result<SqoopDataset> {
    let manifest: SqoopManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.kind != "sqoop" {
        return Err(Error::Data(format!(
            "manifest kind is {:?}, expected \"sqoop\"",
            manifest.kind
        )));
    }
    let load = |name: &str| -> Result<Vec<SqoopSample>> {
        read_lines::<SqoopLine>(&dir.join(format!("{name}.jsonl")))?
            .into_iter()
            .map(parse_sqoop_line)
            .collect()
    };
    let config = manifest.config;
    Ok(SqoopDataset {
        train: load("train")?,
        val: load("val")?,
        test: load("test")?,
        train_triples: sqoop::train_triples(&config),
        test_triples: sqoop::test_triples(&config),
        config,
    })
}

/// Writes `pool.jsonl` (class-major) and `manifest.json`.
pub fn write_fewshot(pool: &FewShotPool, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let lines = pool.images.iter().enumerate().flat_map(|(label, class)| {
        class.iter().map(move |t| FewShotLine {
            image: encode_pixels(t),
            shape: t.shape().to_vec(),
            label,
        })
    });
    write_lines(&dir.join("pool.jsonl"), lines)?;
    let per = pool.config.per_class;
    let manifest = FewShotManifest {
        kind: "fewshot".into(),
        seed: pool.config.seed,
        config: pool.config.clone(),
        splits: SplitSizes {
            train: pool.train.len() * per,
            val: pool.val.len() * per,
            test: pool.test.len() * per,
        },
        train_classes: pool.train.clone(),
        val_classes: pool.val.clone(),
        test_classes: pool.test.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_fewshot(dir: &Path) -> Result<FewShotPool> {
    let manifest: FewShotManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.kind != "fewshot" {
        return Err(Error::Data(format!(
            "manifest kind is {:?}, expected \"fewshot\"",
            manifest.kind
        )));
    }
    let cfg = manifest.config;
    let mut images = vec![Vec::new(); cfg.n_classes];
    for line in read_lines::<FewShotLine>(&dir.join("pool.jsonl"))? {
        let slot = images.get_mut(line.label).ok_or(Error::IndexOutOfRange {
            index: line.label,
            extent: cfg.n_classes,
        })?;
        slot.push(decode_pixels(&line.image, &line.shape)?);
    }
    // class specs are not stored; regenerate them from the config
    let classes = gen_fewshot_universe(&FewShotConfig {
        per_class: 1,
        ..cfg.clone()
    })?
    .classes;
    Ok(FewShotPool {
        config: cfg,
        classes,
        images,
        train: manifest.train_classes,
        val: manifest.val_classes,
        test: manifest.test_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixels_round_trip() {
        let t = Tensor::new([1, 2, 2], vec![0.0, 1.0, -0.5, 0.25]).unwrap();
        let back = decode_pixels(&encode_pixels(&t), &[1, 2, 2]).unwrap();
        assert_eq!(back, t);
        assert!(decode_pixels("AAAA", &[2]).is_err());
    }
}
