//! Spatial-relation questions ("is X left of Y?") over rendered glyph scenes,
//! with a compositional split: training restricts each left-hand glyph to
//! `k` right-hand partners, testing asks about every pair.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Relation> {
        Self::ALL.get(id).copied()
    }

    /// Whether `x` at `(row, col)` stands in this relation to `y`.
    pub fn holds(self, x: (usize, usize), y: (usize, usize)) -> bool {
        match self {
            Relation::LeftOf => x.1 < y.1,
            Relation::RightOf => x.1 > y.1,
            Relation::Above => x.0 < y.0,
            Relation::Below => x.0 > y.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// One channel; glyphs drawn as binary patterns.
    #[default]
    Grayscale,
    /// One channel per glyph, each glyph's patch filled with ones.
    OneHot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SqoopConfig {
    pub alphabet: usize,
    /// Cells per side of the square placement grid.
    pub grid: usize,
    /// Pixels per cell side.
    pub cell_px: usize,
    /// Pixels per glyph side; the glyph sits in the top-left of its cell.
    pub glyph_px: usize,
    pub objects_per_image: usize,
    /// Right-hand partners per left-hand glyph in the training questions.
    pub rhs_per_lhs: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    #[serde(default)]
    pub encoding: Encoding,
    pub seed: u64,
}

impl Default for SqoopConfig {
    fn default() -> Self {
        SqoopConfig {
            alphabet: 10,
            grid: 5,
            cell_px: 7,
            glyph_px: 7,
            objects_per_image: 5,
            rhs_per_lhs: 9,
            train_size: 10_000,
            val_size: 1000,
            test_size: 2000,
            encoding: Encoding::Grayscale,
            seed: 0,
        }
    }
}

impl SqoopConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.alphabet < 2 {
            return err(format!(
                "alphabet must be at least 2, got {}",
                self.alphabet
            ));
        }
        if self.rhs_per_lhs == 0 || self.rhs_per_lhs > self.alphabet - 1 {
            return err(format!(
                "rhs_per_lhs must satisfy 1 <= k <= alphabet - 1 = {}, got {}",
                self.alphabet - 1,
                self.rhs_per_lhs
            ));
        }
        if self.grid < 2 {
            return err(format!("grid must be at least 2, got {}", self.grid));
        }
        if self.objects_per_image < 2 || self.objects_per_image > self.grid * self.grid {
            return err(format!(
                "objects_per_image must lie in 2..={} (grid cells), got {}",
                self.grid * self.grid,
                self.objects_per_image
            ));
        }
        if self.objects_per_image > self.alphabet {
            return err(format!(
                "objects_per_image {} exceeds alphabet {} (glyphs are not repeated within an image)",
                self.objects_per_image, self.alphabet
            ));
        }
        if self.glyph_px == 0 || self.glyph_px > self.cell_px {
            return err(format!(
                "glyph_px must lie in 1..=cell_px, got {}",
                self.glyph_px
            ));
        }
        let patterns = 1u128
            .checked_shl((self.glyph_px * self.glyph_px) as u32)
            .unwrap_or(u128::MAX)
            - 1;
        if (self.alphabet as u128) > patterns {
            return err(format!(
                "{}x{} glyphs admit only {patterns} distinct patterns",
                self.glyph_px, self.glyph_px
            ));
        }
        Ok(())
    }

    pub fn canvas(&self) -> usize {
        self.grid * self.cell_px
    }

    pub fn channels(&self) -> usize {
        match self.encoding {
            Encoding::Grayscale => 1,
            Encoding::OneHot => self.alphabet,
        }
    }

    /// Token vocabulary: glyph ids followed by relation ids.
    pub fn vocab_size(&self) -> usize {
        self.alphabet + Relation::ALL.len()
    }
}

/// A question `X R Y?` by ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub x: usize,
    pub relation: Relation,
    pub y: usize,
}

impl Triple {
    /// Question as `[x, relation, y]` ids.
    pub fn ids(&self) -> [usize; 3] {
        [self.x, self.relation.id(), self.y]
    }

    /// GRU tokens: relation ids are shifted past the glyph ids.
    pub fn tokens(&self, alphabet: usize) -> Vec<usize> {
        vec![self.x, alphabet + self.relation.id(), self.y]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub glyph: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SqoopSample {
    /// `[C, H, W]`
    pub image: Tensor,
    pub question: Triple,
    pub answer: bool,
    pub placements: Vec<Placement>,
}

impl SqoopSample {
    /// Recomputes the answer from the stored placements.
    pub fn oracle_answer(&self) -> Option<bool> {
        let find = |g| {
            self.placements
                .iter()
                .find(|p| p.glyph == g)
                .map(|p| (p.row, p.col))
        };
        Some(
            self.question
                .relation
                .holds(find(self.question.x)?, find(self.question.y)?),
        )
    }
}

#[derive(Clone, Debug)]
pub struct SqoopDataset {
    pub config: SqoopConfig,
    pub train: Vec<SqoopSample>,
    pub val: Vec<SqoopSample>,
    pub test: Vec<SqoopSample>,
    pub train_triples: Vec<Triple>,
    pub test_triples: Vec<Triple>,
}

/// Deterministic binary pattern per glyph, row-major `glyph_px^2`.
///
/// Patterns depend only on the glyph id and size, are never blank, and are
/// pairwise distinct.
pub fn glyph_patterns(alphabet: usize, glyph_px: usize) -> Vec<Vec<bool>> {
    let n = glyph_px * glyph_px;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ n as u64);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(alphabet);
    while out.len() < alphabet {
        let p: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if p.iter().any(|&b| b) && seen.insert(p.clone()) {
            out.push(p);
        }
    }
    out
}

/// Rasterizes glyph placements onto a blank canvas.
pub fn render_scene(cfg: &SqoopConfig, placements: &[Placement]) -> Result<Tensor> {
    render_with(cfg, &glyph_patterns(cfg.alphabet, cfg.glyph_px), placements)
}

fn render_with(
    cfg: &SqoopConfig,
    patterns: &[Vec<bool>],
    placements: &[Placement],
) -> Result<Tensor> {
    let side = cfg.canvas();
    let c = cfg.channels();
    let mut data = vec![0.0; c * side * side];
    let mut used = BTreeSet::new();
    for p in placements {
        if p.glyph >= cfg.alphabet {
            return Err(Error::IndexOutOfRange {
                index: p.glyph,
                extent: cfg.alphabet,
            });
        }
        if p.row >= cfg.grid || p.col >= cfg.grid {
            return Err(Error::Data(format!(
                "cell ({}, {}) outside {}x{} grid",
                p.row, p.col, cfg.grid, cfg.grid
            )));
        }
        if !used.insert((p.row, p.col)) {
            return Err(Error::Data(format!(
                "overlapping placements at cell ({}, {})",
                p.row, p.col
            )));
        }
        let channel = match cfg.encoding {
            Encoding::Grayscale => 0,
            Encoding::OneHot => p.glyph,
        };
        let g = cfg.glyph_px;
        for dy in 0..g {
            for dx in 0..g {
                let on = match cfg.encoding {
                    Encoding::Grayscale => patterns[p.glyph][dy * g + dx],
                    Encoding::OneHot => true,
                };
                if on {
                    let (y, x) = (p.row * cfg.cell_px + dy, p.col * cfg.cell_px + dx);
                    data[(channel * side + y) * side + x] = 1.0;
                }
            }
        }
    }
    Tensor::new([c, side, side], data)
}

/// Right-hand partners per left-hand glyph: with a seeded permutation `pi`,
/// glyph `pi[i]` pairs with `pi[i+1], ..., pi[i+k]` (cyclically), so every
/// glyph is also some glyph's partner and nothing pairs with itself.
pub fn partner_table(alphabet: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..alphabet).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut table = vec![Vec::new(); alphabet];
    for i in 0..alphabet {
        let mut partners: Vec<usize> = (1..=k).map(|j| perm[(i + j) % alphabet]).collect();
        partners.sort_unstable();
        table[perm[i]] = partners;
    }
    table
}

pub fn train_triples(cfg: &SqoopConfig) -> Vec<Triple> {
    let table = partner_table(cfg.alphabet, cfg.rhs_per_lhs, cfg.seed);
    let mut out = Vec::new();
    for (x, partners) in table.iter().enumerate() {
        for &relation in &Relation::ALL {
            for &y in partners {
                out.push(Triple { x, relation, y });
            }
        }
    }
    out
}

pub fn test_triples(cfg: &SqoopConfig) -> Vec<Triple> {
    let mut out = Vec::new();
    for x in 0..cfg.alphabet {
        for &relation in &Relation::ALL {
            for y in (0..cfg.alphabet).filter(|&y| y != x) {
                out.push(Triple { x, relation, y });
            }
        }
    }
    out
}

fn draw_placements<R: Rng + ?Sized>(
    cfg: &SqoopConfig,
    q: Triple,
    answer: bool,
    rng: &mut R,
) -> Vec<Placement> {
    let cells = cfg.grid * cfg.grid;
    let cell = |i: usize| (i / cfg.grid, i % cfg.grid);
    // A grid of side >= 2 always has cell pairs with either answer.
    let (cx, cy) = loop {
        let a = rng.random_range(0..cells);
        let b = rng.random_range(0..cells);
        if a != b && q.relation.holds(cell(a), cell(b)) == answer {
            break (a, b);
        }
    };
    let mut free: Vec<usize> = (0..cells).filter(|&i| i != cx && i != cy).collect();
    free.shuffle(rng);
    let mut others: Vec<usize> = (0..cfg.alphabet)
        .filter(|&g| g != q.x && g != q.y)
        .collect();
    others.shuffle(rng);
    let mut placements = vec![
        Placement {
            glyph: q.x,
            row: cell(cx).0,
            col: cell(cx).1,
        },
        Placement {
            glyph: q.y,
            row: cell(cy).0,
            col: cell(cy).1,
        },
    ];
    for (g, c) in others.into_iter().zip(free).take(cfg.objects_per_image - 2) {
        placements.push(Placement {
            glyph: g,
            row: cell(c).0,
            col: cell(c).1,
        });
    }
    placements.sort_by_key(|p| (p.row, p.col));
    placements
}

/// `size` samples as yes/no pairs over questions drawn uniformly from `triples`.
fn gen_split(
    cfg: &SqoopConfig,
    patterns: &[Vec<bool>],
    triples: &[Triple],
    size: usize,
    stream: u64,
) -> Result<Vec<SqoopSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let q = *triples.choose(&mut rng).expect("triple set is non-empty");
        for answer in [true, false] {
            if out.len() == size {
                break;
            }
            let placements = draw_placements(cfg, q, answer, &mut rng);
            out.push(SqoopSample {
                image: render_with(cfg, patterns, &placements)?,
                question: q,
                answer,
                placements,
            });
        }
    }
    Ok(out)
}

pub fn gen_sqoop(cfg: &SqoopConfig) -> Result<SqoopDataset> {
    cfg.validate()?;
    let patterns = glyph_patterns(cfg.alphabet, cfg.glyph_px);
    let train_triples = train_triples(cfg);
    let test_triples = test_triples(cfg);
    Ok(SqoopDataset {
        train: gen_split(cfg, &patterns, &train_triples, cfg.train_size, 1)?,
        val: gen_split(cfg, &patterns, &train_triples, cfg.val_size, 2)?,
        test: gen_split(cfg, &patterns, &test_triples, cfg.test_size, 3)?,
        config: cfg.clone(),
        train_triples,
        test_triples,
    })
}

/// Stacks samples into `[N, C, H, W]` images, GRU token sequences and labels.
pub fn batch(
    samples: &[&SqoopSample],
    alphabet: usize,
) -> Result<(Tensor, Vec<Vec<usize>>, Vec<usize>)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let images = Tensor::stack(&images)?;
    let tokens = samples
        .iter()
        .map(|s| s.question.tokens(alphabet))
        .collect();
    let labels = samples.iter().map(|s| s.answer as usize).collect();
    Ok((images, tokens, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SqoopConfig {
        SqoopConfig {
            alphabet: 3,
            grid: 3,
            cell_px: 2,
            glyph_px: 2,
            objects_per_image: 3,
            rhs_per_lhs: 1,
            train_size: 20,
            val_size: 6,
            test_size: 10,
            encoding: Encoding::Grayscale,
            seed: 5,
        }
    }

    #[test]
    fn single_glyph_stays_in_its_cell() {
        let cfg = small();
        let img = render_scene(
            &cfg,
            &[Placement {
                glyph: 1,
                row: 0,
                col: 0,
            }],
        )
        .unwrap();
        for y in 0..6 {
            for x in 0..6 {
                if y >= 2 || x >= 2 {
                    assert_eq!(img.get(&[0, y, x]), Some(0.0));
                }
            }
        }
        assert!(img.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn overlap_rejected() {
        let p = Placement {
            glyph: 0,
            row: 1,
            col: 1,
        };
        let q = Placement {
            glyph: 2,
            row: 1,
            col: 1,
        };
        assert!(render_scene(&small(), &[p, q]).is_err());
    }

    #[test]
    fn k_out_of_range_names_constraint() {
        let cfg = SqoopConfig {
            rhs_per_lhs: 3,
            ..small()
        };
        let msg = gen_sqoop(&cfg).unwrap_err().to_string();
        assert!(msg.contains("rhs_per_lhs"), "{msg}");
    }

    #[test]
    fn partners_exclude_self_and_cover_all() {
        for k in 1..6 {
            let t = partner_table(6, k, 11);
            let mut rhs = BTreeSet::new();
            for (x, ps) in t.iter().enumerate() {
                assert_eq!(ps.len(), k);
                assert!(!ps.contains(&x));
                rhs.extend(ps.iter().copied());
            }
            assert_eq!(rhs.len(), 6);
        }
    }

    #[test]
    fn pairs_are_balanced() {
        let d = gen_sqoop(&small()).unwrap();
        let yes = d.train.iter().filter(|s| s.answer).count();
        assert_eq!(yes, 10);
    }
}
