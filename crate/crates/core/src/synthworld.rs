//! Synthetic image–text universe with a known compatibility relation.
//!
//! Images carry a set of latent concepts, texts describe a subset of the
//! concepts of the image they were written for. A text is a valid description
//! of an image iff its concepts are a subset of the image's concepts, which
//! makes the full relation `R` enumerable and every false negative exactly
//! identifiable.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{cosine, norm};
use crate::rng::{stream, Stream, StreamRng};

pub const WORLD_FORMAT: &str = "negmine-world";
pub const WORLD_VERSION: u32 = 1;

/// Bitset of concept ids. Worlds are limited to 64 concepts.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "Vec<usize>", try_from = "Vec<usize>")]
pub struct ConceptSet(u64);

impl ConceptSet {
    pub const MAX_CONCEPTS: usize = 64;

    pub fn empty() -> Self {
        ConceptSet(0)
    }

    pub fn insert(&mut self, c: usize) {
        assert!(c < Self::MAX_CONCEPTS, "concept id {c} exceeds bitset width");
        self.0 |= 1 << c;
    }

    pub fn contains(self, c: usize) -> bool {
        c < Self::MAX_CONCEPTS && self.0 & (1 << c) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset_of(self, other: ConceptSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..Self::MAX_CONCEPTS).filter(move |&c| self.contains(c))
    }

    pub fn bits(self) -> u64 {
        self.0
    }
}

impl FromIterator<usize> for ConceptSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut s = ConceptSet::empty();
        for c in iter {
            s.insert(c);
        }
        s
    }
}

impl From<ConceptSet> for Vec<usize> {
    fn from(s: ConceptSet) -> Self {
        s.iter().collect()
    }
}

impl TryFrom<Vec<usize>> for ConceptSet {
    type Error = String;

    fn try_from(v: Vec<usize>) -> std::result::Result<Self, String> {
        if let Some(bad) = v.iter().find(|&&c| c >= Self::MAX_CONCEPTS) {
            return Err(format!("concept id {bad} out of range"));
        }
        Ok(v.into_iter().collect())
    }
}

impl fmt::Debug for ConceptSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub n_concepts: usize,
    pub n_images: usize,
    pub n_texts: usize,
    /// Trailing images (and the texts labeled with them) held out for retrieval evaluation.
    pub n_eval_images: usize,
    pub d_latent: usize,
    pub d_img: usize,
    pub k_text: usize,
    pub vocab: usize,
    pub noise: f64,
    pub max_concepts_per_image: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_concepts: 12,
            n_images: 1200,
            n_texts: 1200,
            n_eval_images: 240,
            d_latent: 32,
            d_img: 32,
            k_text: 12,
            vocab: 64,
            noise: 0.1,
            max_concepts_per_image: 3,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("world.n_concepts", self.n_concepts),
            ("world.n_images", self.n_images),
            ("world.n_texts", self.n_texts),
            ("world.d_latent", self.d_latent),
            ("world.d_img", self.d_img),
            ("world.k_text", self.k_text),
            ("world.max_concepts_per_image", self.max_concepts_per_image),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.n_concepts > ConceptSet::MAX_CONCEPTS {
            return bad(format!(
                "world.n_concepts = {} exceeds the supported maximum of {}",
                self.n_concepts,
                ConceptSet::MAX_CONCEPTS
            ));
        }
        if self.vocab <= self.n_concepts {
            return bad(format!(
                "world.vocab = {} leaves no filler tokens beyond {} concept tokens",
                self.vocab, self.n_concepts
            ));
        }
        if self.max_concepts_per_image > self.n_concepts {
            return bad("world.max_concepts_per_image exceeds world.n_concepts".into());
        }
        if self.k_text < self.max_concepts_per_image {
            return bad("world.k_text must fit max_concepts_per_image concept tokens".into());
        }
        if self.n_eval_images >= self.n_images {
            return bad("world.n_eval_images must leave at least one training image".into());
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("world.noise must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn n_train_images(&self) -> usize {
        self.n_images - self.n_eval_images
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: usize,
    pub prototype: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageItem {
    pub id: usize,
    pub concepts: ConceptSet,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextItem {
    pub id: usize,
    pub concepts: ConceptSet,
    pub tokens: Vec<u32>,
    /// The single image this text is labeled with.
    pub positive_image: usize,
}

impl TextItem {
    /// Concept ids recovered from the token sequence.
    pub fn decode_concepts(&self, n_concepts: usize) -> ConceptSet {
        self.tokens
            .iter()
            .map(|&t| t as usize)
            .filter(|&t| t < n_concepts)
            .collect()
    }
}

/// True iff `t` is a valid description of `v`.
pub fn is_compatible(v: &ImageItem, t: &TextItem) -> bool {
    t.concepts.is_subset_of(v.concepts)
}

/// A labeled (image, text) training or evaluation pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub image: usize,
    pub text: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticUniverse {
    pub config: WorldConfig,
    pub seed: u64,
    pub concepts: Vec<Concept>,
    pub images: Vec<ImageItem>,
    pub texts: Vec<TextItem>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationStats {
    pub n_images: usize,
    pub n_texts: usize,
    pub relation: usize,
    pub positives: usize,
    pub rho: f64,
    pub kappa: f64,
}

impl RelationStats {
    /// Exact `Pr[false negative]` for a uniform draw from `(V×T) ∖ P`, as a
    /// count ratio `(|R| − |P|, |V||T| − |P|)`.
    pub fn fn_fraction(&self) -> (usize, usize) {
        (
            self.relation - self.positives,
            self.n_images * self.n_texts - self.positives,
        )
    }
}

/// Full-enumeration relation statistics over explicit concept sets.
/// `positives` are (image, text) index pairs into the given slices.
pub fn relation_stats_of(
    images: &[ConceptSet],
    texts: &[ConceptSet],
    positives: &[(usize, usize)],
) -> Result<RelationStats> {
    let mut relation = 0usize;
    for t in texts {
        relation += images.iter().filter(|v| t.is_subset_of(**v)).count();
    }
    if relation == 0 {
        return Err(Error::DegenerateUniverse(
            "relation R is empty, label coverage is undefined".into(),
        ));
    }
    let mut labeled: Vec<(usize, usize)> = positives.to_vec();
    labeled.sort_unstable();
    labeled.dedup();
    let total = images.len() * texts.len();
    Ok(RelationStats {
        n_images: images.len(),
        n_texts: texts.len(),
        relation,
        positives: labeled.len(),
        rho: relation as f64 / total as f64,
        kappa: labeled.len() as f64 / relation as f64,
    })
}

pub fn relation_stats(u: &SemanticUniverse) -> Result<RelationStats> {
    let images: Vec<ConceptSet> = u.images.iter().map(|v| v.concepts).collect();
    let texts: Vec<ConceptSet> = u.texts.iter().map(|t| t.concepts).collect();
    relation_stats_of(&images, &texts, &u.positives())
}

fn random_prototypes(cfg: &WorldConfig, rng: &mut StreamRng) -> Result<Vec<Concept>> {
    const MAX_TRIES: usize = 10_000;
    let mut out: Vec<Concept> = Vec::with_capacity(cfg.n_concepts);
    let mut tries = 0;
    while out.len() < cfg.n_concepts {
        tries += 1;
        if tries > MAX_TRIES {
            return Err(Error::Config(format!(
                "could not place {} distinct prototypes in {} dimensions",
                cfg.n_concepts, cfg.d_latent
            )));
        }
        let mut p: Vec<f64> = (0..cfg.d_latent)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let n = norm(&p);
        if n == 0.0 {
            continue;
        }
        p.iter_mut().for_each(|x| *x /= n);
        if out.iter().all(|c| cosine(&c.prototype, &p) < 0.95) {
            out.push(Concept {
                id: out.len(),
                prototype: p,
            });
        }
    }
    Ok(out)
}

pub fn generate_universe(config: &WorldConfig, seed: u64) -> Result<SemanticUniverse> {
    config.validate()?;
    let mut rng = stream(seed, Stream::World);
    let concepts = random_prototypes(config, &mut rng)?;

    // Identity when the latent and feature widths agree, else a fixed Gaussian map.
    let projection: Option<Vec<Vec<f64>>> = (config.d_img != config.d_latent).then(|| {
        let s = 1.0 / (config.d_latent as f64).sqrt();
        (0..config.d_img)
            .map(|_| {
                (0..config.d_latent)
                    .map(|_| s * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    });

    let all_concepts: Vec<usize> = (0..config.n_concepts).collect();
    let mut images = Vec::with_capacity(config.n_images);
    for id in 0..config.n_images {
        let k = rng.gen_range(1..=config.max_concepts_per_image);
        let chosen: ConceptSet = all_concepts.choose_multiple(&mut rng, k).copied().collect();
        let mut latent = vec![0.0; config.d_latent];
        for c in chosen.iter() {
            for (l, p) in latent.iter_mut().zip(&concepts[c].prototype) {
                *l += p;
            }
        }
        let mut feature = match &projection {
            None => latent,
            Some(rows) => rows.iter().map(|r| crate::linalg::dot(r, &latent)).collect(),
        };
        for f in feature.iter_mut() {
            *f += config.noise * rng.sample::<f64, _>(StandardNormal);
        }
        images.push(ImageItem {
            id,
            concepts: chosen,
            feature,
        });
    }

    let filler = config.n_concepts as u32..config.vocab as u32;
    let mut texts = Vec::with_capacity(config.n_texts);
    for id in 0..config.n_texts {
        let positive_image = id % config.n_images;
        let owner: Vec<usize> = images[positive_image].concepts.iter().collect();
        let k = rng.gen_range(1..=owner.len());
        let subset: ConceptSet = owner.choose_multiple(&mut rng, k).copied().collect();
        // Concept tokens first in ascending order, filler after.
        let mut tokens: Vec<u32> = subset.iter().map(|c| c as u32).collect();
        while tokens.len() < config.k_text {
            tokens.push(rng.gen_range(filler.clone()));
        }
        texts.push(TextItem {
            id,
            concepts: subset,
            tokens,
            positive_image,
        });
    }

    Ok(SemanticUniverse {
        config: config.clone(),
        seed,
        concepts,
        images,
        texts,
    })
}

#[derive(Serialize, Deserialize)]
struct WorldHeader {
    format: String,
    version: u32,
    seed: u64,
    config: WorldConfig,
    stats: Option<RelationStats>,
    train_stats: Option<RelationStats>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum WorldRecord {
    Concept(Concept),
    Image(ImageItem),
    Text(TextItem),
}

impl SemanticUniverse {
    pub fn positives(&self) -> Vec<(usize, usize)> {
        self.texts.iter().map(|t| (t.positive_image, t.id)).collect()
    }

    pub fn is_eval_image(&self, image: usize) -> bool {
        image >= self.config.n_train_images()
    }

    /// Labeled pairs whose image belongs to the training split, in text order.
    pub fn train_pairs(&self) -> Vec<Pair> {
        self.split_pairs(false)
    }

    /// Labeled pairs held out for evaluation, in text order.
    pub fn eval_pairs(&self) -> Vec<Pair> {
        self.split_pairs(true)
    }

    fn split_pairs(&self, eval: bool) -> Vec<Pair> {
        self.texts
            .iter()
            .filter(|t| self.is_eval_image(t.positive_image) == eval)
            .map(|t| Pair {
                image: t.positive_image,
                text: t.id,
            })
            .collect()
    }

    /// Relation statistics restricted to the images and texts of the given pairs.
    pub fn pair_stats(&self, pairs: &[Pair]) -> Result<RelationStats> {
        let mut img_ids: Vec<usize> = pairs.iter().map(|p| p.image).collect();
        img_ids.sort_unstable();
        img_ids.dedup();
        let images: Vec<ConceptSet> = img_ids.iter().map(|&i| self.images[i].concepts).collect();
        let texts: Vec<ConceptSet> = pairs.iter().map(|p| self.texts[p.text].concepts).collect();
        let positives: Vec<(usize, usize)> = pairs
            .iter()
            .enumerate()
            .map(|(ti, p)| (img_ids.binary_search(&p.image).unwrap(), ti))
            .collect();
        relation_stats_of(&images, &texts, &positives)
    }

    /// `(image, text)` is compatible but not the text's labeled positive.
    pub fn is_false_negative(&self, image: usize, text: usize) -> bool {
        let t = &self.texts[text];
        t.positive_image != image && is_compatible(&self.images[image], t)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let bytes = self.to_jsonl_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn to_jsonl_bytes(&self) -> Result<Vec<u8>> {
        let header = WorldHeader {
            format: WORLD_FORMAT.into(),
            version: WORLD_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            stats: relation_stats(self).ok(),
            train_stats: self.pair_stats(&self.train_pairs()).ok(),
        };
        let mut buf = BufWriter::new(Vec::new());
        let enc = |e: serde_json::Error| Error::Config(format!("world serialization failed: {e}"));
        serde_json::to_writer(&mut buf, &header).map_err(enc)?;
        buf.write_all(b"\n").expect("in-memory write");
        let records = self
            .concepts
            .iter()
            .cloned()
            .map(WorldRecord::Concept)
            .chain(self.images.iter().cloned().map(WorldRecord::Image))
            .chain(self.texts.iter().cloned().map(WorldRecord::Text));
        for r in records {
            serde_json::to_writer(&mut buf, &r).map_err(enc)?;
            buf.write_all(b"\n").expect("in-memory write");
        }
        Ok(buf.into_inner().expect("in-memory flush"))
    }

    pub fn read_jsonl(path: &Path) -> Result<SemanticUniverse> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let bad = |d: String| Error::format(path, d);
        let first = lines
            .next()
            .ok_or_else(|| bad("empty world file".into()))?
            .map_err(|e| Error::io(path, e))?;
        let header: WorldHeader =
            serde_json::from_str(&first).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != WORLD_FORMAT || header.version != WORLD_VERSION {
            return Err(bad(format!(
                "unsupported world format {} v{}",
                header.format, header.version
            )));
        }
        header.config.validate()?;
        let mut u = SemanticUniverse {
            config: header.config,
            seed: header.seed,
            concepts: Vec::new(),
            images: Vec::new(),
            texts: Vec::new(),
        };
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: WorldRecord = serde_json::from_str(&line)
                .map_err(|e| bad(format!("line {}: {e}", lineno + 2)))?;
            match rec {
                WorldRecord::Concept(c) => u.concepts.push(c),
                WorldRecord::Image(i) => u.images.push(i),
                WorldRecord::Text(t) => u.texts.push(t),
            }
        }
        let cfg = &u.config;
        if u.concepts.len() != cfg.n_concepts
            || u.images.len() != cfg.n_images
            || u.texts.len() != cfg.n_texts
        {
            return Err(bad("record counts disagree with header config".into()));
        }
        for (i, img) in u.images.iter().enumerate() {
            if img.id != i || img.feature.len() != cfg.d_img {
                return Err(bad(format!("image record {i} is inconsistent")));
            }
        }
        for (i, t) in u.texts.iter().enumerate() {
            if t.id != i || t.tokens.len() != cfg.k_text || t.positive_image >= cfg.n_images {
                return Err(bad(format!("text record {i} is inconsistent")));
            }
            if t.tokens.iter().any(|&k| k as usize >= cfg.vocab) {
                return Err(bad(format!("text record {i} has out-of-vocabulary tokens")));
            }
        }
        Ok(u)
    }

    /// SHA-256 of the canonical serialized form.
    pub fn content_hash(&self) -> Result<String> {
        let bytes = self.to_jsonl_bytes()?;
        Ok(hex_digest(&bytes))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
