//! Joint text/image embeddings, nearest-neighbour conditions and the
//! contrastive term that aligns learned condition projections with image
//! embeddings.
//!
//! [`ToyEmbedder`] is a deterministic stand-in for a frozen vision-language
//! encoder. It is not a language model: it only separates the procedural
//! scene classes. Stores written by an external exporter can be used
//! instead through [`PrecomputedEmbedder`].

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use panogen_autodiff::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::datapipe::{synth_pano, SceneClass, SceneSpec};
use crate::error::{Error, Result};
use crate::raster::{self, png8, Image};

pub const DEFAULT_DIM: usize = 64;

/// Source of unit-norm text and image embeddings in a shared space.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
    fn embed_image(&self, img: &Image) -> Result<Vec<f64>>;
}

pub fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    dot(a, b) / (na * nb)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hex SHA-256, used as a store key.
pub fn content_key(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if normalize(&mut v) > 0.0 {
            return v;
        }
    }
}

const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "of", "in", "on", "by", "with", "over", "under", "and", "to", "from", "near", "at",
];

const IMAGE_FEATURES: usize = 4 * 8 * 3 + 8;

/// Hashed bag-of-words text vectors and a fixed random projection of
/// coarse color/luminance statistics for images. Words from a scene
/// class's lexicon are tied to that class's mean image embedding, which is
/// what makes captions land near matching panoramas.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    dim: usize,
    seed: u64,
    projection: Vec<f64>,
    anchors: HashMap<SceneClass, Vec<f64>>,
}

impl ToyEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00e1_bedd);
        let scale = 1.0 / (dim as f64).sqrt();
        let projection = (0..IMAGE_FEATURES * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        let mut emb = ToyEmbedder {
            dim,
            seed,
            projection,
            anchors: HashMap::new(),
        };
        for class in SceneClass::ALL {
            let mut crng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(class.tag().as_bytes()));
            let mut mean = vec![0.0; dim];
            for _ in 0..4 {
                let spec = SceneSpec::random(class, &mut crng);
                let hdr = synth_pano(&spec, 32, 64).expect("valid aspect");
                let ldr = raster::reinhard_tonemap(&hdr, raster::Tonemap::Luminance);
                for (m, v) in mean.iter_mut().zip(emb.image_vector(&ldr)) {
                    *m += v;
                }
            }
            normalize(&mut mean);
            emb.anchors.insert(class, mean);
        }
        emb
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(token.as_bytes()));
        let noise = unit_gaussian(&mut rng, self.dim);
        let class = SceneClass::ALL
            .into_iter()
            .find(|c| c.lexicon().contains(&token));
        match class {
            Some(c) => {
                let mut v: Vec<f64> = self.anchors[&c]
                    .iter()
                    .zip(&noise)
                    .map(|(a, n)| a + 0.3 * n)
                    .collect();
                normalize(&mut v);
                v
            }
            None => noise,
        }
    }

    fn image_vector(&self, img: &Image) -> Vec<f64> {
        let mut feats = Vec::with_capacity(IMAGE_FEATURES);
        let small = raster::resample_area(img, 4, 8).expect("nonempty image");
        feats.extend(small.data.iter().map(|v| v.clamp(0.0, 1.0) - 0.5));
        let mut hist = [0.0; 8];
        for px in img.pixels() {
            let y = raster::luminance(px).clamp(0.0, 1.0);
            hist[((y * 8.0) as usize).min(7)] += 1.0;
        }
        let n = (img.height * img.width) as f64;
        feats.extend(hist.iter().map(|h| 2.0 * (h / n - 0.125)));
        let mut out = vec![0.0; self.dim];
        for (f, row) in feats.iter().zip(self.projection.chunks(self.dim)) {
            for (o, p) in out.iter_mut().zip(row) {
                *o += f * p;
            }
        }
        normalize(&mut out);
        out
    }
}

impl EmbeddingProvider for ToyEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let lower = text.to_lowercase();
        let tokens: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty() && !STOP_WORDS.contains(t))
            .collect();
        if tokens.is_empty() {
            return Err(Error::domain("embed_text", "text has no words"));
        }
        let mut acc = vec![0.0; self.dim];
        for t in tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v;
            }
        }
        normalize(&mut acc);
        Ok(acc)
    }

    fn embed_image(&self, img: &Image) -> Result<Vec<f64>> {
        if img.height == 0 || img.width == 0 {
            return Err(Error::domain("embed_image", "empty image"));
        }
        Ok(self.image_vector(img))
    }
}

/// Looks embeddings up in a store keyed by content hash: text by its UTF-8
/// bytes, images by the bytes of their 8-bit PNG encoding.
pub struct PrecomputedEmbedder {
    pub store: EmbeddingStore,
}

impl EmbeddingProvider for PrecomputedEmbedder {
    fn dim(&self) -> usize {
        self.store.dim()
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let key = content_key(text.as_bytes());
        self.store
            .get(&key)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::Data(format!("no stored embedding for text {text:?} (key {key})")))
    }

    fn embed_image(&self, img: &Image) -> Result<Vec<f64>> {
        let key = content_key(&png8::encode(img)?);
        self.store
            .get(&key)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::Data(format!("no stored embedding for image key {key}")))
    }
}

/// `Ĉ = (1−α)·v + α·ε·‖v‖/‖ε‖`, renormalized, with `ε` standard normal.
pub fn pseudo_text_feature(v: &[f64], alpha: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::domain("pseudo_text_feature", format!("alpha {alpha} outside [0, 1)")));
    }
    let eps = unit_gaussian(rng, v.len());
    Ok(pseudo_text_feature_with(v, alpha, &eps))
}

/// Deterministic core of [`pseudo_text_feature`] for a given noise vector.
pub fn pseudo_text_feature_with(v: &[f64], alpha: f64, noise: &[f64]) -> Vec<f64> {
    let nv = dot(v, v).sqrt();
    let ne = dot(noise, noise).sqrt();
    let mut c: Vec<f64> = v
        .iter()
        .zip(noise)
        .map(|(a, e)| (1.0 - alpha) * a + alpha * e * nv / ne)
        .collect();
    normalize(&mut c);
    c
}

pub const STORE_MAGIC: &[u8; 7] = b"T2LEMB1";

/// Keyed unit vectors with exact cosine nearest-neighbour search. Values
/// are held at 32-bit precision so saving and loading is lossless.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    keys: Vec<String>,
    data: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.index.get(key).map(|&i| self.vector(i))
    }

    /// Adds a record, rounding values to `f32`. Keys must be unique.
    pub fn insert(&mut self, key: &str, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::domain(
                "embedding_store",
                format!("vector of dim {} in a store of dim {}", v.len(), self.dim),
            ));
        }
        if self.index.contains_key(key) {
            return Err(Error::domain("embedding_store", format!("duplicate key {key}")));
        }
        self.index.insert(key.to_string(), self.keys.len());
        self.keys.push(key.to_string());
        self.data.extend(v.iter().map(|x| *x as f32 as f64));
        Ok(())
    }

    /// Indices and cosines of the `k` most similar entries, most similar
    /// first; ties go to the lexicographically smaller key.
    pub fn knn(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if k > self.len() {
            return Err(Error::domain(
                "knn",
                format!("asked for {k} neighbours from a store of {}", self.len()),
            ));
        }
        if query.len() != self.dim {
            return Err(Error::domain("knn", "query dimension mismatch"));
        }
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|i| (i, cosine(query, self.vector(i))))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| self.keys[a.0].cmp(&self.keys[b.0]))
        });
        scored.truncate(k);
        Ok(scored)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(15 + self.len() * (66 + 4 * self.dim));
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (i, key) in self.keys.iter().enumerate() {
            out.extend_from_slice(&(key.len() as u16).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            for v in self.vector(i) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let err = |msg: &str, record: usize, offset: usize| Error::Store {
            msg: msg.to_string(),
            record,
            offset: offset as u64,
        };
        if bytes.len() < 15 || &bytes[..7] != STORE_MAGIC {
            return Err(err("bad magic or short header", 0, 0));
        }
        let count = u32::from_le_bytes(bytes[7..11].try_into().expect("4")) as usize;
        let dim = u32::from_le_bytes(bytes[11..15].try_into().expect("4")) as usize;
        let mut store = EmbeddingStore::new(dim);
        let mut pos = 15;
        for rec in 0..count {
            if pos + 2 > bytes.len() {
                return Err(err("truncated key length", rec, pos));
            }
            let klen = u16::from_le_bytes(bytes[pos..pos + 2].try_into().expect("2")) as usize;
            pos += 2;
            if pos + klen + 4 * dim > bytes.len() {
                return Err(err("truncated record", rec, pos));
            }
            let key = std::str::from_utf8(&bytes[pos..pos + klen]).map_err(|_| err("key is not UTF-8", rec, pos))?;
            pos += klen;
            let v: Vec<f64> = bytes[pos..pos + 4 * dim]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4")) as f64)
                .collect();
            pos += 4 * dim;
            store.insert(key, &v).map_err(|e| err(&e.to_string(), rec, pos))?;
        }
        if pos != bytes.len() {
            return Err(err("trailing bytes after last record", count, pos));
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }
}

/// Condition vectors in sampler order: `K` neighbours, then the text slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub vectors: Vec<Vec<f64>>,
}

impl ConditionBundle {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn text_slot(&self) -> &[f64] {
        self.vectors.last().expect("bundle has a text slot")
    }
}

/// `[top-K store vectors by cosine to query…, query]`. With `k = 0` only the
/// text slot is returned.
pub fn knn_condition(query: &[f64], store: &EmbeddingStore, k: usize) -> Result<ConditionBundle> {
    let mut vectors: Vec<Vec<f64>> = store
        .knn(query, k)?
        .into_iter()
        .map(|(i, _)| store.vector(i).to_vec())
        .collect();
    vectors.push(query.to_vec());
    Ok(ConditionBundle { vectors })
}

/// `−τ Σᵢ log softmaxⱼ(vⱼ·Ĉᵢ/τ)[i]` for `[n, d]` image embeddings `v` and
/// condition features `c`.
pub fn contrastive_loss(t: &mut Tape, v: Var, c: Var, tau: f64) -> Result<Var> {
    let (n, _) = t
        .value(v)
        .dims2()
        .ok_or_else(|| Error::domain("contrastive_loss", "expected [n, d] embeddings"))?;
    if n < 2 {
        return Err(Error::domain("contrastive_loss", "needs at least two pairs"));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::domain("contrastive_loss", format!("tau {tau} outside (0, 1]")));
    }
    let vt = t.transpose(v)?;
    let logits = t.matmul(c, vt)?;
    let logits = t.scale(logits, 1.0 / tau);
    let targets: Vec<usize> = (0..n).collect();
    let ce = t.cross_entropy(logits, &targets)?;
    Ok(t.scale(ce, tau * n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use panogen_autodiff::{Precision, Tensor};

    #[test]
    fn toy_text_is_deterministic_unit() {
        let e = ToyEmbedder::new(DEFAULT_DIM, 0);
        let a = e.embed_text("blue sky").unwrap();
        let b = e.embed_text("blue sky").unwrap();
        assert_eq!(a, b);
        assert!((dot(&a, &a) - 1.0).abs() < 1e-12);
        assert!(e.embed_text("  ").is_err());
    }

    #[test]
    fn pseudo_feature_alpha_zero_is_identity() {
        let mut v = vec![0.3, -0.4, 0.5, 0.1];
        normalize(&mut v);
        let c = pseudo_text_feature(&v, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (a, b) in v.iter().zip(&c) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pseudo_feature_mixes_before_normalizing() {
        let v = vec![1.0, 0.0, 0.0];
        let e = vec![0.0, 3.0, 4.0];
        let c = pseudo_text_feature_with(&v, 0.25, &e);
        let mut want = vec![0.75, 0.25 * 0.6, 0.25 * 0.8];
        normalize(&mut want);
        for (a, b) in c.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn knn_self_first_and_full() {
        let mut s = EmbeddingStore::new(2);
        s.insert("b", &[1.0, 0.0]).unwrap();
        s.insert("a", &[0.0, 1.0]).unwrap();
        s.insert("c", &[0.6, 0.8]).unwrap();
        let r = s.knn(&[1.0, 0.0], 3).unwrap();
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 2, 1]);
        assert!(s.knn(&[1.0, 0.0], 4).is_err());
        let mut t = EmbeddingStore::new(1);
        t.insert("z", &[1.0]).unwrap();
        t.insert("y", &[1.0]).unwrap();
        assert_eq!(t.knn(&[1.0], 1).unwrap()[0].0, 1);
    }

    #[test]
    fn bundle_order() {
        let mut s = EmbeddingStore::new(2);
        s.insert("a", &[1.0, 0.0]).unwrap();
        s.insert("b", &[0.0, 1.0]).unwrap();
        let b = knn_condition(&[0.0, 1.0], &s, 1).unwrap();
        assert_eq!(b.vectors, vec![vec![0.0, 1.0], vec![0.0, 1.0]]);
        assert_eq!(knn_condition(&[0.0, 1.0], &s, 0).unwrap().len(), 1);
    }

    #[test]
    fn store_roundtrip_and_errors() {
        let mut s = EmbeddingStore::new(3);
        s.insert("k1", &[0.1, 0.2, 0.3]).unwrap();
        s.insert("k2", &[1.0, -1.0, 0.5]).unwrap();
        let bytes = s.encode();
        assert_eq!(EmbeddingStore::decode(&bytes).unwrap(), s);
        match EmbeddingStore::decode(&bytes[..bytes.len() - 5]) {
            Err(Error::Store { record, .. }) => assert_eq!(record, 1),
            other => panic!("{other:?}"),
        }
        assert!(EmbeddingStore::decode(b"T2LEMB0\0\0\0\0\0\0\0\0").is_err());
        assert!(s.insert("k1", &[0.0; 3]).is_err());
    }

    #[test]
    fn contrastive_identical_pair_is_two_tau_ln2() {
        let mut t = Tape::new(Precision::F64);
        let v = t.input(Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let c = t.input(Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let l = contrastive_loss(&mut t, v, c, 0.07).unwrap();
        assert!((t.value(l).item() - 2.0 * 0.07 * std::f64::consts::LN_2).abs() < 1e-12);
    }
}
