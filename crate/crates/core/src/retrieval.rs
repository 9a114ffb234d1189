//! Exact nearest-neighbour gallery over photo embeddings.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{squared_distance, EmbeddingKind, EmbeddingVector};
use crate::error::{invalid, Error, Result};

const MAGIC: &[u8; 8] = b"SKLGALv1";

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    /// Sorted by photo id.
    entries: Vec<(String, EmbeddingVector)>,
    dim: usize,
    stage1_hash: String,
    stage2_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPhoto {
    pub photo_id: String,
    pub distance: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ranked: Vec<RankedPhoto>,
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_rank: Option<usize>,
}

/// Encode every photo and index the results.
pub fn build_index<T, I, F>(photos: I, mut encode: F) -> Result<GalleryIndex>
where
    I: IntoIterator<Item = (String, T)>,
    F: FnMut(&T) -> Result<EmbeddingVector>,
{
    let entries = photos
        .into_iter()
        .map(|(id, p)| Ok((id, encode(&p)?)))
        .collect::<Result<Vec<_>>>()?;
    GalleryIndex::new(entries)
}

impl GalleryIndex {
    pub fn new(mut entries: Vec<(String, EmbeddingVector)>) -> Result<Self> {
        let dim = entries
            .first()
            .map(|(_, e)| e.dim())
            .ok_or_else(|| invalid("gallery needs at least one photo"))?;
        let mut seen = BTreeSet::new();
        for (id, e) in &entries {
            if !seen.insert(id.as_str()) {
                return Err(invalid(format!("duplicate photo id {id:?}")));
            }
            if e.dim() != dim {
                return Err(invalid(format!("photo {id:?} has dim {}, expected {dim}", e.dim())));
            }
            if e.kind() != EmbeddingKind::Low {
                return Err(invalid(format!("photo {id:?} is not a low-dimensional embedding")));
            }
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self {
            entries,
            dim,
            stage1_hash: String::new(),
            stage2_hash: None,
        })
    }

    /// Record which checkpoints produced the embeddings.
    pub fn with_hashes(mut self, stage1: impl Into<String>, stage2: Option<String>) -> Self {
        self.stage1_hash = stage1.into();
        self.stage2_hash = stage2;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stage1_hash(&self) -> &str {
        &self.stage1_hash
    }

    pub fn stage2_hash(&self) -> Option<&str> {
        self.stage2_hash.as_deref()
    }

    pub fn entries(&self) -> &[(String, EmbeddingVector)] {
        &self.entries
    }

    pub fn contains(&self, photo_id: &str) -> bool {
        self.position(photo_id).is_some()
    }

    fn position(&self, photo_id: &str) -> Option<usize> {
        self.entries.binary_search_by(|(id, _)| id.as_str().cmp(photo_id)).ok()
    }

    fn check_query(&self, query: &EmbeddingVector) -> Result<()> {
        if query.dim() != self.dim {
            return Err(invalid(format!("query dim {} does not match gallery dim {}", query.dim(), self.dim)));
        }
        if query.kind() == EmbeddingKind::High {
            return Err(invalid("queries must be retrieval embeddings, not pooled features"));
        }
        Ok(())
    }

    /// Squared distances in entry order.
    fn distances(&self, query: &EmbeddingVector) -> Vec<f64> {
        self.entries
            .iter()
            .map(|(_, e)| squared_distance(query.values(), e.values()))
            .collect()
    }

    /// Total order: squared distance, then photo id. Entries are id-sorted, so
    /// comparing indices breaks ties by id.
    fn order(d: &[f64], a: usize, b: usize) -> Ordering {
        d[a].total_cmp(&d[b]).then(a.cmp(&b))
    }

    pub fn query_topk(&self, query: &EmbeddingVector, k: usize) -> Result<RetrievalResult> {
        self.check_query(query)?;
        if k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        let d = self.distances(query);
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        let take = k.min(order.len());
        if take < order.len() {
            order.select_nth_unstable_by(take - 1, |&a, &b| Self::order(&d, a, b));
            order.truncate(take);
        }
        order.sort_by(|&a, &b| Self::order(&d, a, b));
        Ok(RetrievalResult {
            ranked: order
                .into_iter()
                .enumerate()
                .map(|(r, i)| RankedPhoto {
                    photo_id: self.entries[i].0.clone(),
                    distance: d[i].sqrt(),
                    rank: r + 1,
                })
                .collect(),
            k,
            target_rank: None,
        })
    }

    /// 1-based position of `target_id` in the full ranking.
    pub fn rank_of_target(&self, query: &EmbeddingVector, target_id: &str) -> Result<usize> {
        self.check_query(query)?;
        let t = self
            .position(target_id)
            .ok_or_else(|| invalid(format!("photo {target_id:?} is not in the gallery")))?;
        let d = self.distances(query);
        Ok(1 + (0..d.len()).filter(|&i| Self::order(&d, i, t) == Ordering::Less).count())
    }

    /// Top-k plus the rank of `target_id`.
    pub fn query_with_target(&self, query: &EmbeddingVector, k: usize, target_id: &str) -> Result<RetrievalResult> {
        let mut result = self.query_topk(query, k)?;
        result.target_rank = Some(self.rank_of_target(query, target_id)?);
        Ok(result)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        write_str(&mut w, &self.stage1_hash)?;
        write_str(&mut w, self.stage2_hash.as_deref().unwrap_or(""))?;
        for (id, e) in &self.entries {
            write_str(&mut w, id)?;
            for v in e.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let corrupt = |what: &str| Error::Integrity(format!("gallery file: {what}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let dim = read_u32(&mut r).ok_or_else(|| corrupt("truncated header"))? as usize;
        let count = read_u32(&mut r).ok_or_else(|| corrupt("truncated header"))? as usize;
        let stage1 = read_str(&mut r).ok_or_else(|| corrupt("bad stage-1 hash"))?;
        let stage2 = read_str(&mut r).ok_or_else(|| corrupt("bad stage-2 hash"))?;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            let id = read_str(&mut r).ok_or_else(|| corrupt(&format!("entry {i} id")))?;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| corrupt(&format!("entry {i} truncated")))?;
                values.push(f64::from_le_bytes(b));
            }
            entries.push((id, EmbeddingVector::new(values, EmbeddingKind::Low)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| corrupt(&e.to_string()))? != 0 {
            return Err(corrupt("trailing bytes"));
        }
        let index = Self::new(entries)?;
        if index.dim != dim {
            return Err(corrupt("dim header disagrees with entries"));
        }
        Ok(index.with_hashes(stage1, (!stage2.is_empty()).then_some(stage2)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice())
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl Read) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Option<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 16 {
        return None;
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).ok()?;
    String::from_utf8(b).ok()
}
