//! Early-retrieval metrics over a matrix of target ranks (photos x frames).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// `exp(-p_i / p_n)`: earlier (sparser) sketches weigh more.
pub fn stroke_weight(p_i: u32, p_n: u32) -> Result<f64> {
    if p_n == 0 {
        return Err(invalid("total stroke count must be positive"));
    }
    if p_i > p_n {
        return Err(invalid(format!("stroke count {p_i} exceeds total {p_n}")));
    }
    Ok((-(p_i as f64) / p_n as f64).exp())
}

/// `1 + (1 - rank) / (m - 1)`: 1 for the best rank, 0 for the worst.
pub fn rank_percentile(rank: u32, m: usize) -> Result<f64> {
    if m < 2 {
        return Err(invalid(format!("rank percentile needs a gallery of at least 2, got {m}")));
    }
    if rank == 0 || rank as usize > m {
        return Err(invalid(format!("rank {rank} outside 1..={m}")));
    }
    Ok(1.0 + (1.0 - rank as f64) / (m as f64 - 1.0))
}

/// Target ranks of `m` query episodes at each of their `n` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct RankRecord {
    photo_ids: Vec<String>,
    ranks: Vec<Vec<u32>>,
    gallery_size: usize,
    stroke_counts: Vec<Vec<u32>>,
    total_strokes: Vec<u32>,
}

impl RankRecord {
    /// All episodes share one stroke schedule.
    pub fn new(
        photo_ids: Vec<String>,
        ranks: Vec<Vec<u32>>,
        gallery_size: usize,
        stroke_counts: Vec<u32>,
        total_strokes: u32,
    ) -> Result<Self> {
        let m = ranks.len();
        Self::per_episode(photo_ids, ranks, gallery_size, vec![stroke_counts; m], vec![total_strokes; m])
    }

    /// Each episode carries its own stroke counts and total.
    pub fn per_episode(
        photo_ids: Vec<String>,
        ranks: Vec<Vec<u32>>,
        gallery_size: usize,
        stroke_counts: Vec<Vec<u32>>,
        total_strokes: Vec<u32>,
    ) -> Result<Self> {
        let m = ranks.len();
        if m == 0 {
            return Err(invalid("rank record needs at least one photo"));
        }
        if photo_ids.len() != m || stroke_counts.len() != m || total_strokes.len() != m {
            return Err(invalid("photo ids, ranks and stroke counts must have one row per photo"));
        }
        let n = ranks[0].len();
        if n == 0 {
            return Err(invalid("rank record needs at least one frame"));
        }
        for (j, row) in ranks.iter().enumerate() {
            if row.len() != n || stroke_counts[j].len() != n {
                return Err(invalid(format!("row {j} does not have {n} frames")));
            }
            if let Some(r) = row.iter().find(|&&r| r == 0 || r as usize > gallery_size) {
                return Err(invalid(format!("rank {r} in row {j} outside 1..={gallery_size}")));
            }
            let counts = &stroke_counts[j];
            if counts.windows(2).any(|w| w[1] < w[0]) {
                return Err(invalid(format!("stroke counts of row {j} decrease")));
            }
            if total_strokes[j] == 0 || counts[n - 1] > total_strokes[j] {
                return Err(invalid(format!("row {j}: total strokes must be positive and cover every frame")));
            }
        }
        Ok(Self {
            photo_ids,
            ranks,
            gallery_size,
            stroke_counts,
            total_strokes,
        })
    }

    pub fn photos(&self) -> usize {
        self.ranks.len()
    }

    pub fn frames(&self) -> usize {
        self.ranks[0].len()
    }

    pub fn gallery_size(&self) -> usize {
        self.gallery_size
    }

    pub fn photo_ids(&self) -> &[String] {
        &self.photo_ids
    }

    pub fn ranks(&self) -> &[Vec<u32>] {
        &self.ranks
    }

    pub fn rank(&self, photo: usize, frame: usize) -> u32 {
        self.ranks[photo][frame]
    }

    pub fn stroke_count(&self, photo: usize, frame: usize) -> u32 {
        self.stroke_counts[photo][frame]
    }

    pub fn total_strokes(&self, photo: usize) -> u32 {
        self.total_strokes[photo]
    }

    fn weight(&self, j: usize, i: usize) -> f64 {
        stroke_weight(self.stroke_counts[j][i], self.total_strokes[j]).expect("validated on construction")
    }

    /// `100 / (m n) * sum of w * (percentile, reciprocal rank)`.
    fn summed(&self, weighted: bool) -> Result<(f64, f64)> {
        rank_percentile(1, self.gallery_size)?;
        let (mut a, mut b) = (0.0, 0.0);
        for (j, row) in self.ranks.iter().enumerate() {
            for (i, &r) in row.iter().enumerate() {
                let w = if weighted { self.weight(j, i) } else { 1.0 };
                a += w * rank_percentile(r, self.gallery_size)?;
                b += w / r as f64;
            }
        }
        let scale = 100.0 / (self.photos() * self.frames()) as f64;
        Ok((a * scale, b * scale))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["photo_id", "frame_index", "p_i", "rank"])?;
        for (j, id) in self.photo_ids.iter().enumerate() {
            for i in 0..self.frames() {
                w.write_record([
                    id.clone(),
                    i.to_string(),
                    self.stroke_counts[j][i].to_string(),
                    self.ranks[j][i].to_string(),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Integrity(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }

    pub fn header(&self) -> RankHeader {
        let shared = self.total_strokes.iter().all(|&t| t == self.total_strokes[0]);
        RankHeader {
            m: self.gallery_size,
            n: self.frames(),
            p_n: if shared {
                TotalStrokes::Shared(self.total_strokes[0])
            } else {
                TotalStrokes::PerPhoto(self.photo_ids.iter().cloned().zip(self.total_strokes.iter().copied()).collect())
            },
        }
    }

    pub fn from_csv(csv_text: &str, header: &RankHeader) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            photo_id: String,
            frame_index: usize,
            p_i: u32,
            rank: u32,
        }
        let mut rows: BTreeMap<String, BTreeMap<usize, (u32, u32)>> = BTreeMap::new();
        let mut order = Vec::new();
        for row in csv::Reader::from_reader(csv_text.as_bytes()).deserialize() {
            let row: Row = row?;
            if row.frame_index >= header.n {
                return Err(invalid(format!("frame index {} outside 0..{}", row.frame_index, header.n)));
            }
            let frames = rows.entry(row.photo_id.clone()).or_insert_with(|| {
                order.push(row.photo_id.clone());
                BTreeMap::new()
            });
            if frames.insert(row.frame_index, (row.p_i, row.rank)).is_some() {
                return Err(invalid(format!("duplicate row for {} frame {}", row.photo_id, row.frame_index)));
            }
        }
        let mut ranks = Vec::with_capacity(order.len());
        let mut counts = Vec::with_capacity(order.len());
        let mut totals = Vec::with_capacity(order.len());
        for id in &order {
            let frames = &rows[id];
            if frames.len() != header.n {
                return Err(invalid(format!("photo {id} has {} of {} frames", frames.len(), header.n)));
            }
            counts.push(frames.values().map(|v| v.0).collect());
            ranks.push(frames.values().map(|v| v.1).collect());
            totals.push(match &header.p_n {
                TotalStrokes::Shared(p) => *p,
                TotalStrokes::PerPhoto(map) => *map
                    .get(id)
                    .ok_or_else(|| invalid(format!("header has no stroke total for {id}")))?,
            });
        }
        Self::per_episode(order, ranks, header.m, counts, totals)
    }

    /// Writes `csv_path` and a JSON header next to it at `header_path`.
    pub fn save(&self, csv_path: &Path, header_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()?).map_err(|e| Error::io(csv_path, e))?;
        let header = serde_json::to_string_pretty(&self.header())?;
        std::fs::write(header_path, header).map_err(|e| Error::io(header_path, e))
    }

    pub fn load(csv_path: &Path, header_path: &Path) -> Result<Self> {
        let header_text = std::fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
        let header: RankHeader = serde_json::from_str(&header_text)?;
        let csv_text = std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
        Self::from_csv(&csv_text, &header)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TotalStrokes {
    Shared(u32),
    PerPhoto(BTreeMap<String, u32>),
}

/// JSON sidecar of a rank CSV: gallery size, frames per episode, stroke totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankHeader {
    pub m: usize,
    pub n: usize,
    pub p_n: TotalStrokes,
}

/// `(w@mA, w@mB)` in percent.
pub fn weighted_metrics(record: &RankRecord) -> Result<(f64, f64)> {
    record.summed(true)
}

/// `(m@A, m@B)` in percent.
pub fn unweighted_metrics(record: &RankRecord) -> Result<(f64, f64)> {
    record.summed(false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub frame_index: usize,
    /// Mean of `p_i / p_n` over photos.
    pub sketch_fraction: f64,
    pub mean_percentile: f64,
    pub mean_reciprocal_rank: f64,
}

pub fn early_curve(record: &RankRecord) -> Result<Vec<CurvePoint>> {
    let m = record.photos() as f64;
    (0..record.frames())
        .map(|i| {
            let (mut x, mut y1, mut y2) = (0.0, 0.0, 0.0);
            for j in 0..record.photos() {
                let r = record.rank(j, i);
                x += record.stroke_count(j, i) as f64 / record.total_strokes(j) as f64;
                y1 += rank_percentile(r, record.gallery_size())?;
                y2 += 1.0 / r as f64;
            }
            Ok(CurvePoint {
                frame_index: i,
                sketch_fraction: x / m,
                mean_percentile: y1 / m,
                mean_reciprocal_rank: y2 / m,
            })
        })
        .collect()
}

pub fn curve_csv(curve: &[CurvePoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in curve {
        w.serialize(p)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Integrity(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// Mean reciprocal rank over the first `frames` frames of every episode.
pub fn early_mrr(record: &RankRecord, frames: usize) -> f64 {
    let frames = frames.clamp(1, record.frames());
    let total: f64 = record.ranks().iter().flat_map(|row| &row[..frames]).map(|&r| 1.0 / r as f64).sum();
    total / (record.photos() * frames) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "m_at_A")]
    pub m_at_a: f64,
    #[serde(rename = "m_at_B")]
    pub m_at_b: f64,
    #[serde(rename = "w_at_mA")]
    pub w_at_ma: f64,
    #[serde(rename = "w_at_mB")]
    pub w_at_mb: f64,
    pub photos: usize,
    pub frames: usize,
    pub gallery_size: usize,
    pub curve: Vec<CurvePoint>,
}

impl MetricReport {
    pub fn from_record(record: &RankRecord) -> Result<Self> {
        let (m_at_a, m_at_b) = unweighted_metrics(record)?;
        let (w_at_ma, w_at_mb) = weighted_metrics(record)?;
        Ok(Self {
            m_at_a,
            m_at_b,
            w_at_ma,
            w_at_mb,
            photos: record.photos(),
            frames: record.frames(),
            gallery_size: record.gallery_size(),
            curve: early_curve(record)?,
        })
    }
}
