//! Text-image alignment and perceptual distance over image sets.
//!
//! Scores come from a [`ScorerClient`]. The harness never invents numbers:
//! without a scorer, or when the scorer fails, it returns an error.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MftfError, Result};
use crate::export::{load_image, png_bytes};
use crate::model::Image;

/// An external embedding and perceptual-distance model.
pub trait ScorerClient: Sync {
    /// Name and version recorded with every result set.
    fn identity(&self) -> String;
    fn embed_image(&self, image: &Image) -> Result<Vec<f32>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
    fn perceptual_distance(&self, a: &Image, b: &Image) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_item: Vec<f64>,
    pub mean: f64,
}

impl ScoreReport {
    fn from_items(per_item: Vec<f64>) -> Self {
        let mean = if per_item.is_empty() {
            0.0
        } else {
            per_item.iter().sum::<f64>() / per_item.len() as f64
        };
        Self { per_item, mean }
    }
}

fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MftfError::Dependency(format!(
            "scorer returned embeddings of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MftfError::Dependency("scorer returned a zero embedding".into()));
    }
    Ok(dot / (na * nb))
}

/// `max(0, 100 cos(image, text))` per pair.
pub fn clip_score(images: &[Image], prompts: &[String], scorer: &dyn ScorerClient) -> Result<ScoreReport> {
    if images.len() != prompts.len() {
        return Err(MftfError::config(format!(
            "{} images but {} prompts",
            images.len(),
            prompts.len()
        )));
    }
    let per_item = images
        .par_iter()
        .zip(prompts.par_iter())
        .map(|(img, text)| {
            let e_i = scorer.embed_image(img)?;
            let e_t = scorer.embed_text(text)?;
            Ok((100.0 * cosine(&e_i, &e_t)?).max(0.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ScoreReport::from_items(per_item))
}

pub fn lpips_distance(pairs: &[(Image, Image)], scorer: &dyn ScorerClient) -> Result<ScoreReport> {
    for (i, (a, b)) in pairs.iter().enumerate() {
        if a.dim() != b.dim() {
            return Err(MftfError::shape(format!(
                "pair {i}: image shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
    }
    let per_item = pairs
        .par_iter()
        .map(|(a, b)| scorer.perceptual_distance(a, b))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ScoreReport::from_items(per_item))
}

/// Deterministic offline scorer for tests.
///
/// Embeddings are Gaussian vectors seeded by a hash of the input, so they
/// carry no semantics. The distance compares image pyramids and is zero
/// exactly for identical images.
#[derive(Clone, Debug)]
pub struct StubScorer {
    pub dim: usize,
    pub levels: usize,
}

impl Default for StubScorer {
    fn default() -> Self {
        Self { dim: 64, levels: 3 }
    }
}

impl StubScorer {
    fn embedding(&self, tag: &[u8], payload: impl Iterator<Item = u8>) -> Vec<f32> {
        let mut h = Sha256::new();
        h.update(tag);
        for chunk in payload.collect::<Vec<u8>>().chunks(4096) {
            h.update(chunk);
        }
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

fn pool2(img: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let (ph, pw) = ((h / 2).max(1), (w / 2).max(1));
    Array3::from_shape_fn((c, ph, pw), |(ch, y, x)| {
        let mut sum = 0.0;
        let mut n = 0.0;
        for dy in 0..2 {
            for dx in 0..2 {
                let (sy, sx) = (2 * y + dy, 2 * x + dx);
                if sy < h && sx < w {
                    sum += img[[ch, sy, sx]];
                    n += 1.0;
                }
            }
        }
        sum / n
    })
}

impl ScorerClient for StubScorer {
    fn identity(&self) -> String {
        format!("stub(dim={}, levels={})", self.dim, self.levels)
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f32>> {
        let dims = image.shape().iter().flat_map(|d| (*d as u64).to_le_bytes()).collect::<Vec<_>>();
        let bytes = dims.into_iter().chain(image.iter().flat_map(|v| v.to_bits().to_le_bytes()));
        Ok(self.embedding(b"image", bytes))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self.embedding(b"text", text.bytes()))
    }

    fn perceptual_distance(&self, a: &Image, b: &Image) -> Result<f64> {
        if a.dim() != b.dim() {
            return Err(MftfError::shape("perceptual distance needs equal image shapes"));
        }
        let (mut a, mut b) = (a.clone(), b.clone());
        let mut total = 0.0f64;
        for level in 0..self.levels {
            if level > 0 {
                a = pool2(&a);
                b = pool2(&b);
            }
            let n = a.len().max(1) as f64;
            let mse: f64 = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
                .sum::<f64>()
                / n;
            total += mse.sqrt();
        }
        Ok(total / self.levels.max(1) as f64)
    }
}

/// Client for a scoring service speaking JSON over HTTP.
///
/// Endpoints: `POST /embed_image {"image": <base64 png>}`,
/// `POST /embed_text {"text": ...}` (both answer `{"embedding": [...]}`),
/// `POST /perceptual_distance {"a": ..., "b": ...}` (answers `{"distance": x}`)
/// and `GET /identity` (answers `{"identity": ...}`).
pub struct HttpScorer {
    base: String,
    agent: ureq::Agent,
    identity: String,
}

#[derive(Deserialize)]
struct EmbeddingReply {
    embedding: Vec<f32>,
}

#[derive(Deserialize)]
struct DistanceReply {
    distance: f64,
}

#[derive(Deserialize)]
struct IdentityReply {
    identity: String,
}

impl HttpScorer {
    /// Connects and fetches the service identity; any failure is a dependency error.
    pub fn connect(base: &str) -> Result<Self> {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build();
        let base = base.trim_end_matches('/').to_string();
        let reply: IdentityReply = agent
            .get(&format!("{base}/identity"))
            .call()
            .map_err(|e| MftfError::Dependency(format!("scorer at {base} unavailable: {e}")))?
            .into_json()
            .map_err(|e| MftfError::Dependency(format!("scorer at {base} sent bad identity: {e}")))?;
        Ok(Self {
            identity: format!("{} @ {base}", reply.identity),
            base,
            agent,
        })
    }

    fn post<T: serde::de::DeserializeOwned>(&self, path: &str, body: serde_json::Value) -> Result<T> {
        let url = format!("{}/{path}", self.base);
        self.agent
            .post(&url)
            .send_json(body)
            .map_err(|e| MftfError::Dependency(format!("scorer request {url} failed: {e}")))?
            .into_json()
            .map_err(|e| MftfError::Dependency(format!("scorer reply from {url} unreadable: {e}")))
    }
}

fn b64_png(img: &Image) -> Result<String> {
    Ok(base64::engine::general_purpose::STANDARD.encode(png_bytes(img)?))
}

impl ScorerClient for HttpScorer {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f32>> {
        let r: EmbeddingReply = self.post("embed_image", serde_json::json!({ "image": b64_png(image)? }))?;
        Ok(r.embedding)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let r: EmbeddingReply = self.post("embed_text", serde_json::json!({ "text": text }))?;
        Ok(r.embedding)
    }

    fn perceptual_distance(&self, a: &Image, b: &Image) -> Result<f64> {
        let r: DistanceReply = self.post(
            "perceptual_distance",
            serde_json::json!({ "a": b64_png(a)?, "b": b64_png(b)? }),
        )?;
        Ok(r.distance)
    }
}

/// `"stub"` or an `http(s)://` base URL. No scorer is an error.
pub fn scorer_from_spec(spec: Option<&str>) -> Result<Box<dyn ScorerClient>> {
    match spec {
        None => Err(MftfError::Dependency(
            "no scorer configured; pass a scorer URL or \"stub\"".into(),
        )),
        Some("stub") => Ok(Box::new(StubScorer::default())),
        Some(url) if url.starts_with("http://") || url.starts_with("https://") => {
            Ok(Box::new(HttpScorer::connect(url)?))
        }
        Some(other) => Err(MftfError::config(format!(
            "scorer {other:?} is neither \"stub\" nor an http(s) URL"
        ))),
    }
}

/// One row of an evaluation manifest. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub source_image: PathBuf,
    pub target_image: PathBuf,
    /// Prompt the target is scored against.
    pub prompt: String,
    /// Prompt the source is scored against; `prompt` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_prompt: Option<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManifestFile {
    List(Vec<PairEntry>),
    Object { pairs: Vec<PairEntry> },
}

pub fn load_manifest(path: &Path) -> Result<Vec<PairEntry>> {
    let text = fs::read_to_string(path)
        .map_err(|e| MftfError::config(format!("cannot read manifest {}: {e}", path.display())))?;
    let parsed: ManifestFile = serde_json::from_str(&text)?;
    let pairs = match parsed {
        ManifestFile::List(p) | ManifestFile::Object { pairs: p } => p,
    };
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(pairs
        .into_iter()
        .map(|mut p| {
            p.source_image = base.join(&p.source_image);
            p.target_image = base.join(&p.target_image);
            p
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub index: usize,
    pub source_image: String,
    pub target_image: String,
    pub prompt: String,
    pub clip_source: f64,
    pub clip_target: f64,
    pub lpips: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: String,
    /// sha256 over the manifest entries and scorer identity.
    pub fingerprint: String,
    pub rows: Vec<EvalRow>,
    pub mean_clip_source: f64,
    pub mean_clip_target: f64,
    pub mean_lpips: f64,
}

pub fn evaluate_pairs(pairs: &[PairEntry], scorer: &dyn ScorerClient) -> Result<EvalReport> {
    let mut sources = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    for p in pairs {
        sources.push(load_image(&p.source_image)?);
        targets.push(load_image(&p.target_image)?);
    }
    let src_prompts: Vec<String> = pairs
        .iter()
        .map(|p| p.source_prompt.clone().unwrap_or_else(|| p.prompt.clone()))
        .collect();
    let tgt_prompts: Vec<String> = pairs.iter().map(|p| p.prompt.clone()).collect();
    let clip_s = clip_score(&sources, &src_prompts, scorer)?;
    let clip_t = clip_score(&targets, &tgt_prompts, scorer)?;
    let image_pairs: Vec<(Image, Image)> = sources.into_iter().zip(targets).collect();
    let lpips = lpips_distance(&image_pairs, scorer)?;

    let scorer_id = scorer.identity();
    let mut h = Sha256::new();
    h.update(scorer_id.as_bytes());
    h.update(serde_json::to_vec(pairs)?);
    let fingerprint = format!("{:x}", h.finalize());
    let rows = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| EvalRow {
            index: i,
            source_image: p.source_image.display().to_string(),
            target_image: p.target_image.display().to_string(),
            prompt: p.prompt.clone(),
            clip_source: clip_s.per_item[i],
            clip_target: clip_t.per_item[i],
            lpips: lpips.per_item[i],
        })
        .collect();
    Ok(EvalReport {
        scorer: scorer_id,
        fingerprint,
        rows,
        mean_clip_source: clip_s.mean,
        mean_clip_target: clip_t.mean,
        mean_lpips: lpips.mean,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,source_image,target_image,prompt,clip_source,clip_target,lpips\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6}\n",
                r.index,
                csv_field(&r.source_image),
                csv_field(&r.target_image),
                csv_field(&r.prompt),
                r.clip_source,
                r.clip_target,
                r.lpips
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u32) -> Image {
        Array3::from_shape_fn((3, 8, 8), |(c, y, x)| {
            (((seed as usize * 7 + c * 31 + y * 5 + x * 3) % 17) as f32) / 16.0
        })
    }

    #[test]
    fn identical_pair_has_zero_distance() {
        let s = StubScorer::default();
        assert_eq!(s.perceptual_distance(&img(1), &img(1)).unwrap(), 0.0);
    }

    #[test]
    fn distance_is_symmetric_and_ordered() {
        let s = StubScorer::default();
        let (a, b) = (img(1), img(2));
        let d1 = s.perceptual_distance(&a, &b).unwrap();
        let d2 = s.perceptual_distance(&b, &a).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
        let inverted = a.mapv(|v| 1.0 - v);
        let noised = a.mapv(|v| (v + 0.01).min(1.0));
        assert!(s.perceptual_distance(&a, &inverted).unwrap() > s.perceptual_distance(&a, &noised).unwrap());
    }

    #[test]
    fn clip_scores_are_deterministic_and_clamped() {
        let s = StubScorer::default();
        let images = vec![img(1), img(2), img(3)];
        let prompts: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let r1 = clip_score(&images, &prompts, &s).unwrap();
        let r2 = clip_score(&images, &prompts, &s).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.per_item.iter().all(|&v| (0.0..=100.0).contains(&v)));
        assert!(clip_score(&images, &prompts[..2], &s).is_err());
    }

    #[test]
    fn missing_scorer_is_an_error() {
        assert!(matches!(scorer_from_spec(None), Err(MftfError::Dependency(_))));
        assert!(matches!(
            scorer_from_spec(Some("http://127.0.0.1:9")),
            Err(MftfError::Dependency(_))
        ));
    }

    #[test]
    fn mismatched_pair_shapes_are_rejected() {
        let s = StubScorer::default();
        let pairs = vec![(img(1), Array3::zeros((3, 4, 4)))];
        assert!(matches!(lpips_distance(&pairs, &s), Err(MftfError::Shape(_))));
    }
}
