//! Evaluation and reporting: frame- and video-level AUROC, the ablation
//! runner over the variant ladder, and heatmap export.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{ModelConfig, ModelVariant, OptimizerProfile, Trainer, VlaForgeModel};
use crate::synthgen::{Dataset, ManifestRecord, Split};
use crate::tensor::{bilinear_upsample, Tensor};

/// Evaluation summary over one dataset split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub frame_auroc: f64,
    pub video_auroc: f64,
    /// Per manipulation family, frame-level AUROC of that family's fakes
    /// against all real frames.
    pub per_family: BTreeMap<String, f64>,
    pub n_frames: usize,
    pub n_videos: usize,
    pub alpha: f64,
}

/// Area under the ROC curve by the rank statistic; ties get half credit.
pub fn auroc(scores: &[(f64, u8)]) -> Result<f64> {
    let n_pos = scores.iter().filter(|(_, y)| *y == 1).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(
            "AUROC needs at least one positive and one negative label".into(),
        ));
    }
    if scores.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::Metric("AUROC scores must be finite".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.partial_cmp(&scores[b].0).unwrap());
    // Average ranks over tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            if scores[k].1 == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    let nn = n_neg as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Video-level score: the mean of its frame scores.
pub fn video_score(frame_scores: &[f64]) -> Result<f64> {
    if frame_scores.is_empty() {
        return Err(Error::Validation("video score needs at least one frame".into()));
    }
    Ok(frame_scores.iter().sum::<f64>() / frame_scores.len() as f64)
}

/// Score every frame of the given split and assemble the report.
pub fn evaluate(
    model: &VlaForgeModel,
    dataset: &Dataset,
    split: Split,
    alpha: f64,
) -> Result<EvalReport> {
    let records = dataset.split_records(split);
    if records.is_empty() {
        return Err(Error::Validation(format!("dataset has no {split:?} videos")));
    }
    // Parallel over videos; assembly stays in manifest order.
    let scored: Vec<Result<(Vec<f64>, &ManifestRecord)>> = records
        .par_iter()
        .map(|rec| {
            let mut frame_scores = Vec::with_capacity(rec.num_frames);
            for k in 0..rec.num_frames {
                let frame = dataset.load_frame(rec, k)?;
                let ctx = model.frame_context(&frame)?;
                frame_scores.push(model.infer_ctx(&ctx, alpha)?.s);
            }
            Ok((frame_scores, *rec))
        })
        .collect();

    let mut frame_pairs = Vec::new();
    let mut video_pairs = Vec::new();
    let mut family_scores: BTreeMap<String, Vec<(f64, u8)>> = BTreeMap::new();
    let mut real_frames = Vec::new();
    for item in scored {
        let (frame_scores, rec) = item?;
        for &s in &frame_scores {
            frame_pairs.push((s, rec.label));
            if rec.label == 0 {
                real_frames.push(s);
            } else {
                family_scores.entry(rec.family.as_str().to_string()).or_default().push((s, 1));
            }
        }
        video_pairs.push((video_score(&frame_scores)?, rec.label));
    }

    let mut per_family = BTreeMap::new();
    for (family, mut pairs) in family_scores {
        pairs.extend(real_frames.iter().map(|&s| (s, 0u8)));
        per_family.insert(family, auroc(&pairs)?);
    }

    Ok(EvalReport {
        frame_auroc: auroc(&frame_pairs)?,
        video_auroc: auroc(&video_pairs)?,
        per_family,
        n_frames: frame_pairs.len(),
        n_videos: video_pairs.len(),
        alpha,
    })
}

// ── ablation runner ──────────────────────────────────────────────────────

/// One trained-and-evaluated ablation cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: ModelVariant,
    pub seed: u64,
    pub frame_auroc: f64,
    pub video_auroc: f64,
    /// Set when training diverged; the metrics are then absent from means.
    pub diverged: bool,
}

/// Full ablation table plus per-variant means.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub alpha: f64,
}

impl AblationTable {
    pub fn mean_for(&self, variant: ModelVariant) -> Option<(f64, f64)> {
        let rows: Vec<&AblationRow> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant && !r.diverged)
            .collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.frame_auroc).sum::<f64>() / n,
            rows.iter().map(|r| r.video_auroc).sum::<f64>() / n,
        ))
    }

    /// Aligned plain-text rendering, one line per row plus means.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("variant  seed      frame-AUROC  video-AUROC  status\n");
        for r in &self.rows {
            if r.diverged {
                out.push_str(&format!(
                    "{:<8} {:<9} {:>11}  {:>11}  diverged\n",
                    r.variant.as_str(),
                    r.seed,
                    "-",
                    "-"
                ));
            } else {
                out.push_str(&format!(
                    "{:<8} {:<9} {:>11.4}  {:>11.4}  ok\n",
                    r.variant.as_str(),
                    r.seed,
                    r.frame_auroc,
                    r.video_auroc
                ));
            }
        }
        out.push('\n');
        for variant in ModelVariant::ALL {
            if let Some((f, v)) = self.mean_for(variant) {
                out.push_str(&format!(
                    "mean {:<6} frame {f:.4}  video {v:.4}\n",
                    variant.as_str()
                ));
            }
        }
        out
    }
}

/// Train each variant per seed on the benchmark's train split and evaluate
/// on the test split. Divergent runs are flagged and skipped, not fatal.
pub fn run_ablation(
    dataset: &Dataset,
    base_config: &ModelConfig,
    variants: &[ModelVariant],
    seeds: &[u64],
    profile: &OptimizerProfile,
    alpha: f64,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let config = ModelConfig { variant, ..base_config.clone() };
            let model = VlaForgeModel::new(config, seed)?;
            let trained = if variant == ModelVariant::Base {
                Some(model)
            } else {
                let mut trainer = Trainer::new(model, profile.clone(), seed);
                let contexts = trainer.prepare_contexts(dataset)?;
                match trainer.run(&contexts, |_| {}) {
                    Ok(_) => Some(trainer.model),
                    Err(Error::Validation(msg)) if msg.contains("diverged") => None,
                    Err(e) => return Err(e),
                }
            };
            match trained {
                Some(model) => {
                    let report = evaluate(&model, dataset, Split::Test, alpha)?;
                    rows.push(AblationRow {
                        variant,
                        seed,
                        frame_auroc: report.frame_auroc,
                        video_auroc: report.video_auroc,
                        diverged: false,
                    });
                }
                None => rows.push(AblationRow {
                    variant,
                    seed,
                    frame_auroc: f64::NAN,
                    video_auroc: f64::NAN,
                    diverged: true,
                }),
            }
        }
    }
    Ok(AblationTable { rows, alpha })
}

// ── heatmap export ───────────────────────────────────────────────────────

/// Min-max normalize a map to [0,1]; constant maps collapse to zero.
fn min_max(map: &Tensor) -> Tensor {
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return Tensor::zeros(map.shape());
    }
    map.map(|v| (v - lo) / (hi - lo))
}

fn overlay(frame: &Tensor, heat: &Tensor) -> Tensor {
    let (h, w) = heat.dims2();
    let mut out = frame.clone();
    for p in 0..h * w {
        let a = 0.55 * heat.data()[p];
        // Red-yellow ramp over the frame.
        let r = heat.data()[p];
        let g = (2.0 * heat.data()[p] - 1.0).clamp(0.0, 1.0);
        let src = [r, g, 0.0];
        for c in 0..3 {
            let i = p * 3 + c;
            out.data_mut()[i] = ((1.0 - a) * out.data()[i] + a * src[c]).clamp(0.0, 1.0);
        }
    }
    out
}

/// Export per-query masks plus the localization, VLA and fused maps for one
/// frame. Query masks are written as grayscale `mask_q{j}.png`; the three
/// aggregate maps as colorized overlays. Raw map values go to `maps.json`.
/// Returns the written PNG paths (q + 3 of them).
pub fn export_heatmaps(
    model: &VlaForgeModel,
    frame: &crate::synthgen::FrameSample,
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    let maps = model.mask_artifacts(frame)?;
    let (h, w) = (frame.image.shape()[0], frame.image.shape()[1]);
    let q = maps.query_masks.shape()[0];
    let g = maps.loc_map.dims2().0;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;

    let mut written = Vec::new();
    for j in 0..q {
        let mask = Tensor::new(
            vec![g, g],
            maps.query_masks.data()[j * g * g..(j + 1) * g * g].to_vec(),
        );
        let up = bilinear_upsample(&min_max(&mask), h, w);
        let path = out_dir.join(format!("mask_q{j}.png"));
        crate::imgio::save_gray(&path, &up)?;
        written.push(path);
    }
    for (name, map) in [
        ("locmap.png", &maps.loc_map),
        ("vlamap.png", &maps.vla_map),
        ("fusedmap.png", &maps.fused_map),
    ] {
        let up = bilinear_upsample(&min_max(map), h, w);
        let path = out_dir.join(name);
        crate::imgio::save_rgb(&path, &overlay(&frame.image, &up))?;
        written.push(path);
    }

    // Raw arrays so downstream numbers never depend on visualization scaling.
    let raw = serde_json::json!({
        "query_masks": { "shape": maps.query_masks.shape(), "data": maps.query_masks.data() },
        "loc_map": { "shape": maps.loc_map.shape(), "data": maps.loc_map.data() },
        "vla_map": { "shape": maps.vla_map.shape(), "data": maps.vla_map.data() },
        "fused_map": { "shape": maps.fused_map.shape(), "data": maps.fused_map.data() },
    });
    let raw_path = out_dir.join("maps.json");
    std::fs::write(&raw_path, serde_json::to_string(&raw).expect("maps serialize"))
        .map_err(|e| Error::io(format!("writing {}", raw_path.display()), e))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// O(n^2) pairwise oracle with half credit for ties.
    fn auroc_brute(scores: &[(f64, u8)]) -> f64 {
        let mut wins = 0.0;
        let mut total = 0.0;
        for &(sp, yp) in scores.iter().filter(|(_, y)| *y == 1) {
            let _ = yp;
            for &(sn, yn) in scores.iter().filter(|(_, y)| *y == 0) {
                let _ = yn;
                total += 1.0;
                if sp > sn {
                    wins += 1.0;
                } else if sp == sn {
                    wins += 0.5;
                }
            }
        }
        wins / total
    }

    #[test]
    fn auroc_known_values() {
        assert_eq!(
            auroc(&[(0.9, 1), (0.8, 1), (0.1, 0), (0.2, 0)]).unwrap(),
            1.0
        );
        assert_eq!(
            auroc(&[(0.5, 1), (0.5, 0), (0.5, 1), (0.5, 0)]).unwrap(),
            0.5
        );
        let v = auroc(&[(0.7, 1), (0.4, 0), (0.7, 0), (0.9, 1)]).unwrap();
        assert!((v - 0.875).abs() < 1e-12, "{v}");
    }

    #[test]
    fn auroc_rejects_single_class() {
        assert!(matches!(auroc(&[(0.3, 1), (0.5, 1)]), Err(Error::Metric(_))));
        assert!(matches!(auroc(&[(0.3, 0)]), Err(Error::Metric(_))));
    }

    #[test]
    fn auroc_matches_pairwise_oracle_with_ties() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for round in 0..120 {
            let n = rng.gen_range(2..200);
            let mut scores = Vec::with_capacity(n);
            let mut pos = 0;
            for _ in 0..n {
                // Coarse quantization forces plenty of ties.
                let s = (rng.gen_range(0.0f64..1.0) * 8.0).round() / 8.0;
                let y = u8::from(rng.gen_bool(0.5));
                pos += y as usize;
                scores.push((s, y));
            }
            if pos == 0 || pos == n {
                continue;
            }
            let fast = auroc(&scores).unwrap();
            let brute = auroc_brute(&scores);
            assert!(
                (fast - brute).abs() < 1e-12,
                "round {round}: rank {fast} vs brute {brute}"
            );
        }
    }

    #[test]
    fn auroc_is_invariant_under_monotone_transforms() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let scores: Vec<(f64, u8)> =
            (0..60).map(|_| (rng.gen_range(-3.0..3.0), u8::from(rng.gen_bool(0.4)))).collect();
        let base = auroc(&scores).unwrap();
        let mapped: Vec<(f64, u8)> =
            scores.iter().map(|&(s, y)| ((s * 2.0).exp() + 1.0, y)).collect();
        assert!((auroc(&mapped).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn video_score_is_the_mean() {
        assert_eq!(video_score(&[0.2, 0.4, 0.6]).unwrap(), 0.4000000000000001);
        assert!((video_score(&[0.2, 0.4, 0.6]).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(video_score(&[0.7]).unwrap(), 0.7);
        assert!(video_score(&[]).is_err());
        let fwd = video_score(&[0.1, 0.9, 0.3]).unwrap();
        let rev = video_score(&[0.3, 0.9, 0.1]).unwrap();
        assert!((fwd - rev).abs() < 1e-15);
    }

    #[test]
    fn perfect_separation_gives_unit_auroc_at_both_levels() {
        // Synthetic frame scores: every fake frame above every real frame.
        let mut frame_pairs = Vec::new();
        let mut video_pairs = Vec::new();
        for v in 0..6 {
            let fake = v % 2 == 1;
            let scores: Vec<f64> = (0..4)
                .map(|k| if fake { 0.8 + 0.01 * k as f64 } else { 0.2 + 0.01 * k as f64 })
                .collect();
            for &s in &scores {
                frame_pairs.push((s, u8::from(fake)));
            }
            video_pairs.push((video_score(&scores).unwrap(), u8::from(fake)));
        }
        assert_eq!(auroc(&frame_pairs).unwrap(), 1.0);
        assert_eq!(auroc(&video_pairs).unwrap(), 1.0);
    }

    #[test]
    fn min_max_spans_full_range_unless_constant() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 3.0, 2.0, 5.0]);
        let n = min_max(&m);
        let lo = n.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = n.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        let c = min_max(&Tensor::filled(&[2, 2], 0.7));
        assert!(c.data().iter().all(|&v| v == 0.0));
    }
}
