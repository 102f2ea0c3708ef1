//! Seeded generator for small makeup-style datasets whose frame features are
//! separable by construction, so every trainable stage can be checked end to end.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::dataset::{GroundTruthEvent, TimeStamp, VideoRecord};
use super::{PosLexicon, PosTag};
use crate::autograd::Mat;
use crate::error::{DvcError, Result};

pub const PRODUCTS: [&str; 12] = [
    "lipstick",
    "blush",
    "foundation",
    "concealer",
    "eyeliner",
    "mascara",
    "eyeshadow",
    "primer",
    "bronzer",
    "highlighter",
    "powder",
    "gloss",
];
pub const REGIONS: [&str; 10] =
    ["lips", "cheeks", "eyes", "eyelids", "eyelashes", "eyebrows", "forehead", "nose", "chin", "jaw"];
pub const TOOLS: [&str; 8] = ["brush", "sponge", "finger", "wand", "pencil", "puff", "applicator", "spatula"];
/// Each product is always applied with the same tool.
const TOOL_OF_PRODUCT: [usize; 12] = [0, 0, 1, 2, 4, 3, 0, 2, 5, 1, 5, 6];
pub const VERB: &str = "apply";

/// Frames per second of generated feature sequences.
pub const FEATURE_FPS: f64 = 1.0;
pub const NOISE_SIGMA: f64 = 0.1;
pub const MAX_SYNTHETIC_EVENTS: usize = 10;

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub records: Vec<VideoRecord>,
    pub lexicon: PosLexicon,
    /// Label space: one label per face region.
    pub label_names: Vec<String>,
}

impl SyntheticDataset {
    pub fn label_space(&self) -> usize {
        self.label_names.len()
    }
}

#[derive(Clone, Debug)]
struct Prototypes {
    background: Vec<f64>,
    products: Vec<Vec<f64>>,
    regions: Vec<Vec<f64>>,
}

impl Prototypes {
    fn sample(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let vec = |rng: &mut ChaCha8Rng| (0..dim).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>();
        Self {
            background: vec(rng),
            products: (0..PRODUCTS.len()).map(|_| vec(rng)).collect(),
            regions: (0..REGIONS.len()).map(|_| vec(rng)).collect(),
        }
    }

    fn event(&self, product: usize, region: usize) -> Vec<f64> {
        self.products[product].iter().zip(&self.regions[region]).map(|(a, b)| a + b).collect()
    }
}

/// Generate `num_videos` videos with 1..=`max_events` non-overlapping events each.
///
/// Event frames carry the sum of a product and a region prototype, non-event
/// frames a background prototype, both with Gaussian noise of σ = 0.1. Values
/// are rounded to f32 so the dataset survives a trip through tensor files.
pub fn generate_synthetic_dataset(
    seed: u64,
    num_videos: usize,
    max_events: usize,
    feature_dim: usize,
    modalities: usize,
) -> Result<SyntheticDataset> {
    if max_events == 0 || max_events > MAX_SYNTHETIC_EVENTS {
        return Err(DvcError::InvalidArgument(format!(
            "maxEvents must be in 1..={MAX_SYNTHETIC_EVENTS}, got {max_events}"
        )));
    }
    if feature_dim == 0 || modalities == 0 {
        return Err(DvcError::InvalidArgument("featureDim and modalities must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos: Vec<Prototypes> = (0..modalities).map(|_| Prototypes::sample(&mut rng, feature_dim)).collect();
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let round2 = |x: f64| (x * 100.0).round() / 100.0;

    let mut records = Vec::with_capacity(num_videos);
    for v in 0..num_videos {
        let duration = round2(rng.random_range(60.0..=300.0));
        let k = rng.random_range(1..=max_events);
        let slot = duration / k as f64;
        let mut events = Vec::with_capacity(k);
        for i in 0..k {
            let len = slot * rng.random_range(0.5..0.9);
            let start = round2(i as f64 * slot + rng.random_range(0.0..(slot - len)));
            let end = round2(start + len).min(round2((i + 1) as f64 * slot).min(duration));
            let product = rng.random_range(0..PRODUCTS.len());
            let region = rng.random_range(0..REGIONS.len());
            let caption = [VERB, PRODUCTS[product], "on", REGIONS[region], "with", TOOLS[TOOL_OF_PRODUCT[product]]]
                .iter()
                .map(|s| s.to_string())
                .collect();
            events.push((
                GroundTruthEvent { timestamp: TimeStamp::new(start, end), caption, labels: BTreeSet::from([region]) },
                product,
                region,
            ));
        }

        let frames = (duration * FEATURE_FPS).floor() as usize;
        let features: Vec<Mat> = protos
            .iter()
            .map(|p| {
                let mut m = Array2::zeros((frames, feature_dim));
                for t in 0..frames {
                    let mid = (t as f64 + 0.5) / FEATURE_FPS;
                    let base = events
                        .iter()
                        .find(|(e, _, _)| e.timestamp.contains(mid))
                        .map(|(_, prod, reg)| p.event(*prod, *reg))
                        .unwrap_or_else(|| p.background.clone());
                    for (c, b) in base.iter().enumerate() {
                        m[[t, c]] = (b + noise.sample(&mut rng)) as f32 as f64;
                    }
                }
                m
            })
            .collect();

        records.push(VideoRecord::new(
            format!("v{v:04}"),
            duration,
            (0..modalities).map(|m| format!("modality_{m}")).collect(),
            features,
            events.into_iter().map(|(e, _, _)| e).collect(),
        ));
    }

    let mut lexicon = PosLexicon::new();
    lexicon.insert(VERB.to_string(), PosTag::Verb);
    for w in PRODUCTS.iter().chain(&REGIONS).chain(&TOOLS) {
        lexicon.insert(w.to_string(), PosTag::Noun);
    }
    for w in ["on", "with"] {
        lexicon.insert(w.to_string(), PosTag::Other);
    }

    Ok(SyntheticDataset { records, lexicon, label_names: REGIONS.iter().map(|s| s.to_string()).collect() })
}
