//! Dataset, frozen backbone and per-image backbone features on disk.

use std::path::{Path, PathBuf};

use nfcs_tensor::{checkpoint, Adam, AdamConfig, Graph, ParamStore, Tensor};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, IMAGE_CHANNELS};
use super::plan::{hex_digest, SearchPlan};
use crate::decoder_graph::{apply_bn_stats, original_fcos_decoder, Mode};
use crate::search_space::NUM_INPUTS;
use crate::error::{Error, Result};
use crate::seed;
use crate::toyland::{
    batch_losses, dataset_from_bytes, dataset_to_bytes, encode_targets, generate_dataset, level_ranges, DatasetSpec,
    LevelGrid, LossConfig, PyramidTargets, SynthImage,
};

const CACHE_VERSION: u32 = 1;
const FEATURE_CHUNK: usize = 32;

/// Images with their encoded targets.
pub struct ImageSet {
    pub images: Vec<SynthImage>,
    pub targets: Vec<PyramidTargets>,
}

impl ImageSet {
    pub fn new(images: Vec<SynthImage>) -> Self {
        let targets = images
            .iter()
            .map(|im| encode_targets(im, &LevelGrid::for_image(im.size), &level_ranges(im.size)))
            .collect();
        Self { images, targets }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[N, 3, S, S]` batch of the given images.
    pub fn pixels(&self, idx: &[usize]) -> Tensor<f32> {
        let s = self.images.first().map_or(0, |im| im.size);
        let mut data = Vec::with_capacity(idx.len() * IMAGE_CHANNELS * s * s);
        for &i in idx {
            data.extend_from_slice(&self.images[i].pixels);
        }
        Tensor::from_parts(vec![idx.len(), IMAGE_CHANNELS, s, s], data)
    }
}

/// Meta-train / meta-val index split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Split {
    pub fn new(n: usize, n_train: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut train = idx[..n_train].to_vec();
        let mut val = idx[n_train..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        Self { train, val }
    }

    pub fn train_mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &i in &self.train {
            m[i] = true;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheMeta {
    version: u32,
    key: String,
    dataset: DatasetSpec,
    holdout: DatasetSpec,
    backbone_hash: String,
    backbone_final_loss: f64,
}

/// Everything a proxy evaluation reads: images, split, targets and the
/// frozen backbone's c3..c5 per image.
pub struct FeatureCache {
    pub key: String,
    pub dir: PathBuf,
    pub backbone: Backbone,
    pub backbone_params: ParamStore<f32>,
    pub backbone_hash: String,
    pub data: ImageSet,
    pub split: Split,
    pub features: Vec<[Tensor<f32>; NUM_INPUTS]>,
    pub holdout: ImageSet,
    pub holdout_features: Vec<[Tensor<f32>; NUM_INPUTS]>,
}

/// Content key of everything the cache depends on.
pub fn cache_key(plan: &SearchPlan) -> String {
    let material = serde_json::json!({
        "version": CACHE_VERSION,
        "dataset": plan.dataset_spec(),
        "holdout": plan.holdout_spec(),
        "split": plan.dataset.split,
        "backbone": plan.backbone,
        "fpn_width": plan.decoder.fpn_width,
        "groups": plan.decoder.groups,
        "fpn_norm": plan.decoder.fpn_norm,
        "seed": plan.seed,
    });
    hex_digest(material.to_string().as_bytes())[..16].to_string()
}

fn features_to_store(feats: &[[Tensor<f32>; NUM_INPUTS]]) -> ParamStore<f32> {
    let mut store = ParamStore::new();
    for (i, f) in feats.iter().enumerate() {
        for (l, t) in f.iter().enumerate() {
            store.insert(format!("{i}.c{}", l + 3), t.clone());
        }
    }
    store
}

fn features_from_store(store: &ParamStore<f32>, n: usize) -> Result<Vec<[Tensor<f32>; NUM_INPUTS]>> {
    (0..n)
        .map(|i| {
            let get = |l: usize| {
                store
                    .get(&format!("{i}.c{}", l + 3))
                    .cloned()
                    .ok_or_else(|| Error::MissingCache(format!("feature {i}.c{} absent", l + 3)))
            };
            Ok([get(0)?, get(1)?, get(2)?])
        })
        .collect()
}

impl FeatureCache {
    pub fn dir_for(plan: &SearchPlan, root: &Path) -> PathBuf {
        root.join(cache_key(plan))
    }

    /// Opens an existing cache, checking it against the plan.
    pub fn open(plan: &SearchPlan, root: &Path) -> Result<Self> {
        let dir = Self::dir_for(plan, root);
        let missing = |what: &str| Error::MissingCache(format!("{what} in {}", dir.display()));
        let meta_bytes = std::fs::read(dir.join("meta.json")).map_err(|_| missing("no meta.json"))?;
        let meta: CacheMeta = serde_json::from_slice(&meta_bytes).map_err(|_| missing("unreadable meta.json"))?;
        let key = cache_key(plan);
        if meta.version != CACHE_VERSION || meta.key != key || meta.dataset != plan.dataset_spec() {
            return Err(missing("stale cache"));
        }
        let bb_bytes = std::fs::read(dir.join("backbone.nfcs")).map_err(|_| missing("no backbone"))?;
        if hex_digest(&bb_bytes) != meta.backbone_hash {
            return Err(missing("backbone hash mismatch"));
        }
        let backbone_params: ParamStore<f32> = checkpoint::decode(&bb_bytes)?;
        let read_set = |name: &str| -> Result<ImageSet> {
            let bytes = std::fs::read(dir.join(name)).map_err(|_| missing(name))?;
            Ok(ImageSet::new(dataset_from_bytes(&bytes)?))
        };
        let data = read_set("dataset.bin")?;
        let holdout = read_set("holdout.bin")?;
        let load_feats = |name: &str, n: usize| -> Result<Vec<[Tensor<f32>; NUM_INPUTS]>> {
            let store: ParamStore<f32> = checkpoint::load(dir.join(name)).map_err(|_| missing(name))?;
            features_from_store(&store, n)
        };
        let features = load_feats("features.nfcs", data.len())?;
        let holdout_features = load_feats("holdout_features.nfcs", holdout.len())?;
        let (n_train, _) = plan.split_sizes();
        Ok(Self {
            key,
            dir,
            backbone: Backbone::new(plan.backbone.widths),
            backbone_params,
            backbone_hash: meta.backbone_hash,
            split: Split::new(data.len(), n_train, seed::derive_str(plan.seed, "split")),
            data,
            features,
            holdout,
            holdout_features,
        })
    }

    /// Opens the cache or builds it. The flag is `true` on a cache hit.
    pub fn prepare(plan: &SearchPlan, root: &Path) -> Result<(Self, bool)> {
        plan.validate()?;
        if let Ok(c) = Self::open(plan, root) {
            return Ok((c, true));
        }
        let dir = Self::dir_for(plan, root);
        std::fs::create_dir_all(&dir)?;
        let data = ImageSet::new(generate_dataset(&plan.dataset_spec())?);
        let holdout = ImageSet::new(generate_dataset(&plan.holdout_spec())?);
        let (n_train, _) = plan.split_sizes();
        let split = Split::new(data.len(), n_train, seed::derive_str(plan.seed, "split"));
        let backbone = Backbone::new(plan.backbone.widths);
        let (backbone_params, final_loss) = train_backbone(plan, &backbone, &data, &split)?;
        let features = compute_features(&backbone, &backbone_params, &data)?;
        let holdout_features = compute_features(&backbone, &backbone_params, &holdout)?;

        let bb_bytes = checkpoint::encode(&backbone_params);
        let backbone_hash = hex_digest(&bb_bytes);
        std::fs::write(dir.join("dataset.bin"), dataset_to_bytes(&data.images))?;
        std::fs::write(dir.join("holdout.bin"), dataset_to_bytes(&holdout.images))?;
        std::fs::write(dir.join("backbone.nfcs"), &bb_bytes)?;
        checkpoint::save(dir.join("features.nfcs"), &features_to_store(&features))?;
        checkpoint::save(dir.join("holdout_features.nfcs"), &features_to_store(&holdout_features))?;
        let meta = CacheMeta {
            version: CACHE_VERSION,
            key: cache_key(plan),
            dataset: plan.dataset_spec(),
            holdout: plan.holdout_spec(),
            backbone_hash: backbone_hash.clone(),
            backbone_final_loss: final_loss,
        };
        // meta.json goes last so a partial cache never opens.
        std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok((
            Self {
                key: meta.key,
                dir,
                backbone,
                backbone_params,
                backbone_hash,
                data,
                split,
                features,
                holdout,
                holdout_features,
            },
            false,
        ))
    }
}

pub fn compute_features(
    backbone: &Backbone,
    params: &ParamStore<f32>,
    set: &ImageSet,
) -> Result<Vec<[Tensor<f32>; NUM_INPUTS]>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for chunk in idx.chunks(FEATURE_CHUNK) {
        out.extend(backbone.features(params, &set.pixels(chunk))?);
    }
    Ok(out)
}

/// Trains the backbone jointly with the original decoder on meta-train.
/// Returns the backbone parameters and the final minibatch loss.
fn train_backbone(plan: &SearchPlan, backbone: &Backbone, data: &ImageSet, split: &Split) -> Result<(ParamStore<f32>, f64)> {
    let bseed = seed::derive_str(plan.seed, "backbone");
    let specs = backbone.feature_specs(plan.dataset.image_size);
    let decoder = original_fcos_decoder(specs, plan.decoder_options(plan.decoder.fpn_width))?;
    let (dec_params, mut buffers) = decoder.init_params::<f32>(seed::derive(bseed, 1));
    let mut params = backbone.init_params(bseed);
    params.extend_from(&dec_params);
    let mut adam = Adam::new(AdamConfig::with_lr(plan.backbone.lr), &params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(bseed, 2));
    let cfg = LossConfig::default();
    let mut last = f64::NAN;
    let batch = plan.backbone.batch_size.min(split.train.len());
    for it in 0..plan.backbone.iterations {
        let idx: Vec<usize> = split.train.choose_multiple(&mut rng, batch).copied().collect();
        let g = Graph::new();
        let pv = params.attach(&g);
        let x = g.constant(data.pixels(&idx));
        let c = backbone.forward(&pv, x)?;
        let mut stats = Vec::new();
        let out = decoder.forward(&pv, &buffers, c, Mode::Train, &mut stats)?;
        let targets: Vec<&PyramidTargets> = idx.iter().map(|&i| &data.targets[i]).collect();
        let loss = batch_losses(&out, &targets, &cfg)?.mean_total()?;
        last = loss.value().item() as f64;
        if !last.is_finite() {
            return Err(Error::Diverged(format!("backbone loss is {last} at iteration {it}")));
        }
        let grads = g.backward(loss)?;
        let grads = pv.gradients(&grads);
        adam.step(&mut params, &grads)?;
        apply_bn_stats(&mut buffers, &stats)?;
    }
    Ok((params.filter(|n| n.starts_with("bb.")), last))
}
