//! Synthetic relation-transition videos.
//!
//! Each action is one rule: a designated (person, object) pair whose
//! relation changes `from → to` over a short window. Other slots hold
//! distractor pairs whose relation stays constant and is never one of the
//! relations a rule uses for that object, so only the planted pair ever
//! shows a rule transition. Visual features are scene-conditioned
//! prototypes plus Gaussian noise; the semantic relation id can be corrupted
//! independently of the visual evidence.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::schema::{write_meta, write_videos, BBox, DatasetMeta, RelationToken, VideoSample, SCHEMA_VERSION};
use super::{Fold, Manifest};
use crate::error::{invalid, Result};
use crate::numerics::gumbel::splitmix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionRule {
    pub name: String,
    pub object: String,
    pub from: String,
    pub to: String,
}

impl ActionRule {
    pub fn new(name: &str, object: &str, from: &str, to: &str) -> Self {
        Self {
            name: name.into(),
            object: object.into(),
            from: from.into(),
            to: to.into(),
        }
    }
}

pub fn default_categories() -> Vec<String> {
    [
        "person", "cup", "book", "door", "chair", "phone", "laptop", "bottle", "box", "bag", "towel", "shelf",
    ]
    .map(String::from)
    .to_vec()
}

pub fn default_relations() -> Vec<String> {
    [
        "holding",
        "not_holding",
        "touching",
        "not_contacting",
        "sitting_on",
        "looking_at",
        "in_front_of",
        "behind",
    ]
    .map(String::from)
    .to_vec()
}

/// Rules come in cycles over an object's relations (three or four per
/// object): every single relation token is shared by two classes, so both
/// ends of the transition are needed to tell them apart.
pub fn default_rules() -> Vec<ActionRule> {
    vec![
        ActionRule::new("pick_up", "cup", "not_holding", "holding"),
        ActionRule::new("put_down", "cup", "holding", "touching"),
        ActionRule::new("reach_for", "cup", "not_holding", "touching"),
        ActionRule::new("sit_down", "chair", "not_contacting", "sitting_on"),
        ActionRule::new("stand_up", "chair", "sitting_on", "touching"),
        ActionRule::new("grab_chair", "chair", "not_contacting", "touching"),
        ActionRule::new("open_door", "door", "in_front_of", "touching"),
        ActionRule::new("walk_through", "door", "touching", "behind"),
        ActionRule::new("turn_back", "door", "behind", "looking_at"),
        ActionRule::new("face_door", "door", "looking_at", "in_front_of"),
        ActionRule::new("open_laptop", "laptop", "touching", "looking_at"),
        ActionRule::new("leave_laptop", "laptop", "looking_at", "not_contacting"),
        ActionRule::new("approach_laptop", "laptop", "not_contacting", "touching"),
    ]
}

/// World definition. Category 0 is the subject (person).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub categories: Vec<String>,
    pub relations: Vec<String>,
    pub rules: Vec<ActionRule>,
    /// Number of action classes; the first `num_classes` rules are used.
    pub num_classes: usize,
    pub n_scenes: usize,
    pub n_folds: usize,
    pub t_frames: usize,
    pub k_slots: usize,
    /// Raw video length range (inclusive).
    pub min_frames: usize,
    pub max_frames: usize,
    /// Raw frames spent in each phase of a planted transition.
    pub window: usize,
    pub d_visual: usize,
    pub d_union: usize,
    /// Feature noise σ_n.
    pub noise: f64,
    /// Semantic relation corruption rate ρ.
    pub corruption: f64,
    /// Weight of the scene-specific prototype component.
    pub scene_shift: f64,
    pub multi_label: bool,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            categories: default_categories(),
            relations: default_relations(),
            rules: default_rules(),
            num_classes: 10,
            n_scenes: 10,
            n_folds: 5,
            t_frames: 6,
            k_slots: 4,
            min_frames: 6,
            max_frames: 6,
            window: 2,
            d_visual: 16,
            d_union: 16,
            noise: 0.2,
            corruption: 0.1,
            scene_shift: 0.5,
            multi_label: false,
            seed: 0,
        }
    }
}

/// Resolved rule: ids instead of names.
#[derive(Clone, Copy, Debug)]
struct RuleIds {
    object: usize,
    from: usize,
    to: usize,
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.categories.len() < 2 {
            return Err(invalid("need the subject category and at least one object category"));
        }
        if self.relations.is_empty() {
            return Err(invalid("relation vocabulary is empty"));
        }
        if self.num_classes == 0 {
            return Err(invalid("num_classes must be positive"));
        }
        if self.num_classes > self.rules.len() {
            return Err(invalid(format!(
                "{} classes requested but only {} rules defined",
                self.num_classes,
                self.rules.len()
            )));
        }
        let mut names: Vec<&str> = self.rules[..self.num_classes].iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.num_classes {
            return Err(invalid("action names must be unique"));
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.corruption) {
            return Err(invalid("noise and corruption must lie in [0, 1]"));
        }
        if self.scene_shift < 0.0 || !self.scene_shift.is_finite() {
            return Err(invalid("scene_shift must be non-negative"));
        }
        if self.t_frames == 0 || self.k_slots == 0 || self.window == 0 {
            return Err(invalid("t_frames, k_slots and window must be positive"));
        }
        if self.min_frames > self.max_frames || self.min_frames < 2 * self.window {
            return Err(invalid(format!(
                "frame range {}..={} cannot hold a transition window of 2×{}",
                self.min_frames, self.max_frames, self.window
            )));
        }
        if self.n_scenes == 0 || self.n_folds == 0 || self.n_folds > self.n_scenes {
            return Err(invalid("need 1 ≤ n_folds ≤ n_scenes"));
        }
        if self.d_visual == 0 || self.d_union == 0 {
            return Err(invalid("feature dimensions must be positive"));
        }
        let max_planted = if self.multi_label { 3 } else { 1 };
        if self.k_slots < max_planted.min(self.num_classes) {
            return Err(invalid("too few slots for the planted rules"));
        }
        self.resolve_rules().map(|_| ())
    }

    fn resolve_rules(&self) -> Result<Vec<RuleIds>> {
        let cat = |n: &str| {
            self.categories
                .iter()
                .position(|c| c == n)
                .filter(|&i| i > 0)
                .ok_or_else(|| invalid(format!("unknown object category '{n}'")))
        };
        let rel = |n: &str| {
            self.relations
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| invalid(format!("unknown relation '{n}'")))
        };
        self.rules[..self.num_classes]
            .iter()
            .map(|r| {
                let ids = RuleIds {
                    object: cat(&r.object)?,
                    from: rel(&r.from)?,
                    to: rel(&r.to)?,
                };
                if ids.from == ids.to {
                    return Err(invalid(format!("rule '{}' has no transition", r.name)));
                }
                Ok(ids)
            })
            .collect()
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            schema_version: SCHEMA_VERSION,
            categories: self.categories.clone(),
            relations: self.relations.clone(),
            actions: self.rules[..self.num_classes].iter().map(|r| r.name.clone()).collect(),
            t_frames: self.t_frames,
            k_slots: self.k_slots,
            num_classes: self.num_classes,
            d_visual: self.d_visual,
            d_union: self.d_union,
            multi_label: self.multi_label,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.0,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(invalid("split ratios must be in [0, 1] and sum to 1"));
        }
        Ok(())
    }
}

/// File form of a generation request (`gen-data` input).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSpec {
    #[serde(default = "default_n_videos")]
    pub n_videos: usize,
    #[serde(default)]
    pub split: SplitRatios,
    #[serde(default)]
    pub world: WorldSpec,
}

fn default_n_videos() -> usize {
    600
}

impl Default for GenerateSpec {
    fn default() -> Self {
        Self {
            n_videos: default_n_videos(),
            split: SplitRatios::default(),
            world: WorldSpec::default(),
        }
    }
}

impl GenerateSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| crate::LairError::Parse {
            line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
            field: "spec".into(),
            message: e.message().to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub meta: DatasetMeta,
    pub samples: Vec<VideoSample>,
    pub manifest: Manifest,
}

struct Prototypes {
    /// `[category][scene]`
    categories: Vec<Vec<Vec<f64>>>,
    /// `[relation][scene]`
    relations: Vec<Vec<Vec<f64>>>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

impl Prototypes {
    fn draw(spec: &WorldSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(spec.seed ^ 0x5052_4f54));
        let norm = (1.0 + spec.scene_shift * spec.scene_shift).sqrt();
        let mut table = |count: usize, dim: usize| -> Vec<Vec<Vec<f64>>> {
            (0..count)
                .map(|_| {
                    let global = gaussian_vec(&mut rng, dim);
                    (0..spec.n_scenes)
                        .map(|_| {
                            let local = gaussian_vec(&mut rng, dim);
                            global
                                .iter()
                                .zip(&local)
                                .map(|(g, l)| (g + spec.scene_shift * l) / norm)
                                .collect()
                        })
                        .collect()
                })
                .collect()
        };
        let categories = table(spec.categories.len(), spec.d_visual);
        let relations = table(spec.relations.len(), spec.d_union);
        Self { categories, relations }
    }
}

fn clamp_box(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    let x1 = (cx - w / 2.0).clamp(0.0, 0.9);
    let y1 = (cy - h / 2.0).clamp(0.0, 0.9);
    let x2 = (cx + w / 2.0).clamp(x1 + 0.05, 1.0);
    let y2 = (cy + h / 2.0).clamp(y1 + 0.05, 1.0);
    [x1, y1, x2, y2]
}

/// Object box placement depends on the relation; the subject stays left.
fn boxes(rel: usize, noise: f64, rng: &mut ChaCha8Rng) -> (BBox, BBox) {
    let mut j = || rng.sample::<f64, _>(StandardNormal) * 0.02 * (1.0 + noise);
    let subject = clamp_box(0.35 + j(), 0.5 + j(), 0.3, 0.6);
    let ax = 0.15 + 0.7 * ((rel * 7) % 10) as f64 / 9.0;
    let ay = 0.15 + 0.7 * ((rel * 3 + 1) % 10) as f64 / 9.0;
    let object = clamp_box(ax + j(), ay + j(), 0.25, 0.25);
    (subject, object)
}

struct Pair {
    object: usize,
    relation_at: Vec<Option<usize>>,
}

fn noisy(proto: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    proto
        .iter()
        .map(|p| p + noise * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn video_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed) ^ index as u64))
}

fn generate_video(
    spec: &WorldSpec,
    rules: &[RuleIds],
    protos: &Prototypes,
    index: usize,
) -> VideoSample {
    let mut rng = video_rng(spec.seed, index);
    let c = spec.num_classes;
    let n_frames = rng.gen_range(spec.min_frames..=spec.max_frames);
    let scene = rng.gen_range(0..spec.n_scenes);

    let mut labels = vec![index % c];
    if spec.multi_label {
        let extra = rng.gen_range(0..=2usize).min(spec.k_slots - 1);
        let mut others: Vec<usize> = (0..c).filter(|&a| a != labels[0]).collect();
        others.shuffle(&mut rng);
        for a in others {
            if labels.len() > extra {
                break;
            }
            if labels.iter().all(|&l| rules[l].object != rules[a].object) {
                labels.push(a);
            }
        }
        labels.sort_unstable();
    }

    let mut slots: Vec<usize> = (0..spec.k_slots).collect();
    slots.shuffle(&mut rng);
    let mut pairs: Vec<Option<Pair>> = (0..spec.k_slots).map(|_| None).collect();
    let mut key_tokens = Vec::new();
    let planted_objects: Vec<usize> = labels.iter().map(|&l| rules[l].object).collect();

    for (&label, &slot) in labels.iter().zip(&slots) {
        let r = rules[label];
        let start = rng.gen_range(0..=n_frames - 2 * spec.window);
        let mut relation_at = vec![None; n_frames];
        for f in 0..spec.window {
            relation_at[start + f] = Some(r.from);
            relation_at[start + spec.window + f] = Some(r.to);
        }
        key_tokens.extend((start..start + 2 * spec.window).map(|f| (f, slot)));
        pairs[slot] = Some(Pair {
            object: r.object,
            relation_at,
        });
    }

    let distractor_objects: Vec<usize> =
        (1..spec.categories.len()).filter(|o| !planted_objects.contains(o)).collect();
    for &slot in &slots[labels.len()..] {
        if distractor_objects.is_empty() || rng.gen_bool(0.25) {
            continue;
        }
        let object = *distractor_objects.choose(&mut rng).expect("non-empty");
        // relations that never take part in a transition of this object
        let background: Vec<usize> = (0..spec.relations.len())
            .filter(|&rel| !rules.iter().any(|r| r.object == object && (r.from == rel || r.to == rel)))
            .collect();
        let relation = match background.choose(&mut rng) {
            Some(&rel) => rel,
            None => rng.gen_range(0..spec.relations.len()),
        };
        let len = rng.gen_range(2.min(n_frames)..=n_frames);
        let start = rng.gen_range(0..=n_frames - len);
        let mut relation_at = vec![None; n_frames];
        relation_at[start..start + len].iter_mut().for_each(|r| *r = Some(relation));
        pairs[slot] = Some(Pair { object, relation_at });
    }

    let subject = 0;
    let frames = (0..n_frames)
        .map(|f| {
            (0..spec.k_slots)
                .map(|k| {
                    let Some(pair) = &pairs[k] else {
                        return RelationToken::padding(spec.d_visual, spec.d_union);
                    };
                    let Some(rel) = pair.relation_at[f] else {
                        return RelationToken::padding(spec.d_visual, spec.d_union);
                    };
                    let (subject_box, object_box) = boxes(rel, spec.noise, &mut rng);
                    let subject_feat = noisy(&protos.categories[subject][scene], spec.noise, &mut rng);
                    let object_feat = noisy(&protos.categories[pair.object][scene], spec.noise, &mut rng);
                    let union_feat = noisy(&protos.relations[rel][scene], spec.noise, &mut rng);
                    let observed = if spec.corruption > 0.0 && rng.gen_bool(spec.corruption) {
                        let other = rng.gen_range(0..spec.relations.len() - 1);
                        if other >= rel {
                            other + 1
                        } else {
                            other
                        }
                    } else {
                        rel
                    };
                    RelationToken {
                        subject_feat,
                        object_feat,
                        union_feat,
                        subject_box,
                        object_box,
                        subject_cat: Some(subject),
                        relation_cat: Some(if spec.relations.len() > 1 { observed } else { rel }),
                        object_cat: Some(pair.object),
                        valid: true,
                    }
                })
                .collect()
        })
        .collect();

    key_tokens.sort_unstable();
    VideoSample {
        video_id: format!("v{index:05}"),
        labels,
        frames,
        scene_id: Some(scene),
        key_tokens,
    }
}

fn spec_hash(spec: &WorldSpec, n_videos: usize, ratios: &SplitRatios) -> Result<String> {
    let canonical = serde_json::to_vec(&(spec, n_videos, ratios))?;
    Ok(hex::encode(Sha256::digest(&canonical)))
}

/// Generates `n_videos` samples plus split manifest.
pub fn generate_dataset(spec: &WorldSpec, n_videos: usize, ratios: SplitRatios) -> Result<GeneratedDataset> {
    spec.validate()?;
    ratios.validate()?;
    if n_videos == 0 {
        return Err(invalid("n_videos must be at least 1"));
    }
    let rules = spec.resolve_rules()?;
    let protos = Prototypes::draw(spec);
    let samples: Vec<VideoSample> = (0..n_videos).map(|i| generate_video(spec, &rules, &protos, i)).collect();

    let mut order: Vec<usize> = (0..n_videos).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix(spec.seed ^ 0x5350_4c49)));
    let n_train = (ratios.train * n_videos as f64).round() as usize;
    let n_val = ((ratios.val * n_videos as f64).round() as usize).min(n_videos - n_train.min(n_videos));
    let n_train = n_train.min(n_videos);
    let ids = |range: &[usize]| -> Vec<String> {
        let mut v: Vec<usize> = range.to_vec();
        v.sort_unstable();
        v.into_iter().map(|i| samples[i].video_id.clone()).collect()
    };
    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), ids(&order[..n_train]));
    splits.insert("val".to_string(), ids(&order[n_train..n_train + n_val]));
    splits.insert("test".to_string(), ids(&order[n_train + n_val..]));

    let folds = (0..spec.n_folds)
        .map(|f| {
            let test_scenes: Vec<usize> = (0..spec.n_scenes).filter(|s| s % spec.n_folds == f).collect();
            let (test, train): (Vec<&VideoSample>, Vec<&VideoSample>) = samples
                .iter()
                .partition(|s| test_scenes.contains(&s.scene_id.unwrap_or(0)));
            Fold {
                test_scenes,
                train: train.iter().map(|s| s.video_id.clone()).collect(),
                test: test.iter().map(|s| s.video_id.clone()).collect(),
            }
        })
        .collect();

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        seed: spec.seed,
        spec_hash: spec_hash(spec, n_videos, &ratios)?,
        splits,
        folds,
    };
    Ok(GeneratedDataset {
        meta: spec.meta(),
        samples,
        manifest,
    })
}

/// Writes `meta.json`, `videos.jsonl` and `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, data: &GeneratedDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_meta(dir, &data.meta)?;
    write_videos(dir, &data.samples)?;
    data.manifest.save(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldSpec {
        WorldSpec {
            d_visual: 4,
            d_union: 4,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn rejects_more_classes_than_rules() {
        let spec = WorldSpec {
            num_classes: 14,
            ..small()
        };
        assert!(generate_dataset(&spec, 10, SplitRatios::default()).is_err());
    }

    #[test]
    fn labels_are_balanced() {
        let d = generate_dataset(&small(), 100, SplitRatios::default()).unwrap();
        let mut counts = vec![0; 10];
        for s in &d.samples {
            counts[s.labels[0]] += 1;
        }
        assert!(counts.iter().all(|&c| c >= 100 / 20));
    }

    #[test]
    fn planted_transition_present_without_corruption() {
        let spec = WorldSpec {
            corruption: 0.0,
            ..small()
        };
        let rules = spec.resolve_rules().unwrap();
        let d = generate_dataset(&spec, 40, SplitRatios::default()).unwrap();
        for s in &d.samples {
            let r = rules[s.labels[0]];
            let slot = s.key_tokens[0].1;
            let seq: Vec<usize> = s.key_tokens.iter().map(|&(f, k)| s.frames[f][k].relation_cat.unwrap()).collect();
            assert!(s.key_tokens.iter().all(|&(_, k)| k == slot));
            assert_eq!(seq.first(), Some(&r.from));
            assert_eq!(seq.last(), Some(&r.to));
        }
    }

    #[test]
    fn folds_hold_out_scenes() {
        let d = generate_dataset(&small(), 60, SplitRatios::default()).unwrap();
        let scene = |id: &str| d.samples.iter().find(|s| s.video_id == id).unwrap().scene_id.unwrap();
        for f in &d.manifest.folds {
            for id in &f.train {
                assert!(!f.test_scenes.contains(&scene(id)));
            }
            for id in &f.test {
                assert!(f.test_scenes.contains(&scene(id)));
            }
            assert_eq!(f.train.len() + f.test.len(), 60);
        }
    }
}
