//! Scene synthesis and trial generation.
//!
//! A scene is a 56x56 canvas split into four 28x28 quadrants, indexed
//! row-major: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
//! Unoccupied quadrants are all-zero.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mnist::{DigitStore, Split, DIGIT_PIXELS, DIGIT_SIDE, N_CLASSES};
use crate::pgm;

pub const SCENE_SIDE: usize = 2 * DIGIT_SIDE;
pub const SCENE_PIXELS: usize = SCENE_SIDE * SCENE_SIDE;
pub const QUADRANTS: usize = 4;

/// Retry budget for strict derangements.
pub const STRICT_RETRIES: usize = 200;

/// Independent RNG stream `index` under a master seed.
pub fn substream(master: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

/// Row and column offset of a quadrant's 28x28 block.
pub fn quadrant_origin(q: usize) -> (usize, usize) {
    (DIGIT_SIDE * (q / 2), DIGIT_SIDE * (q % 2))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Placement {
    pub class: u8,
    pub quadrant: u8,
    /// Original dataset index within the store the scene was composed from.
    pub exemplar: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct SceneSpec {
    pub entries: Vec<Placement>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.entries.len() > QUADRANTS {
            return Err(Error::Spec(format!("{} objects in a 4-quadrant scene", self.entries.len())));
        }
        let mut quads = HashSet::new();
        let mut classes = HashSet::new();
        for p in &self.entries {
            if p.quadrant as usize >= QUADRANTS {
                return Err(Error::Spec(format!("quadrant {} outside 0..4", p.quadrant)));
            }
            if p.class as usize >= N_CLASSES {
                return Err(Error::Spec(format!("class {} outside 0..10", p.class)));
            }
            if !quads.insert(p.quadrant) {
                return Err(Error::Spec(format!("quadrant {} occupied twice", p.quadrant)));
            }
            if !classes.insert(p.class) {
                return Err(Error::Spec(format!("class {} appears twice", p.class)));
            }
        }
        Ok(())
    }

    /// Class per quadrant, `None` for blanks.
    pub fn quadrant_classes(&self) -> [Option<u8>; QUADRANTS] {
        let mut out = [None; QUADRANTS];
        for p in &self.entries {
            out[p.quadrant as usize] = Some(p.class);
        }
        out
    }

    pub fn quadrant_exemplars(&self) -> [Option<usize>; QUADRANTS] {
        let mut out = [None; QUADRANTS];
        for p in &self.entries {
            out[p.quadrant as usize] = Some(p.exemplar);
        }
        out
    }

    pub fn quadrant_of(&self, class: u8) -> Option<usize> {
        self.entries.iter().find(|p| p.class == class).map(|p| p.quadrant as usize)
    }

    pub fn sorted_classes(&self) -> Vec<u8> {
        let mut c: Vec<u8> = self.entries.iter().map(|p| p.class).collect();
        c.sort_unstable();
        c
    }
}

/// A composed 56x56 scene and the spec it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub pixels: Vec<f32>,
    pub spec: SceneSpec,
    pub split: Split,
}

impl Scene {
    /// Copy of quadrant `q` as a 28x28 block.
    pub fn quadrant(&self, q: usize) -> Vec<f32> {
        extract_quadrant(&self.pixels, q)
    }
}

pub fn extract_quadrant(pixels: &[f32], q: usize) -> Vec<f32> {
    let (r0, c0) = quadrant_origin(q);
    let mut out = Vec::with_capacity(DIGIT_PIXELS);
    for r in 0..DIGIT_SIDE {
        let start = (r0 + r) * SCENE_SIDE + c0;
        out.extend_from_slice(&pixels[start..start + DIGIT_SIDE]);
    }
    out
}

pub fn compose_scene(spec: &SceneSpec, store: &DigitStore) -> Result<Scene> {
    spec.validate()?;
    let mut pixels = vec![0.0f32; SCENE_PIXELS];
    for p in &spec.entries {
        if store.label(p.exemplar) != Some(p.class) {
            return Err(Error::Spec(format!(
                "exemplar {} is not an instance of class {}",
                p.exemplar, p.class
            )));
        }
        let digit = store.exemplar(p.exemplar)?;
        let (r0, c0) = quadrant_origin(p.quadrant as usize);
        for r in 0..DIGIT_SIDE {
            let dst = (r0 + r) * SCENE_SIDE + c0;
            pixels[dst..dst + DIGIT_SIDE].copy_from_slice(&digit[r * DIGIT_SIDE..(r + 1) * DIGIT_SIDE]);
        }
    }
    Ok(Scene { pixels, spec: spec.clone(), split: store.split() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExemplarMode {
    Fixed,
    Varying,
}

impl ExemplarMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ExemplarMode::Fixed => "fixed",
            ExemplarMode::Varying => "varying",
        }
    }
}

impl std::str::FromStr for ExemplarMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(ExemplarMode::Fixed),
            "varying" => Ok(ExemplarMode::Varying),
            _ => Err(Error::Config(format!("unknown exemplar mode '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Match,
    Mismatch,
}

impl Label {
    pub fn is_match(self) -> bool {
        self == Label::Match
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Match => "match",
            Label::Mismatch => "mismatch",
        }
    }
}

/// A scene, a caption, and whether they belong together.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub scene: Arc<Scene>,
    pub caption: Vec<u8>,
    pub label: Label,
    /// Index of the scene within the generating matching set.
    pub scene_id: usize,
    /// For mismatches, the scene whose caption was borrowed.
    pub donor: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetConfig {
    pub k: usize,
    pub exemplar_mode: ExemplarMode,
    pub n_pairs: usize,
    pub seed: u64,
    pub strict_mismatch: bool,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.k) {
            return Err(Error::Config(format!("scene complexity k={} outside 2..=4", self.k)));
        }
        if self.n_pairs == 0 || self.n_pairs % self.k != 0 {
            return Err(Error::Config(format!(
                "n_pairs={} is not a positive multiple of k={}",
                self.n_pairs, self.k
            )));
        }
        Ok(())
    }

    pub fn n_scenes(&self) -> usize {
        self.n_pairs / self.k
    }
}

fn pick_exemplar<R: Rng + ?Sized>(
    store: &DigitStore,
    class: usize,
    mode: ExemplarMode,
    fixed: Option<&[usize; N_CLASSES]>,
    rng: &mut R,
) -> Result<usize> {
    match mode {
        ExemplarMode::Fixed => Ok(fixed.expect("fixed exemplars resolved")[class]),
        ExemplarMode::Varying => {
            let pool = store.class_indices(class);
            if pool.is_empty() {
                return Err(Error::Data(format!("class {class} has no exemplars")));
            }
            Ok(pool[rng.random_range(0..pool.len())])
        }
    }
}

/// Samples a scene with the given classes in uniformly random distinct quadrants.
fn place_classes<R: Rng + ?Sized>(
    classes: &[u8],
    store: &DigitStore,
    mode: ExemplarMode,
    fixed: Option<&[usize; N_CLASSES]>,
    rng: &mut R,
) -> Result<SceneSpec> {
    let quads = sample(rng, QUADRANTS, classes.len()).into_vec();
    let mut entries = Vec::with_capacity(classes.len());
    for (&c, &q) in classes.iter().zip(&quads) {
        let exemplar = pick_exemplar(store, c as usize, mode, fixed, rng)?;
        entries.push(Placement { class: c, quadrant: q as u8, exemplar });
    }
    Ok(SceneSpec { entries })
}

fn fixed_exemplars(store: &DigitStore, mode: ExemplarMode) -> Result<Option<[usize; N_CLASSES]>> {
    match mode {
        ExemplarMode::Fixed => store.first_instances().map(Some),
        ExemplarMode::Varying => Ok(None),
    }
}

/// Matching trials drawn over the classes in `pool`.
fn matching_over<R: Rng + ?Sized>(
    config: &DatasetConfig,
    pool: &[u8],
    store: &DigitStore,
    rng: &mut R,
) -> Result<Vec<Trial>> {
    config.validate()?;
    if store.split() != Split::Train {
        return Err(Error::Usage("training scenes are drawn from the train split".into()));
    }
    let fixed = fixed_exemplars(store, config.exemplar_mode)?;
    let mut trials = Vec::with_capacity(config.n_scenes());
    let mut seen = HashSet::new();
    let mut duplicates = 0usize;
    for scene_id in 0..config.n_scenes() {
        let classes: Vec<u8> = sample(rng, pool.len(), config.k).into_iter().map(|i| pool[i]).collect();
        let spec = place_classes(&classes, store, config.exemplar_mode, fixed.as_ref(), rng)?;
        let mut caption = classes;
        caption.shuffle(rng);
        if !seen.insert(spec.clone()) {
            duplicates += 1;
        }
        let scene = Arc::new(compose_scene(&spec, store)?);
        trials.push(Trial { scene, caption, label: Label::Match, scene_id, donor: None });
    }
    if duplicates > 0 {
        log::warn!(
            "{duplicates} of {} scenes repeat an earlier (classes, placement, exemplars) tuple",
            config.n_scenes()
        );
    }
    Ok(trials)
}

/// `n_pairs / k` matching scenes with `k` distinct classes each.
pub fn generate_matching_trials<R: Rng + ?Sized>(
    config: &DatasetConfig,
    store: &DigitStore,
    rng: &mut R,
) -> Result<Vec<Trial>> {
    let all: Vec<u8> = (0..N_CLASSES as u8).collect();
    matching_over(config, &all, store, rng)
}

/// Uniform random derangement of `0..n` by rejection.
fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Reassigns captions so that no scene keeps its own. In strict mode a
/// caption is also never given to a scene with the same class multiset.
pub fn generate_mismatching_trials<R: Rng + ?Sized>(
    matching: &[Trial],
    rng: &mut R,
    strict: bool,
) -> Result<Vec<Trial>> {
    let n = matching.len();
    if n < 2 {
        return Err(Error::Generation(format!("derangement of {n} trial(s) is impossible")));
    }
    let classes: Vec<Vec<u8>> = matching.iter().map(|t| t.scene.spec.sorted_classes()).collect();
    let caption_sets: Vec<Vec<u8>> = matching
        .iter()
        .map(|t| {
            let mut c = t.caption.clone();
            c.sort_unstable();
            c
        })
        .collect();
    let ok = |recipient: usize, donor: usize| {
        recipient != donor && (!strict || caption_sets[donor] != classes[recipient])
    };

    let mut perm = derangement(n, rng);
    if strict {
        let mut attempt = 0;
        loop {
            // local repair: swap a colliding assignment with a random partner
            for _ in 0..4 * n {
                let bad: Vec<usize> = (0..n).filter(|&i| !ok(i, perm[i])).collect();
                if bad.is_empty() {
                    break;
                }
                let i = bad[rng.random_range(0..bad.len())];
                let j = rng.random_range(0..n);
                if ok(i, perm[j]) && ok(j, perm[i]) {
                    perm.swap(i, j);
                }
            }
            if (0..n).all(|i| ok(i, perm[i])) {
                break;
            }
            attempt += 1;
            if attempt >= STRICT_RETRIES {
                let i = (0..n).find(|&i| !ok(i, perm[i])).unwrap();
                return Err(Error::Generation(format!(
                    "no strict derangement found after {STRICT_RETRIES} attempts: scene {i} classes {:?} collide with caption of scene {}",
                    classes[i], perm[i]
                )));
            }
            perm = derangement(n, rng);
        }
    }

    Ok(perm
        .iter()
        .enumerate()
        .map(|(i, &d)| Trial {
            scene: Arc::clone(&matching[i].scene),
            caption: matching[d].caption.clone(),
            label: Label::Mismatch,
            scene_id: matching[i].scene_id,
            donor: Some(matching[d].scene_id),
        })
        .collect())
}

/// Matching trials followed by their mismatches.
pub fn generate_training_set<R: Rng + ?Sized>(
    config: &DatasetConfig,
    store: &DigitStore,
    rng: &mut R,
) -> Result<Vec<Trial>> {
    let mut trials = generate_matching_trials(config, store, rng)?;
    let mismatches = generate_mismatching_trials(&trials, rng, config.strict_mismatch)?;
    trials.extend(mismatches);
    Ok(trials)
}

/// A 4AFC probe: one target and three foils filling all quadrants.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTrial {
    pub scene: Arc<Scene>,
    /// The single target word.
    pub caption: Vec<u8>,
    pub target_word: u8,
    pub target_quadrant: usize,
    pub foils: [u8; 3],
}

/// `per_word` evaluation scenes per word. Fixed mode reuses the fixed train
/// exemplars (pass the train store); varying mode samples from whatever
/// store is passed (the test split).
pub fn generate_eval_trials<R: Rng + ?Sized>(
    store: &DigitStore,
    mode: ExemplarMode,
    rng: &mut R,
    per_word: usize,
) -> Result<Vec<EvalTrial>> {
    if per_word == 0 {
        return Err(Error::Config("per_word must be at least 1".into()));
    }
    let fixed = fixed_exemplars(store, mode)?;
    let mut out = Vec::with_capacity(per_word * N_CLASSES);
    for target in 0..N_CLASSES as u8 {
        let others: Vec<u8> = (0..N_CLASSES as u8).filter(|&c| c != target).collect();
        for _ in 0..per_word {
            let picks = sample(rng, others.len(), 3).into_vec();
            let foils = [others[picks[0]], others[picks[1]], others[picks[2]]];
            let classes = [target, foils[0], foils[1], foils[2]];
            let spec = place_classes(&classes, store, mode, fixed.as_ref(), rng)?;
            let target_quadrant = spec.entries[0].quadrant as usize;
            out.push(EvalTrial {
                scene: Arc::new(compose_scene(&spec, store)?),
                caption: vec![target],
                target_word: target,
                target_quadrant,
                foils,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MeMode {
    MatchOnly,
    MatchPlusMismatch,
}

impl MeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MeMode::MatchOnly => "match_only",
            MeMode::MatchPlusMismatch => "match_plus_mismatch",
        }
    }
}

impl std::str::FromStr for MeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "match_only" => Ok(MeMode::MatchOnly),
            "match_plus_mismatch" => Ok(MeMode::MatchPlusMismatch),
            _ => Err(Error::Config(format!("unknown ME mode '{s}'"))),
        }
    }
}

pub const ME_PAIRS: usize = 72;
pub const ME_EXTRA_MISMATCHES: usize = 5;

#[derive(Clone, Debug)]
pub struct MeDataset {
    pub excluded: u8,
    pub foil: u8,
    /// Balanced k=2 fixed-exemplar set over the nine familiar classes.
    pub base: Vec<Trial>,
    /// Trials added for the ME condition: the probe, plus mismatches in
    /// match-plus-mismatch mode.
    pub me_trials: Vec<Trial>,
    pub probe: Trial,
}

impl MeDataset {
    pub fn training_set(&self) -> Vec<Trial> {
        self.base.iter().chain(&self.me_trials).cloned().collect()
    }

    pub fn novel_quadrant(&self) -> usize {
        self.probe.scene.spec.quadrant_of(self.excluded).expect("probe holds the novel digit")
    }

    pub fn foil_quadrant(&self) -> usize {
        self.probe.scene.spec.quadrant_of(self.foil).expect("probe holds the foil digit")
    }
}

pub fn generate_me_dataset<R: Rng + ?Sized>(
    excluded: u8,
    mode: MeMode,
    store: &DigitStore,
    rng: &mut R,
) -> Result<MeDataset> {
    if excluded as usize >= N_CLASSES {
        return Err(Error::Config(format!("excluded class {excluded} outside 0..10")));
    }
    let familiar: Vec<u8> = (0..N_CLASSES as u8).filter(|&c| c != excluded).collect();
    let config = DatasetConfig {
        k: 2,
        exemplar_mode: ExemplarMode::Fixed,
        n_pairs: ME_PAIRS,
        seed: 0,
        strict_mismatch: false,
    };
    let mut base = matching_over(&config, &familiar, store, rng)?;
    let mismatches = generate_mismatching_trials(&base, rng, false)?;
    let n_scenes = base.len();
    base.extend(mismatches);

    let fixed = store.first_instances()?;
    let foil = familiar[rng.random_range(0..familiar.len())];
    let spec = place_classes(&[excluded, foil], store, ExemplarMode::Fixed, Some(&fixed), rng)?;
    let probe = Trial {
        scene: Arc::new(compose_scene(&spec, store)?),
        caption: vec![excluded],
        label: Label::Match,
        scene_id: n_scenes,
        donor: None,
    };
    let mut me_trials = vec![probe.clone()];
    if mode == MeMode::MatchPlusMismatch {
        for s in sample(rng, n_scenes, ME_EXTRA_MISMATCHES) {
            me_trials.push(Trial {
                scene: Arc::clone(&base[s].scene),
                caption: vec![excluded],
                label: Label::Mismatch,
                scene_id: base[s].scene_id,
                donor: Some(n_scenes),
            });
        }
    }
    Ok(MeDataset { excluded, foil, base, me_trials, probe })
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

/// Writes `<trial index>.pgm` per trial and a `manifest.csv` describing them.
pub fn dump_trials(trials: &[Trial], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("manifest.csv"))?;
    w.write_record(["trial_id", "label", "caption", "quadrant_classes", "exemplar_indices"])?;
    for (i, t) in trials.iter().enumerate() {
        pgm::write_unit(&dir.join(format!("{i}.pgm")), SCENE_SIDE, SCENE_SIDE, &t.scene.pixels)?;
        let classes = t.scene.spec.quadrant_classes().map(|c| c.map_or(-1, |c| c as i64));
        let exemplars = t.scene.spec.quadrant_exemplars().map(|e| e.map_or(-1, |e| e as i64));
        w.write_record([
            i.to_string(),
            t.label.as_str().to_string(),
            join(&t.caption),
            join(classes),
            join(exemplars),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mnist::ImageStack;

    /// Two exemplars per class, each filled with a class-specific pattern.
    fn toy_store(split: Split) -> DigitStore {
        let labels: Vec<u8> = (0..20).map(|i| (i % 10) as u8).collect();
        let pixels = (0..20 * DIGIT_PIXELS)
            .map(|i| {
                let (img, px) = (i / DIGIT_PIXELS, i % DIGIT_PIXELS);
                (1 + (img * 7 + px) % 250) as u8
            })
            .collect();
        DigitStore::build(&ImageStack { rows: 28, cols: 28, pixels }, &labels, split, true).unwrap()
    }

    fn cfg(k: usize, n_pairs: usize) -> DatasetConfig {
        DatasetConfig { k, exemplar_mode: ExemplarMode::Fixed, n_pairs, seed: 1, strict_mismatch: false }
    }

    #[test]
    fn placement_rule() {
        let store = toy_store(Split::Train);
        let spec = SceneSpec {
            entries: vec![
                Placement { class: 3, quadrant: 0, exemplar: 3 },
                Placement { class: 8, quadrant: 3, exemplar: 18 },
            ],
        };
        let scene = compose_scene(&spec, &store).unwrap();
        for (i, &v) in scene.pixels.iter().enumerate() {
            let (r, c) = (i / SCENE_SIDE, i % SCENE_SIDE);
            let q = (r / 28) * 2 + c / 28;
            if q == 1 || q == 2 {
                assert_eq!(v, 0.0);
            } else {
                assert!(v > 0.0);
            }
        }
        assert_eq!(scene.quadrant(0), store.exemplar(3).unwrap());
        assert_eq!(scene.quadrant(3), store.exemplar(18).unwrap());
        let empty = compose_scene(&SceneSpec::default(), &store).unwrap();
        assert!(empty.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_quadrant_rejected() {
        let store = toy_store(Split::Train);
        let spec = SceneSpec {
            entries: vec![
                Placement { class: 3, quadrant: 1, exemplar: 3 },
                Placement { class: 4, quadrant: 1, exemplar: 4 },
            ],
        };
        assert!(matches!(compose_scene(&spec, &store), Err(Error::Spec(_))));
    }

    #[test]
    fn matching_counts_and_captions() {
        let store = toy_store(Split::Train);
        let mut rng = substream(5, 0);
        let trials = generate_matching_trials(&cfg(2, 72), &store, &mut rng).unwrap();
        assert_eq!(trials.len(), 36);
        for t in &trials {
            assert_eq!(t.caption.len(), 2);
            assert_eq!(t.label, Label::Match);
            let mut cap = t.caption.clone();
            cap.sort_unstable();
            assert_eq!(cap, t.scene.spec.sorted_classes());
            t.scene.spec.validate().unwrap();
        }
        assert!(matches!(generate_matching_trials(&cfg(2, 35), &store, &mut rng), Err(Error::Config(_))));
        assert!(matches!(generate_matching_trials(&cfg(5, 35), &store, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn fixed_mode_reuses_first_instance() {
        let store = toy_store(Split::Train);
        let first = store.first_instances().unwrap();
        let mut rng = substream(9, 0);
        let trials = generate_matching_trials(&cfg(3, 90), &store, &mut rng).unwrap();
        for t in &trials {
            for p in &t.scene.spec.entries {
                assert_eq!(p.exemplar, first[p.class as usize]);
                assert_eq!(t.scene.quadrant(p.quadrant as usize), store.exemplar(first[p.class as usize]).unwrap());
            }
        }
    }

    #[test]
    fn two_trial_derangement_swaps() {
        let store = toy_store(Split::Train);
        let mut rng = substream(2, 0);
        let m = generate_matching_trials(&cfg(2, 4), &store, &mut rng).unwrap();
        let mm = generate_mismatching_trials(&m, &mut rng, false).unwrap();
        assert_eq!(mm[0].caption, m[1].caption);
        assert_eq!(mm[1].caption, m[0].caption);
        assert_eq!(mm[0].donor, Some(1));
        assert!(matches!(generate_mismatching_trials(&m[..1], &mut rng, false), Err(Error::Generation(_))));
    }

    #[test]
    fn strict_mode_with_identical_class_sets_fails() {
        let store = toy_store(Split::Train);
        let first = store.first_instances().unwrap();
        let mk = |q0: u8, q1: u8| {
            let spec = SceneSpec {
                entries: vec![
                    Placement { class: 1, quadrant: q0, exemplar: first[1] },
                    Placement { class: 2, quadrant: q1, exemplar: first[2] },
                ],
            };
            Trial {
                scene: Arc::new(compose_scene(&spec, &store).unwrap()),
                caption: vec![2, 1],
                label: Label::Match,
                scene_id: q0 as usize,
                donor: None,
            }
        };
        let m = vec![mk(0, 1), mk(2, 3)];
        let mut rng = substream(1, 0);
        assert!(matches!(generate_mismatching_trials(&m, &mut rng, true), Err(Error::Generation(_))));
        assert!(generate_mismatching_trials(&m, &mut rng, false).is_ok());
    }

    #[test]
    fn strict_mismatches_always_contain_absent_word() {
        let store = toy_store(Split::Train);
        let mut rng = substream(4, 0);
        let m = generate_matching_trials(&cfg(2, 720), &store, &mut rng).unwrap();
        let mm = generate_mismatching_trials(&m, &mut rng, true).unwrap();
        assert_eq!(mm.len(), m.len());
        for t in &mm {
            let present = t.scene.spec.sorted_classes();
            assert!(t.caption.iter().any(|w| !present.contains(w)));
            assert_ne!(t.donor, Some(t.scene_id));
        }
    }

    #[test]
    fn eval_trials_structure() {
        let store = toy_store(Split::Test);
        let mut rng = substream(3, 0);
        let ev = generate_eval_trials(&store, ExemplarMode::Varying, &mut rng, 10).unwrap();
        assert_eq!(ev.len(), 100);
        for e in &ev {
            let classes = e.scene.spec.sorted_classes();
            assert_eq!(classes.len(), 4);
            assert!(classes.windows(2).all(|w| w[0] != w[1]));
            assert_eq!(e.caption, vec![e.target_word]);
            assert_eq!(e.scene.spec.quadrant_of(e.target_word), Some(e.target_quadrant));
            assert!(!e.foils.contains(&e.target_word));
        }
        let one = generate_eval_trials(&store, ExemplarMode::Varying, &mut rng, 1).unwrap();
        let words: Vec<u8> = one.iter().map(|e| e.target_word).collect();
        assert_eq!(words, (0..10).collect::<Vec<u8>>());
        // fixed mode needs the train split's first instances
        assert!(matches!(generate_eval_trials(&store, ExemplarMode::Fixed, &mut rng, 1), Err(Error::Usage(_))));
    }

    #[test]
    fn me_dataset_structure() {
        let store = toy_store(Split::Train);
        for mode in [MeMode::MatchOnly, MeMode::MatchPlusMismatch] {
            let mut rng = substream(11, 0);
            let d = generate_me_dataset(0, mode, &store, &mut rng).unwrap();
            assert_eq!(d.base.len(), 72);
            for t in &d.base {
                assert!(!t.caption.contains(&0));
                assert!(t.scene.spec.quadrant_of(0).is_none());
            }
            let extra = if mode == MeMode::MatchOnly { 1 } else { 6 };
            assert_eq!(d.me_trials.len(), extra);
            assert_eq!(d.me_trials.iter().filter(|t| t.label == Label::Mismatch).count(), extra - 1);
            let scenes: HashSet<usize> = d.me_trials[1..].iter().map(|t| t.scene_id).collect();
            assert_eq!(scenes.len(), extra - 1);
            assert_eq!(d.probe.caption, vec![0]);
            assert_eq!(d.probe.scene.spec.entries.len(), 2);
            assert_ne!(d.novel_quadrant(), d.foil_quadrant());
            assert_eq!(d.training_set().len(), 72 + extra);
        }
    }

    #[test]
    fn generation_is_seed_pure() {
        let store = toy_store(Split::Train);
        let c = DatasetConfig { exemplar_mode: ExemplarMode::Varying, ..cfg(3, 36) };
        let a = generate_training_set(&c, &store, &mut substream(77, 2)).unwrap();
        let b = generate_training_set(&c, &store, &mut substream(77, 2)).unwrap();
        assert_eq!(a, b);
        let d = generate_training_set(&c, &store, &mut substream(77, 3)).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn dump_writes_manifest_and_pgms() {
        let store = toy_store(Split::Train);
        let mut rng = substream(1, 0);
        let trials = generate_training_set(&cfg(2, 4), &store, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dump_trials(&trials, dir.path()).unwrap();
        let manifest = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        let lines: Vec<&str> = manifest.lines().collect();
        assert_eq!(lines[0], "trial_id,label,caption,quadrant_classes,exemplar_indices");
        assert_eq!(lines.len(), 5);
        assert!(lines[3].starts_with("2,mismatch,"));
        let pgm = fs::read(dir.path().join("0.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n56 56\n255\n"));
        assert_eq!(pgm.len(), "P5\n56 56\n255\n".len() + SCENE_PIXELS);
    }
}
