//! Training, evaluation, the mutual-exclusivity protocol, and aggregation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::kernel::{AdamWConfig, AdamWState, Mode};
use crate::mnist::{Mnist, N_CLASSES};
use crate::model::{self, argmax_first, forward_batch, init_params, Arch, Example, ModelParams};
use crate::scenegen::{
    generate_eval_trials, generate_me_dataset, generate_training_set, substream, DatasetConfig, EvalTrial,
    ExemplarMode, MeMode, Trial,
};

/// Prediction threshold for "match"; ties count as match.
pub const MATCH_THRESHOLD: f32 = 0.5;
pub const EVAL_PER_WORD: usize = 10;
pub const ME_EPOCHS: usize = 500;
pub const MAIN_EPOCHS: usize = 1000;
const EVAL_CHUNK: usize = 64;

/// Stream indices under a run's master seed.
pub mod streams {
    pub const DATA: u64 = 0;
    pub const TRAIN: u64 = 1;
    pub const EVAL: u64 = 2;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub arch: Arch,
}

impl TrainConfig {
    pub fn new(arch: Arch, seed: u64, epochs: usize, batch_size: usize) -> Self {
        TrainConfig { lr: 3e-4, weight_decay: 1e-4, epochs, batch_size, seed, arch }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} and weight decay {} must be positive",
                self.lr, self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// 120 for varying exemplars with more than 360 pairs, else 12.
pub fn batch_size_for(mode: ExemplarMode, n_pairs: usize) -> usize {
    if mode == ExemplarMode::Varying && n_pairs > 360 {
        120
    } else {
        12
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub mean_loss: f64,
    /// Discrimination accuracy of the training-mode outputs seen during the epoch.
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochRecord>,
    pub duration_seconds: f64,
}

impl RunMetrics {
    pub fn final_epoch_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.accuracy)
    }
}

fn examples(trials: &[Trial]) -> Vec<Example<'_>> {
    trials.iter().map(|t| Example { scene: &t.scene.pixels, caption: &t.caption }).collect()
}

/// Trains on `trials` with AdamW and mean BCE, reshuffling every epoch.
pub fn train_run(
    config: &TrainConfig,
    trials: &[Trial],
    params: ModelParams<f32>,
) -> Result<(ModelParams<f32>, RunMetrics)> {
    config.validate()?;
    if trials.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if params.arch != config.arch {
        return Err(Error::Config("initial parameters do not match the configured architecture".into()));
    }
    let started = Instant::now();
    let mut params = params;
    let mut metrics = RunMetrics::default();
    if config.epochs == 0 {
        return Ok((params, metrics));
    }
    let adam = AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, ..AdamWConfig::default() };
    let mut opt = AdamWState::new(adam, &params.tensors);
    let mut rng = substream(config.seed, streams::TRAIN);
    let mut order: Vec<usize> = (0..trials.len()).collect();

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for batch in order.chunks(config.batch_size) {
            let ex: Vec<Example<'_>> =
                batch.iter().map(|&i| Example { scene: &trials[i].scene.pixels, caption: &trials[i].caption }).collect();
            let labels: Vec<bool> = batch.iter().map(|&i| trials[i].label.is_match()).collect();
            let pass = forward_batch(&params, &ex, Some(&labels), Mode::Train, &mut rng)?;
            let loss = pass.loss_value().expect("labels given") as f64;
            if !loss.is_finite() {
                return Err(Error::Value(format!("non-finite training loss {loss}")));
            }
            loss_sum += loss * batch.len() as f64;
            correct += pass
                .probabilities()
                .iter()
                .zip(&labels)
                .filter(|(&p, &l)| (p >= MATCH_THRESHOLD) == l)
                .count();
            let grads = pass.backward()?.into_slots();
            opt.step(&mut params.tensors, &grads)?;
        }
        metrics.epochs.push(EpochRecord {
            mean_loss: loss_sum / trials.len() as f64,
            accuracy: correct as f64 / trials.len() as f64,
        });
    }
    metrics.duration_seconds = started.elapsed().as_secs_f64();
    Ok((params, metrics))
}

/// Fraction of trials whose thresholded evaluation-mode output agrees with
/// the label.
pub fn discrimination_accuracy(params: &ModelParams<f32>, trials: &[Trial]) -> Result<f64> {
    if trials.is_empty() {
        return Err(Error::Usage("no trials to score".into()));
    }
    let outs = model::predict(params, &examples(trials), EVAL_CHUNK)?;
    let correct = outs
        .iter()
        .zip(trials)
        .filter(|(o, t)| (o.match_probability >= MATCH_THRESHOLD) == t.label.is_match())
        .count();
    Ok(correct as f64 / trials.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalRecord {
    pub target_word: u8,
    pub target_quadrant: usize,
    pub chosen_quadrant: usize,
}

impl EvalRecord {
    pub fn correct(&self) -> bool {
        self.target_quadrant == self.chosen_quadrant
    }
}

/// 4AFC: the response is the quadrant with the highest attention for the
/// single caption word.
pub fn evaluate_4afc(params: &ModelParams<f32>, trials: &[EvalTrial]) -> Result<(f64, Vec<EvalRecord>)> {
    if trials.is_empty() {
        return Err(Error::Usage("no evaluation trials".into()));
    }
    if let Some(t) = trials.iter().find(|t| t.caption.len() != 1) {
        return Err(Error::Protocol(format!("4AFC caption must be one word, got {:?}", t.caption)));
    }
    let ex: Vec<Example<'_>> =
        trials.iter().map(|t| Example { scene: &t.scene.pixels, caption: &t.caption }).collect();
    let outs = model::predict(params, &ex, EVAL_CHUNK)?;
    let records: Vec<EvalRecord> = outs
        .iter()
        .zip(trials)
        .map(|(o, t)| EvalRecord {
            target_word: t.target_word,
            target_quadrant: t.target_quadrant,
            chosen_quadrant: argmax_first(o.attention.row(0)),
        })
        .collect();
    let acc = records.iter().filter(|r| r.correct()).count() as f64 / records.len() as f64;
    Ok((acc, records))
}

/// One cell of the condition grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConditionKey {
    pub k: usize,
    pub mode: ExemplarMode,
    pub n_pairs: usize,
    pub arch: Arch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub key: ConditionKey,
    pub seed: u64,
    pub final_train_acc: f64,
    pub eval_acc: f64,
    pub eval_records: Vec<EvalRecord>,
    pub metrics: RunMetrics,
    pub params_checksum: u64,
}

/// Generates the balanced training set for a cell, trains, and evaluates.
/// Returns the result and the trained parameters.
pub fn run_condition(
    data: &Mnist,
    key: ConditionKey,
    seed: u64,
    epochs: usize,
    strict_mismatch: bool,
) -> Result<(RunResult, ModelParams<f32>)> {
    let dataset = DatasetConfig { k: key.k, exemplar_mode: key.mode, n_pairs: key.n_pairs, seed, strict_mismatch };
    let trials = generate_training_set(&dataset, &data.train, &mut substream(seed, streams::DATA))?;
    let config = TrainConfig::new(key.arch, seed, epochs, batch_size_for(key.mode, key.n_pairs));
    let (params, metrics) = train_run(&config, &trials, init_params(key.arch, seed))?;
    let final_train_acc = discrimination_accuracy(&params, &trials)?;
    let eval_store = match key.mode {
        ExemplarMode::Fixed => &data.train,
        ExemplarMode::Varying => &data.test,
    };
    let eval = generate_eval_trials(eval_store, key.mode, &mut substream(seed, streams::EVAL), EVAL_PER_WORD)?;
    let (eval_acc, eval_records) = evaluate_4afc(&params, &eval)?;
    let params_checksum = params.checksum();
    Ok((RunResult { key, seed, final_train_acc, eval_acc, eval_records, metrics, params_checksum }, params))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MeClass {
    Novel,
    Foil,
    Blank,
    NonMatch,
}

impl MeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            MeClass::Novel => "novel",
            MeClass::Foil => "foil",
            MeClass::Blank => "blank",
            MeClass::NonMatch => "non_match",
        }
    }
}

impl std::str::FromStr for MeClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "novel" => Ok(MeClass::Novel),
            "foil" => Ok(MeClass::Foil),
            "blank" => Ok(MeClass::Blank),
            "non_match" => Ok(MeClass::NonMatch),
            _ => Err(Error::Format(format!("unknown ME classification '{s}'"))),
        }
    }
}

/// Classifies the probe response: below-threshold output is a non-match;
/// otherwise the novel word's attention argmax decides.
pub fn classify_me(match_probability: f32, novel_row: &[f32], novel_quadrant: usize, foil_quadrant: usize) -> MeClass {
    if match_probability < MATCH_THRESHOLD {
        return MeClass::NonMatch;
    }
    match argmax_first(novel_row) {
        q if q == novel_quadrant => MeClass::Novel,
        q if q == foil_quadrant => MeClass::Foil,
        _ => MeClass::Blank,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeRun {
    pub excluded: u8,
    pub run: usize,
    pub seed: u64,
    pub classification: MeClass,
    pub match_probability: f32,
    pub attention: Vec<f32>,
    pub final_train_acc: f64,
    pub duration_seconds: f64,
}

/// Classification counts and the derived proportions.
#[derive(Clone, Debug, PartialEq)]
pub struct MeTally {
    pub histogram: BTreeMap<MeClass, usize>,
    pub total: usize,
    /// novel / (novel + foil); `None` when neither occurred.
    pub preference: Option<f64>,
    pub blank_fraction: f64,
    pub non_match_fraction: f64,
}

impl MeTally {
    pub fn count(&self, class: MeClass) -> usize {
        self.histogram[&class]
    }
}

pub fn tally_me(classes: impl IntoIterator<Item = MeClass>) -> MeTally {
    let mut histogram: BTreeMap<MeClass, usize> =
        [MeClass::Novel, MeClass::Foil, MeClass::Blank, MeClass::NonMatch].into_iter().map(|c| (c, 0)).collect();
    let mut total = 0;
    for c in classes {
        *histogram.get_mut(&c).unwrap() += 1;
        total += 1;
    }
    let (novel, foil) = (histogram[&MeClass::Novel], histogram[&MeClass::Foil]);
    let n = total.max(1) as f64;
    MeTally {
        preference: (novel + foil > 0).then(|| novel as f64 / (novel + foil) as f64),
        blank_fraction: histogram[&MeClass::Blank] as f64 / n,
        non_match_fraction: histogram[&MeClass::NonMatch] as f64 / n,
        histogram,
        total,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeSummary {
    pub mode: MeMode,
    pub runs: Vec<MeRun>,
    pub tally: MeTally,
}

pub fn summarize_me(mode: MeMode, runs: Vec<MeRun>) -> MeSummary {
    let tally = tally_me(runs.iter().map(|r| r.classification));
    MeSummary { mode, runs, tally }
}

/// Seed of ME run `run` for excluded class `excluded` under a master seed.
pub fn me_seed(master: u64, excluded: u8, run: usize) -> u64 {
    master.wrapping_mul(1_000_003).wrapping_add(excluded as u64 * 1000 + run as u64)
}

/// Trains one ME run and classifies its probe response.
pub fn run_me_single(data: &Mnist, mode: MeMode, excluded: u8, run: usize, master: u64, epochs: usize) -> Result<MeRun> {
    let seed = me_seed(master, excluded, run);
    let ds = generate_me_dataset(excluded, mode, &data.train, &mut substream(seed, streams::DATA))?;
    let trials = ds.training_set();
    let config = TrainConfig::new(Arch::ObjectCnn, seed, epochs, 12);
    let (params, metrics) = train_run(&config, &trials, init_params(Arch::ObjectCnn, seed))?;
    let out = model::predict(&params, &[Example { scene: &ds.probe.scene.pixels, caption: &ds.probe.caption }], 1)?
        .remove(0);
    let classification = classify_me(out.match_probability, out.attention.row(0), ds.novel_quadrant(), ds.foil_quadrant());
    Ok(MeRun {
        excluded,
        run,
        seed,
        classification,
        match_probability: out.match_probability,
        attention: out.attention.scores.clone(),
        final_train_acc: discrimination_accuracy(&params, &trials)?,
        duration_seconds: metrics.duration_seconds,
    })
}

/// The full protocol: every excluded class, `runs_per_class` runs each.
pub fn run_me_experiment(
    data: &Mnist,
    mode: MeMode,
    runs_per_class: usize,
    master: u64,
    epochs: usize,
) -> Result<MeSummary> {
    let mut runs = Vec::with_capacity(N_CLASSES * runs_per_class);
    for excluded in 0..N_CLASSES as u8 {
        for run in 0..runs_per_class {
            runs.push(run_me_single(data, mode, excluded, run, master, epochs)?);
        }
    }
    Ok(summarize_me(mode, runs))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggregateResult {
    pub key: ConditionKey,
    pub mean: f64,
    pub ci95_halfwidth: f64,
    pub n: usize,
}

/// Mean and Student-t 95% half-width `t(0.975, n-1)·s/√n` (0 for n = 1).
pub fn mean_ci95(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Usage("cannot aggregate an empty group".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Value(e.to_string()))?.inverse_cdf(0.975);
    Ok((mean, t * var.sqrt() / n.sqrt()))
}

/// Groups by condition key and summarizes a metric per group.
pub fn aggregate_results(runs: &[RunResult], metric: impl Fn(&RunResult) -> f64) -> Result<Vec<AggregateResult>> {
    aggregate_results_by(runs.iter().map(|r| (r.key, metric(r))))
}

/// Same as [`aggregate_results`] over bare `(key, value)` pairs, in key order.
pub fn aggregate_results_by(values: impl IntoIterator<Item = (ConditionKey, f64)>) -> Result<Vec<AggregateResult>> {
    let mut groups: BTreeMap<ConditionKey, Vec<f64>> = BTreeMap::new();
    for (key, v) in values {
        groups.entry(key).or_default().push(v);
    }
    if groups.is_empty() {
        return Err(Error::Usage("no runs to aggregate".into()));
    }
    groups
        .into_iter()
        .map(|(key, v)| {
            let (mean, ci95_halfwidth) = mean_ci95(&v)?;
            Ok(AggregateResult { key, mean, ci95_halfwidth, n: v.len() })
        })
        .collect()
}

/// Number of correct answers for chance-level tests.
pub fn count_correct(records: &[EvalRecord]) -> usize {
    records.iter().filter(|r| r.correct()).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mnist::{DigitStore, ImageStack, Split, DIGIT_PIXELS};
    use crate::scenegen::{generate_matching_trials, Label};

    fn toy_store(split: Split) -> DigitStore {
        let labels: Vec<u8> = (0..30).map(|i| (i % 10) as u8).collect();
        let pixels = (0..30 * DIGIT_PIXELS)
            .map(|i| {
                let (img, px) = (i / DIGIT_PIXELS, i % DIGIT_PIXELS);
                let class = img % 10;
                if (px / 28 + class * 3) % 10 < 3 && (px % 28) > class {
                    200 + (img % 3) as u8 * 20
                } else {
                    0
                }
            })
            .collect();
        DigitStore::build(&ImageStack { rows: 28, cols: 28, pixels }, &labels, split, true).unwrap()
    }

    fn toy_trials(n_pairs: usize) -> Vec<Trial> {
        let store = toy_store(Split::Train);
        let cfg = DatasetConfig { k: 2, exemplar_mode: ExemplarMode::Fixed, n_pairs, seed: 1, strict_mismatch: false };
        generate_training_set(&cfg, &store, &mut substream(1, 0)).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let trials = toy_trials(8);
        let p0 = init_params(Arch::ObjectCnn, 3);
        let (p, m) = train_run(&TrainConfig::new(Arch::ObjectCnn, 3, 0, 12), &trials, p0.clone()).unwrap();
        assert_eq!(p, p0);
        assert!(m.epochs.is_empty());
    }

    #[test]
    fn empty_training_set_rejected() {
        let err = train_run(&TrainConfig::new(Arch::ObjectCnn, 3, 1, 12), &[], init_params(Arch::ObjectCnn, 3));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let trials = toy_trials(12);
        let cfg = TrainConfig::new(Arch::ObjectCnn, 5, 3, 4);
        let (a, ma) = train_run(&cfg, &trials, init_params(Arch::ObjectCnn, 5)).unwrap();
        let (b, mb) = train_run(&cfg, &trials, init_params(Arch::ObjectCnn, 5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma.epochs, mb.epochs);
        assert_eq!(ma.epochs.len(), 3);
        assert!(ma.epochs.iter().all(|e| e.mean_loss.is_finite() && (0.0..=1.0).contains(&e.accuracy)));
    }

    #[test]
    fn one_step_touches_only_caption_rows() {
        let trials = toy_trials(4);
        let single = vec![trials[0].clone()];
        let mut cfg = TrainConfig::new(Arch::ObjectCnn, 2, 1, 1);
        // decoupled decay shrinks every row; isolate the gradient path
        cfg.weight_decay = f64::MIN_POSITIVE;
        let p0 = init_params(Arch::ObjectCnn, 2);
        let (p1, _) = train_run(&cfg, &single, p0.clone()).unwrap();
        let (e0, e1) = (p0.embedding(), p1.embedding());
        for w in 0..10 {
            let changed = e0.row(w) != e1.row(w);
            assert_eq!(changed, single[0].caption.contains(&(w as u8)), "row {w}");
        }
    }

    #[test]
    fn discrimination_rules() {
        let trials = toy_trials(8);
        let p = init_params(Arch::ObjectCnn, 1);
        let acc = discrimination_accuracy(&p, &trials).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(matches!(discrimination_accuracy(&p, &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn protocol_error_on_multiword_caption() {
        let store = toy_store(Split::Train);
        let mut ev = generate_eval_trials(&store, ExemplarMode::Fixed, &mut substream(1, 2), 1).unwrap();
        let p = init_params(Arch::ObjectCnn, 1);
        let (acc, recs) = evaluate_4afc(&p, &ev).unwrap();
        assert_eq!(recs.len(), 10);
        assert!((0.0..=1.0).contains(&acc));
        ev[3].caption.push(1);
        assert!(matches!(evaluate_4afc(&p, &ev), Err(Error::Protocol(_))));
    }

    #[test]
    fn evaluation_leaves_params_untouched() {
        let store = toy_store(Split::Train);
        let ev = generate_eval_trials(&store, ExemplarMode::Fixed, &mut substream(1, 2), 2).unwrap();
        let p = init_params(Arch::ObjectCnn, 1);
        let before = p.checksum();
        evaluate_4afc(&p, &ev).unwrap();
        discrimination_accuracy(&p, &toy_trials(8)).unwrap();
        assert_eq!(p.checksum(), before);
    }

    #[test]
    fn me_classification_rule() {
        assert_eq!(classify_me(0.8, &[0.1, 0.9, 0.2, 0.3], 1, 2), MeClass::Novel);
        assert_eq!(classify_me(0.8, &[0.1, 0.2, 0.9, 0.3], 1, 2), MeClass::Foil);
        assert_eq!(classify_me(0.8, &[0.9, 0.2, 0.1, 0.3], 1, 2), MeClass::Blank);
        assert_eq!(classify_me(0.3, &[0.1, 0.9, 0.2, 0.3], 1, 2), MeClass::NonMatch);
        let run = |c| MeRun {
            excluded: 0,
            run: 0,
            seed: 0,
            classification: c,
            match_probability: 0.9,
            attention: vec![],
            final_train_acc: 1.0,
            duration_seconds: 0.0,
        };
        let s = summarize_me(
            MeMode::MatchOnly,
            vec![run(MeClass::Novel), run(MeClass::Novel), run(MeClass::Foil), run(MeClass::Blank)],
        );
        assert_eq!(s.tally.preference, Some(2.0 / 3.0));
        assert_eq!(s.tally.blank_fraction, 0.25);
        assert_eq!(s.tally.non_match_fraction, 0.0);
        assert_eq!(s.tally.count(MeClass::Novel), 2);
        assert_eq!(tally_me([MeClass::Blank]).preference, None);
    }

    #[test]
    fn aggregation() {
        assert_eq!(mean_ci95(&[0.8; 5]).unwrap(), (0.8, 0.0));
        assert_eq!(mean_ci95(&[0.0, 1.0]).unwrap().0, 0.5);
        assert_eq!(mean_ci95(&[0.7]).unwrap(), (0.7, 0.0));
        assert!(matches!(mean_ci95(&[]), Err(Error::Usage(_))));
        // t(0.975, 4) = 2.776 from a t-table; s = sqrt(0.00025)
        let (m, h) = mean_ci95(&[0.9, 0.92, 0.88, 0.91, 0.89]).unwrap();
        let expect = 2.776 * (0.00025f64).sqrt() / 5f64.sqrt();
        assert!((m - 0.9).abs() < 1e-12);
        // the table value is rounded to three decimals
        assert!((h - expect).abs() < 2e-4 * expect, "{h} vs {expect}");
    }

    #[test]
    fn batch_size_rule() {
        assert_eq!(batch_size_for(ExemplarMode::Varying, 3600), 120);
        assert_eq!(batch_size_for(ExemplarMode::Varying, 360), 12);
        assert_eq!(batch_size_for(ExemplarMode::Fixed, 720), 12);
    }

    #[test]
    fn matching_set_feeds_balanced_training() {
        let store = toy_store(Split::Train);
        let cfg = DatasetConfig { k: 3, exemplar_mode: ExemplarMode::Fixed, n_pairs: 36, seed: 1, strict_mismatch: false };
        let m = generate_matching_trials(&cfg, &store, &mut substream(2, 0)).unwrap();
        let all = generate_training_set(&cfg, &store, &mut substream(2, 0)).unwrap();
        assert_eq!(all.len(), 2 * m.len());
        assert_eq!(all.iter().filter(|t| t.label == Label::Match).count(), m.len());
    }
}
