use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::{run_jobs, CliError, Result};
use crate::corpus::{subsample, Corpus, Regime};
use crate::evaluation::{evaluate, EvalOptions};
use crate::model::{ModelConfig, Variant};
use crate::training::{seed_average, sub_seed, train_seed, Component, MeanStd, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub rates: Vec<f64>,
    /// Variants trained with full supervision at every rate.
    pub variants: Vec<Variant>,
    /// Variants trained under `weak_regime` at rate 1.0.
    pub weak_variants: Vec<Variant>,
    pub weak_regime: Regime,
}

impl SweepOptions {
    pub fn validate(&self) -> Result<()> {
        if self.rates.is_empty() || self.variants.is_empty() {
            return Err(CliError::Usage("sweep needs at least one rate and one variant".into()));
        }
        if let Some(r) = self.rates.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(CliError::Usage(format!("rate {r} outside (0, 1]")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: Variant,
    pub regime: Regime,
    pub rate: f64,
    /// Mean training dialogues per seed.
    pub dialogues: f64,
    pub joint_goal_accuracy: MeanStd,
    pub slot_accuracy: MeanStd,
    pub epoch_seconds: MeanStd,
}

/// Full supervision for every (variant, rate), then one row per weak
/// variant at rate 1.0. `run` produces each row.
pub fn sweep_with(opts: &SweepOptions, mut run: impl FnMut(Variant, Regime, f64) -> Result<SweepRow>) -> Result<Vec<SweepRow>> {
    opts.validate()?;
    let mut rows = Vec::new();
    for &v in &opts.variants {
        for &rate in &opts.rates {
            rows.push(run(v, Regime::Full, rate)?);
        }
    }
    for &v in &opts.weak_variants {
        rows.push(run(v, opts.weak_regime, 1.0)?);
    }
    Ok(rows)
}

/// Trains every sweep point for each configured seed and scores it on `scored_on`.
/// Each seed subsamples its own dialogues.
pub fn sweep(
    train: &Corpus,
    dev: Option<&Corpus>,
    scored_on: &Corpus,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    opts: &SweepOptions,
    threads: usize,
) -> Result<Vec<SweepRow>> {
    sweep_with(opts, |variant, regime, rate| {
        let m = ModelConfig {
            variant,
            ..mcfg.clone()
        };
        let t = TrainConfig {
            regime,
            ..tcfg.clone()
        };
        let seeds = &t.seeds;
        let results: Vec<Result<(usize, BTreeMap<String, f64>)>> = run_jobs(seeds.len(), threads, |i| {
            let seed = seeds[i];
            let part = train.with_dialogues(subsample(&train.dialogues, rate, sub_seed(seed, Component::Subsample))?);
            let run = train_seed(&part, dev, &m, &t, seed, &mut crate::training::StderrProgress)?;
            let rep = evaluate(&run.model, scored_on, &EvalOptions::default())?;
            let mut metrics = BTreeMap::new();
            metrics.insert("joint_goal_accuracy".to_string(), rep.joint_goal_accuracy);
            metrics.insert("slot_accuracy".to_string(), rep.slot_accuracy);
            metrics.insert("epoch_seconds".to_string(), run.metrics.mean_epoch_seconds().unwrap_or(0.0));
            Ok((part.dialogues.len(), metrics))
        });
        let mut sizes = Vec::new();
        let mut maps = Vec::new();
        for r in results {
            let (n, m) = r?;
            sizes.push(n as f64);
            maps.push(m);
        }
        let mut avg = seed_average(&maps)?;
        eprintln!(
            "sweep {variant} {regime} rate {rate}: joint {:.4}",
            avg["joint_goal_accuracy"].mean
        );
        Ok(SweepRow {
            variant,
            regime,
            rate,
            dialogues: sizes.iter().sum::<f64>() / sizes.len() as f64,
            joint_goal_accuracy: avg.remove("joint_goal_accuracy").expect("present"),
            slot_accuracy: avg.remove("slot_accuracy").expect("present"),
            epoch_seconds: avg.remove("epoch_seconds").expect("present"),
        })
    })
}

/// Plot-ready table, one row per sweep point.
pub fn write_tsv<W: Write>(rows: &[SweepRow], mut out: W) -> io::Result<()> {
    writeln!(out, "variant\tregime\trate\tdialogues\tjoint_mean\tjoint_stdev\tslot_mean\tslot_stdev\tepoch_seconds")?;
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
            r.variant,
            r.regime,
            r.rate,
            r.dialogues,
            r.joint_goal_accuracy.mean,
            r.joint_goal_accuracy.stdev,
            r.slot_accuracy.mean,
            r.slot_accuracy.stdev,
            r.epoch_seconds.mean
        )?;
    }
    Ok(())
}
