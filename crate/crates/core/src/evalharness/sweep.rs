use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::avtoken::{
    add_noise, dedup, fuse, quantize, train_codebook, Codebook, FeatureStream, KMeansConfig, Snr, SyntheticAV,
    UnitReadout,
};
use crate::dialogue_lm::{DecodeConfig, DialogueLm, FusedVocabulary, TokenizedDialogue};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

use super::evaluate::evaluate_testset;
use super::metrics::MetricReport;
use super::oracle::OracleChannel;
use super::toy::TurnFeatures;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    AudioOnly,
    AudioVisual,
}

impl Pipeline {
    pub const ALL: [Pipeline; 2] = [Pipeline::AudioOnly, Pipeline::AudioVisual];

    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::AudioOnly => "audio_only",
            Pipeline::AudioVisual => "audio_visual",
        }
    }
}

/// Quantizers for both input pipelines. Their ids must already be in the
/// LM's unit space (identity or via a unit readout).
#[derive(Clone, Debug, Default)]
pub struct Tokenizers {
    pub audio_only: Option<Codebook>,
    pub audio_visual: Option<Codebook>,
}

impl Tokenizers {
    /// Trains both quantizers with k = number of latent units on a
    /// calibration stream in which every unit appears `reps_per_unit` times,
    /// then fits unit readouts against the calibration gold.
    pub fn calibrate(av: &SyntheticAV, reps_per_unit: usize, seed: u64) -> Result<Self> {
        let k = av.config.n_latent_units;
        if reps_per_unit == 0 {
            return Err(Error::Config("calibration needs at least one occurrence per unit".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
        let mut units = Vec::with_capacity(k * reps_per_unit);
        for _ in 0..reps_per_unit {
            let mut round: Vec<usize> = (0..k).collect();
            round.shuffle(&mut rng);
            if units.last() == round.first() && k > 1 {
                round.swap(0, k - 1);
            }
            units.extend(round);
        }
        let (audio, visual, gold) = av.synth(&units, derive_seed(seed, &[1]))?;
        let fused = fuse(&audio, &visual)?;
        let fit = |stream: &FeatureStream, tag: u64| -> Result<Codebook> {
            let cfg = KMeansConfig { k, iters: 50, tol: 1e-6, seed: derive_seed(seed, &[2, tag]) };
            let mut cb = train_codebook(std::slice::from_ref(stream), &cfg)?;
            cb.readout = Some(UnitReadout::fit(&cb, &[stream], &[&gold.0], k)?);
            Ok(cb)
        };
        Ok(Self { audio_only: Some(fit(&audio, 0)?), audio_visual: Some(fit(&fused, 1)?) })
    }

    fn get(&self, p: Pipeline) -> Result<&Codebook> {
        match p {
            Pipeline::AudioOnly => self.audio_only.as_ref(),
            Pipeline::AudioVisual => self.audio_visual.as_ref(),
        }
        .ok_or_else(|| Error::Config(format!("no {} tokenization pipeline configured", p.as_str())))
    }
}

/// Generation side of the sweep; without it only frame accuracy is measured.
pub struct SweepLm<'a> {
    pub model: &'a DialogueLm,
    pub vocab: &'a FusedVocabulary,
    pub channel: &'a OracleChannel,
    pub decode: DecodeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSweepConfig {
    pub snrs: Vec<Snr>,
    pub seeds: Vec<u64>,
    pub threads: usize,
}

impl Default for NoiseSweepConfig {
    fn default() -> Self {
        Self {
            snrs: vec![Snr::Clean, Snr::Db(5.0), Snr::Db(0.0), Snr::Db(-5.0)],
            seeds: (0..5).collect(),
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub snr: Snr,
    pub pipeline: Pipeline,
    pub seed: u64,
    pub frame_accuracy: f64,
    pub metrics: Option<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub snr: Snr,
    pub pipeline: Pipeline,
    pub n_seeds: usize,
    pub accuracy_mean: f64,
    /// Standard error of the mean over seeds.
    pub accuracy_stderr: f64,
    /// Seed-averaged metrics.
    pub metrics: Option<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepReport {
    pub rows: Vec<SweepRow>,
    pub cells: Vec<SweepCell>,
}

fn mean_reports(reports: &[&MetricReport]) -> MetricReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    MetricReport {
        n_pairs: reports.iter().map(|r| r.n_pairs).sum::<usize>() / reports.len().max(1),
        ppl: avg(|r| r.ppl),
        bleu: avg(|r| r.bleu),
        corpus_bleu: avg(|r| r.corpus_bleu),
        meteor_lite: avg(|r| r.meteor_lite),
        f1: avg(|r| r.f1),
        d1: avg(|r| r.d1),
        d2: avg(|r| r.d2),
    }
}

impl NoiseSweepReport {
    pub fn cell(&self, snr: Snr, pipeline: Pipeline) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.snr == snr && c.pipeline == pipeline)
    }

    /// Mean frame accuracy lost going from `from` to `to`.
    pub fn degradation(&self, pipeline: Pipeline, from: Snr, to: Snr) -> Option<f64> {
        Some(self.cell(from, pipeline)?.accuracy_mean - self.cell(to, pipeline)?.accuracy_mean)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One line per grid cell and seed.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("snr,pipeline,seed,frame_accuracy,ppl,bleu,corpus_bleu,meteor_lite,f1,d1,d2\n");
        for r in &self.rows {
            let _ = write!(s, "{},{},{},{}", r.snr, r.pipeline.as_str(), r.seed, r.frame_accuracy);
            match &r.metrics {
                Some(m) => {
                    let _ = writeln!(
                        s,
                        ",{},{},{},{},{},{},{}",
                        m.ppl, m.bleu, m.corpus_bleu, m.meteor_lite, m.f1, m.d1, m.d2
                    );
                }
                None => s.push_str(",,,,,,,\n"),
            }
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>6} {:>13} {:>6} {:>9} {:>8} {:>9} {:>8} {:>8} {:>8}\n",
            "snr", "pipeline", "seeds", "accuracy", "stderr", "ppl", "bleu", "meteor", "f1"
        );
        for c in &self.cells {
            let _ = write!(
                s,
                "{:>6} {:>13} {:>6} {:>9.4} {:>8.4}",
                c.snr.to_string(),
                c.pipeline.as_str(),
                c.n_seeds,
                c.accuracy_mean,
                c.accuracy_stderr
            );
            match &c.metrics {
                Some(m) => {
                    let _ = writeln!(s, " {:>9.3} {:>8.4} {:>8.4} {:>8.4}", m.ppl, m.bleu, m.meteor_lite, m.f1);
                }
                None => s.push_str(&format!(" {:>9} {:>8} {:>8} {:>8}\n", "-", "-", "-", "-")),
            }
        }
        s
    }
}

/// Result of one (snr, seed) task: a row per pipeline.
fn run_task(
    dialogues: &[TokenizedDialogue],
    features: &[Vec<TurnFeatures>],
    tokenizers: &Tokenizers,
    lm: Option<&SweepLm<'_>>,
    snr_index: usize,
    snr: Snr,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let mut noisy: Vec<Vec<FeatureStream>> = Vec::with_capacity(features.len());
    for (di, turns) in features.iter().enumerate() {
        let mut v = Vec::with_capacity(turns.len());
        for (ti, tf) in turns.iter().enumerate() {
            v.push(add_noise(&tf.audio, snr, derive_seed(seed, &[snr_index as u64, di as u64, ti as u64]))?);
        }
        noisy.push(v);
    }
    for p in Pipeline::ALL {
        let cb = tokenizers.get(p)?;
        let (mut correct, mut total) = (0usize, 0usize);
        let mut observed = dialogues.to_vec();
        for (di, turns) in features.iter().enumerate() {
            for (ti, tf) in turns.iter().enumerate() {
                let input = match p {
                    Pipeline::AudioOnly => noisy[di][ti].clone(),
                    Pipeline::AudioVisual => fuse(&noisy[di][ti], &tf.visual)?,
                };
                let ids = quantize(&input, cb)?;
                correct += ids.iter().zip(tf.gold.iter()).filter(|(a, b)| a == b).count();
                total += tf.gold.len();
                observed[di].turns[ti].units = dedup(&ids).units.0;
            }
        }
        let metrics = match lm {
            Some(lm) => {
                Some(evaluate_testset(lm.model, lm.vocab, dialogues, Some(&observed), lm.channel, &lm.decode)?.report)
            }
            None => None,
        };
        rows.push(SweepRow {
            snr,
            pipeline: p,
            seed,
            frame_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            metrics,
        });
    }
    Ok(rows)
}

/// Corrupts the audio of every turn at each SNR, re-tokenizes through both
/// pipelines, and measures frame-token accuracy against the gold frame
/// units, plus generation metrics when `lm` is given. Grid cells run in
/// parallel; results do not depend on the thread count.
pub fn run_noise_sweep(
    dialogues: &[TokenizedDialogue],
    features: &[Vec<TurnFeatures>],
    tokenizers: &Tokenizers,
    lm: Option<&SweepLm<'_>>,
    cfg: &NoiseSweepConfig,
) -> Result<NoiseSweepReport> {
    for p in Pipeline::ALL {
        tokenizers.get(p)?;
    }
    if cfg.snrs.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("noise sweep needs at least one SNR level and one seed".into()));
    }
    if features.len() != dialogues.len() || features.iter().zip(dialogues).any(|(f, d)| f.len() != d.turns.len()) {
        return Err(Error::Shape("features do not cover every dialogue turn".into()));
    }
    let tasks: Vec<(usize, Snr, u64)> =
        cfg.snrs.iter().enumerate().flat_map(|(i, &s)| cfg.seeds.iter().map(move |&seed| (i, s, seed))).collect();
    let threads = cfg.threads.clamp(1, tasks.len());
    let per = tasks.len().div_ceil(threads);
    let run_chunk = |chunk: &[(usize, Snr, u64)]| {
        chunk
            .iter()
            .map(|&(i, snr, seed)| run_task(dialogues, features, tokenizers, lm, i, snr, seed))
            .collect::<Vec<_>>()
    };
    let results: Vec<Result<Vec<SweepRow>>> = if threads == 1 {
        run_chunk(&tasks)
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = tasks.chunks(per).map(|chunk| s.spawn(move || run_chunk(chunk))).collect();
            handles.into_iter().flat_map(|h| h.join().expect("sweep worker panicked")).collect()
        })
    };
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }

    let mut cells = Vec::new();
    for &snr in &cfg.snrs {
        for p in Pipeline::ALL {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.snr == snr && r.pipeline == p).collect();
            let n = sel.len() as f64;
            let mean = sel.iter().map(|r| r.frame_accuracy).sum::<f64>() / n;
            let stderr = if sel.len() > 1 {
                let var = sel.iter().map(|r| (r.frame_accuracy - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            } else {
                0.0
            };
            let reports: Vec<&MetricReport> = sel.iter().filter_map(|r| r.metrics.as_ref()).collect();
            let metrics = (!reports.is_empty()).then(|| mean_reports(&reports));
            cells.push(SweepCell {
                snr,
                pipeline: p,
                n_seeds: sel.len(),
                accuracy_mean: mean,
                accuracy_stderr: stderr,
                metrics,
            });
        }
    }
    Ok(NoiseSweepReport { rows, cells })
}
