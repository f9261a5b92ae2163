use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use avdialog::avtoken::{
    dedup, fuse, quantize, train_codebook, write_features, write_tokens, Codebook, FeatureStream, KMeansConfig,
    SyntheticAV, SyntheticAVConfig, UnitReadout,
};
use avdialog::corpus::{compute_stats, filter_gold_subset, toy_manifest, CorpusManifest, GOLD_THRESHOLD};
use avdialog::dialogue_lm::build_vocabulary;
use avdialog::evalharness::{toy_dialogue_manifest, OracleChannel};
use avdialog::seed::derive_seed;
use clap::Args;
use serde::Serialize;

use crate::config::{Component, RunConfig};
use crate::work::{
    ensure_parent, frame_accuracy, load_gold, load_lexicon, load_manifest_at, load_streams, require, write_json,
    QuantModality, UnitsFile, WorkDir,
};

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Manifest to summarize; defaults to the work directory's.
    #[arg(long, conflicts_with = "toy")]
    pub manifest: Option<PathBuf>,
    /// Summarize the bundled toy manifest instead.
    #[arg(long)]
    pub toy: bool,
    /// Also write the statistics as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn stats(args: &StatsArgs, cfg: &RunConfig) -> Result<()> {
    let manifest = if args.toy {
        toy_manifest()
    } else {
        let path = args.manifest.clone().unwrap_or_else(|| WorkDir::new(&cfg.work_dir).manifest());
        load_manifest_at(&path)?
    };
    let stats = compute_stats(&manifest);
    print!("{}", stats.table());
    let json = serde_json::to_string_pretty(&stats)?;
    println!("{json}");
    if let Some(out) = &args.out {
        ensure_parent(out)?;
        std::fs::write(out, json + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct GoldFilterArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON object mapping every speaker id to their emotion accuracy in [0, 1].
    #[arg(long)]
    pub accuracy: PathBuf,
    /// Dialogues are kept when every participant scores strictly above this.
    #[arg(long, default_value_t = GOLD_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gold_filter(args: &GoldFilterArgs) -> Result<()> {
    let manifest = load_manifest_at(&args.manifest)?;
    require(&args.accuracy, "accuracy table", "an external rating step")?;
    let accuracy: BTreeMap<String, f64> = crate::work::read_json(&args.accuracy)?;
    let kept = filter_gold_subset(&manifest, &accuracy, args.threshold)?;
    ensure_parent(&args.out)?;
    kept.save(&args.out)?;
    println!(
        "kept {} of {} dialogues (threshold {}) -> {}",
        kept.dialogues.len(),
        manifest.dialogues.len(),
        args.threshold,
        args.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Dialogue manifest to voice; defaults to the bundled toy dialogues.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Serialize)]
struct SynthReport {
    seed: u64,
    n_dialogues: usize,
    n_turns: usize,
    n_units: usize,
    n_words: usize,
    n_frames: usize,
}

/// Voices every turn through an oracle lexicon and synthetic AV generator,
/// writing features, gold frame units, the lexicon and a manifest that
/// points at the features.
pub fn synth(args: &SynthArgs, cfg: &RunConfig) -> Result<()> {
    let mut manifest = match &args.manifest {
        Some(p) => load_manifest_at(p)?,
        None => toy_dialogue_manifest(),
    };
    let seed = cfg.seed_for(Component::Synth);
    let work = WorkDir::new(&cfg.work_dir);
    let texts: Vec<String> = manifest.dialogues.iter().flat_map(|d| d.turns.iter().map(|t| t.text.clone())).collect();
    let channel = OracleChannel::build(&texts, cfg.synth.body_units, derive_seed(seed, &[0]))?;
    let s = &cfg.synth;
    let av = SyntheticAV::new(SyntheticAVConfig {
        n_latent_units: channel.n_units(),
        audio_dim: s.audio_dim,
        visual_dim: s.visual_dim,
        audio_noise_std: s.audio_noise_std,
        visual_noise_std: s.visual_noise_std,
        frames_per_unit: s.frames_per_unit,
        seed: derive_seed(seed, &[1]),
    })?;
    let mut n_frames = 0;
    for (di, d) in manifest.dialogues.iter_mut().enumerate() {
        for (ti, t) in d.turns.iter_mut().enumerate() {
            let units = channel.encode(&t.text).with_context(|| format!("dialogue `{}` turn {ti}", d.id))?;
            let (audio, visual, gold) = av.synth(&units, derive_seed(seed, &[2, di as u64, ti as u64]))?;
            let (a_rel, v_rel) = (WorkDir::feature_rel(di, ti, "audio"), WorkDir::feature_rel(di, ti, "visual"));
            for (rel, stream) in [(&a_rel, &audio), (&v_rel, &visual)] {
                let path = work.path(rel);
                ensure_parent(&path)?;
                write_features(&path, stream)?;
            }
            let gold_path = work.gold(di, ti);
            ensure_parent(&gold_path)?;
            write_tokens(&gold_path, &gold.0)?;
            n_frames += gold.0.len();
            t.audio_feature_path = Some(a_rel);
            t.visual_feature_path = Some(v_rel);
        }
    }
    manifest.base_dir = work.root.clone();
    ensure_parent(&work.manifest())?;
    manifest.save(&work.manifest())?;
    write_json(&work.lexicon(), &channel)?;
    let report = SynthReport {
        seed: cfg.seed,
        n_dialogues: manifest.dialogues.len(),
        n_turns: texts.len(),
        n_units: channel.n_units(),
        n_words: channel.words().len(),
        n_frames,
    };
    write_json(&work.report("synth.json"), &report)?;
    println!(
        "synthesized {} turns ({} frames, {} units) into {}",
        report.n_turns,
        n_frames,
        report.n_units,
        work.root.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct QuantizerArgs {
    #[arg(long, value_enum, default_value_t = QuantModality::Fused)]
    pub modality: QuantModality,
    /// Manifest with feature paths; defaults to the work directory's.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Number of clusters; overrides the config.
    #[arg(long)]
    pub k: Option<usize>,
}

fn select(m: QuantModality, audio: &FeatureStream, visual: &FeatureStream) -> Result<FeatureStream> {
    Ok(match m {
        QuantModality::Fused => fuse(audio, visual)?,
        QuantModality::Audio => audio.clone(),
    })
}

fn manifest_for(work: &WorkDir, path: &Option<PathBuf>) -> Result<CorpusManifest> {
    load_manifest_at(path.as_deref().unwrap_or(&work.manifest()))
}

#[derive(Serialize)]
struct QuantizerReport {
    seed: u64,
    modality: QuantModality,
    k: usize,
    n_units: usize,
    n_frames: usize,
    iters_run: usize,
    final_inertia: Option<f64>,
    /// Training-frame accuracy against the gold units when they exist.
    frame_accuracy: Option<f64>,
}

pub fn train_quantizer(args: &QuantizerArgs, cfg: &RunConfig) -> Result<()> {
    let work = WorkDir::new(&cfg.work_dir);
    let manifest = manifest_for(&work, &args.manifest)?;
    let streams = load_streams(&manifest)?;
    let gold = load_gold(&work, &manifest)?;
    let lexicon = work.lexicon().exists().then(|| load_lexicon(&work.lexicon())).transpose()?;
    let k = match args.k.unwrap_or(cfg.kmeans.k) {
        0 => match &lexicon {
            Some(l) => l.n_units(),
            None => bail!("set kmeans.k in the config or pass --k; there is no lexicon to take it from"),
        },
        k => k,
    };
    let features: Vec<FeatureStream> =
        streams.iter().flatten().map(|(a, v)| select(args.modality, a, v)).collect::<Result<_>>()?;
    let kcfg = KMeansConfig {
        k,
        seed: derive_seed(cfg.seed_for(Component::Quantizer), &[args.modality as u64]),
        ..cfg.kmeans.clone()
    };
    let mut codebook = train_codebook(&features, &kcfg)?;
    let mut accuracy = None;
    if let Some(gold) = &gold {
        let gold_refs: Vec<&[usize]> = gold.iter().flatten().map(|g| g.0.as_slice()).collect();
        let n_units = lexicon.as_ref().map_or(k, |l| l.n_units());
        let refs: Vec<&FeatureStream> = features.iter().collect();
        codebook.readout = Some(UnitReadout::fit(&codebook, &refs, &gold_refs, n_units)?);
        let pred: Vec<_> = features.iter().map(|f| quantize(f, &codebook)).collect::<Result<_, _>>()?;
        let pred_refs: Vec<&[usize]> = pred.iter().map(|p| p.0.as_slice()).collect();
        accuracy = Some(frame_accuracy(&pred_refs, &gold_refs));
    }
    let path = work.codebook(args.modality);
    ensure_parent(&path)?;
    codebook.save(&path)?;
    let report = QuantizerReport {
        seed: cfg.seed,
        modality: args.modality,
        k,
        n_units: codebook.n_units(),
        n_frames: features.iter().map(FeatureStream::n_frames).sum(),
        iters_run: codebook.meta.iters_run,
        final_inertia: codebook.meta.inertia.last().copied(),
        frame_accuracy: accuracy,
    };
    write_json(&work.report(&format!("quantizer_{}.json", args.modality.as_str())), &report)?;
    match accuracy {
        Some(a) => println!("{} codebook k={k} -> {} (frame accuracy {a:.4})", args.modality.as_str(), path.display()),
        None => println!("{} codebook k={k} -> {}", args.modality.as_str(), path.display()),
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct TokenizeArgs {
    #[arg(long, value_enum, default_value_t = QuantModality::Fused)]
    pub modality: QuantModality,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Serialize)]
struct TokenizeReport {
    seed: u64,
    modality: QuantModality,
    n_frames: usize,
    n_deduped: usize,
    frame_accuracy: Option<f64>,
}

/// Quantizes every turn, writing frame-rate token files and the
/// deduplicated unit file used for LM training.
pub fn tokenize(args: &TokenizeArgs, cfg: &RunConfig) -> Result<()> {
    let work = WorkDir::new(&cfg.work_dir);
    let manifest = manifest_for(&work, &args.manifest)?;
    let cb_path = work.codebook(args.modality);
    require(&cb_path, "codebook", "train-quantizer")?;
    let codebook = Codebook::load(&cb_path)?;
    let streams = load_streams(&manifest)?;
    let gold = load_gold(&work, &manifest)?;
    let mut dialogues = Vec::with_capacity(streams.len());
    let mut frames = Vec::new();
    for (di, turns) in streams.iter().enumerate() {
        let mut out = Vec::with_capacity(turns.len());
        for (ti, (a, v)) in turns.iter().enumerate() {
            let tokens = quantize(&select(args.modality, a, v)?, &codebook)?;
            let path = work.tokens(di, ti);
            ensure_parent(&path)?;
            write_tokens(&path, &tokens.0)?;
            out.push(dedup(&tokens.0));
            frames.push(tokens);
        }
        dialogues.push(out);
    }
    let accuracy = gold.as_ref().map(|g| {
        let gold_refs: Vec<&[usize]> = g.iter().flatten().map(|s| s.0.as_slice()).collect();
        let pred_refs: Vec<&[usize]> = frames.iter().map(|s| s.0.as_slice()).collect();
        frame_accuracy(&pred_refs, &gold_refs)
    });
    let units = UnitsFile { seed: cfg.seed, modality: args.modality, n_units: codebook.n_units(), dialogues };
    write_json(&work.units(), &units)?;
    let report = TokenizeReport {
        seed: cfg.seed,
        modality: args.modality,
        n_frames: frames.iter().map(|f| f.0.len()).sum(),
        n_deduped: units.dialogues.iter().flatten().map(|d| d.units.0.len()).sum(),
        frame_accuracy: accuracy,
    };
    write_json(&work.report("tokenize.json"), &report)?;
    print!("tokenized {} frames into {} deduplicated units", report.n_frames, report.n_deduped);
    match accuracy {
        Some(a) => println!(" (frame accuracy {a:.4})"),
        None => println!(),
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct VocabArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// BPE merge count; overrides the config.
    #[arg(long)]
    pub merges: Option<usize>,
    /// Unit block size; defaults to the fused codebook's unit count.
    #[arg(long)]
    pub units: Option<usize>,
}

pub fn build_vocab(args: &VocabArgs, cfg: &RunConfig) -> Result<()> {
    let work = WorkDir::new(&cfg.work_dir);
    let manifest = manifest_for(&work, &args.manifest)?;
    let n_units = match args.units {
        Some(k) => k,
        None => {
            let p = work.codebook(QuantModality::Fused);
            require(&p, "fused codebook (or pass --units)", "train-quantizer")?;
            Codebook::load(&p)?.n_units()
        }
    };
    let texts: Vec<&str> = manifest.dialogues.iter().flat_map(|d| d.turns.iter().map(|t| t.text.as_str())).collect();
    let vocab = build_vocabulary(&texts, args.merges.unwrap_or(cfg.text_merges), n_units)?;
    let path = work.vocab();
    ensure_parent(&path)?;
    vocab.save(&path)?;
    println!(
        "vocabulary of {} ids ({} text, {} units) -> {}",
        vocab.size(),
        vocab.n_text(),
        vocab.n_units(),
        path.display()
    );
    Ok(())
}
