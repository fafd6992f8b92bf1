use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use inpaint_core::baseline::{segment_samples, select_donor, smooth_concat, ConcatConfig, DonorQuery};
use inpaint_core::corpus::{
    ingest_corpus, parse_alignment_csv, parse_textgrid, split_corpus, synth_corpus, validate_alignment, write_corpus,
    Corpus, CorpusItem, Gender, SynthConfig,
};
use inpaint_core::correction::{
    correct_utterance, export_vocoder_finetune_set, CorrectionRequest, Vocoder, VocoderKind, DEFAULT_BLEND,
};
use inpaint_core::dsp::{load_wav, resample, write_wav, MelConfig, DEFAULT_GRIFFIN_LIM_ITERS};
use inpaint_core::embedding::{Siamese, SiameseConfig};
use inpaint_core::evaluation::{
    export_listening_manifest, phoneme_centroids, run_minimal_pair_experiment, ExperimentModels, Stimulus,
};
use inpaint_core::generator::{Generator, GeneratorConfig};
use inpaint_core::problem::{PhonemeInventory, PhonemeSegmentation};
use inpaint_core::training::{derive_tau, train_generator, train_siamese, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "inpaint", version, about = "Phoneme inpainting for pronunciation feedback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check or create corpora.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Train the Siamese embedder or the generator.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Replace one phoneme of a recording with a generated one.
    Correct(CorrectArgs),
    /// Replace one phoneme by splicing in another speaker's recording.
    BaselineConcat(BaselineArgs),
    /// Run the minimal-pair experiment and write a report.
    Evaluate(EvaluateArgs),
    /// Write vocoder fine-tuning pairs or listening-test stimuli.
    #[command(subcommand)]
    Export(ExportCmd),
}

#[derive(Subcommand)]
enum CorpusCmd {
    Validate {
        root: PathBuf,
        /// Inventory JSON; defaults to `<root>/inventory.json`.
        #[arg(long)]
        inventory: Option<PathBuf>,
    },
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Synthesis settings as JSON; unspecified fields keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    inventory: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TrainCmd {
    Siamese {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    Generator {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trained Siamese checkpoint, used frozen by the embedding losses.
        #[arg(long)]
        siamese: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VocoderChoice {
    GriffinLim,
    External,
}

#[derive(Args)]
struct VocoderArgs {
    #[arg(long, value_enum, default_value = "griffin-lim")]
    vocoder: VocoderChoice,
    #[arg(long, default_value_t = DEFAULT_GRIFFIN_LIM_ITERS)]
    gl_iters: usize,
    /// External vocoder command with `{mel}` and `{wav}` placeholders.
    #[arg(long)]
    vocoder_command: Option<String>,
}

impl VocoderArgs {
    fn build(&self, mel: MelConfig) -> Result<Vocoder> {
        let kind = match self.vocoder {
            VocoderChoice::GriffinLim => VocoderKind::GriffinLim {
                iterations: self.gl_iters,
            },
            VocoderChoice::External => VocoderKind::ExternalNeural {
                command: self
                    .vocoder_command
                    .as_deref()
                    .context("--vocoder external needs --vocoder-command")?
                    .split_whitespace()
                    .map(str::to_string)
                    .collect(),
            },
        };
        Ok(Vocoder::new(kind, mel)?)
    }
}

#[derive(Args)]
struct CorrectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Alignment as `.align.csv` or `.TextGrid`.
    #[arg(long)]
    align: PathBuf,
    /// 0-based index of the phoneme to replace.
    #[arg(long)]
    k: usize,
    /// Symbol to put in its place.
    #[arg(long)]
    target: String,
    /// Generator checkpoint, or a directory with a `generator/` checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    vocoder: VocoderArgs,
    #[arg(long, default_value_t = DEFAULT_BLEND)]
    blend: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    align: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    target: String,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gender of the speaker: M, F or unknown.
    #[arg(long, default_value = "unknown")]
    gender: String,
    /// Speaker whose recordings must not be used as donors.
    #[arg(long, default_value = "")]
    speaker: String,
    /// Prefer donors from utterances containing this word.
    #[arg(long)]
    word: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Directory holding `generator/` and `siamese/` checkpoints.
    #[arg(long)]
    ckpt: PathBuf,
    /// Substitutions as `P:Q` symbol pairs.
    #[arg(long, value_delimiter = ',', required = true)]
    pairs: Vec<String>,
    #[command(flatten)]
    vocoder: VocoderArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ExportCmd {
    /// Generated mels paired with the original audio.
    Finetune {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Target phoneme symbols; all non-silence phonemes when omitted.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// ABX and MOS stimuli with a shuffled manifest.
    Listening {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        pairs: Vec<String>,
        /// Stimuli per pair.
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[command(flatten)]
        vocoder: VocoderArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Settings file for `train siamese`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SiameseRun {
    train: TrainConfig,
    hidden: usize,
    embed_dim: usize,
    split_seed: u64,
    init_seed: u64,
}

impl Default for SiameseRun {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            hidden: SiameseConfig::DEFAULT_HIDDEN,
            embed_dim: SiameseConfig::DEFAULT_EMBED_DIM,
            split_seed: 0,
            init_seed: 0,
        }
    }
}

/// Settings file for `train generator`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct GeneratorRun {
    train: TrainConfig,
    channels: [usize; 5],
    phoneme_embed_dim: usize,
    /// Target phoneme symbols; all non-silence phonemes when empty.
    targets: Vec<String>,
    split_seed: u64,
    init_seed: u64,
}

impl Default for GeneratorRun {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            channels: GeneratorConfig::DEFAULT_CHANNELS,
            phoneme_embed_dim: GeneratorConfig::DEFAULT_EMBED_DIM,
            targets: Vec::new(),
            split_seed: 0,
            init_seed: 0,
        }
    }
}

const TRAIN_LOG: &str = "train_log.jsonl";
const TRAIN_REPORT: &str = "train_report.json";

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn load_inventory(root: &Path, explicit: Option<&Path>) -> Result<PhonemeInventory> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| root.join("inventory.json"));
    let text = fs::read_to_string(&path).with_context(|| format!("reading inventory {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing inventory {}", path.display()))?)
}

fn load_corpus(args: &CorpusArgs) -> Result<Corpus> {
    let inventory = load_inventory(&args.corpus, args.inventory.as_deref())?;
    ingest_corpus(&args.corpus, &inventory, &MelConfig::default())
        .with_context(|| format!("loading corpus {}", args.corpus.display()))
}

fn symbols_to_indices(inv: &PhonemeInventory, symbols: &[String]) -> Result<Vec<usize>> {
    if symbols.is_empty() {
        return Ok((0..inv.len()).filter(|&i| i != inv.silence_index()).collect());
    }
    symbols.iter().map(|s| Ok(inv.require(s)?)).collect()
}

fn parse_pairs(inv: &PhonemeInventory, pairs: &[String]) -> Result<Vec<(usize, usize)>> {
    pairs
        .iter()
        .map(|p| {
            let (a, b) = p.split_once(':').with_context(|| format!("pair {p:?} is not P:Q"))?;
            Ok((inv.require(a.trim())?, inv.require(b.trim())?))
        })
        .collect()
}

fn checkpoint_dir(ckpt: &Path, kind: &str) -> PathBuf {
    if ckpt.join(inpaint_core::checkpoint::CONFIG_FILE).exists() {
        ckpt.to_path_buf()
    } else {
        ckpt.join(kind)
    }
}

/// Train/validation/test items. Without a test partition the validation
/// items are used for testing.
fn partitions(corpus: &Corpus, seed: u64) -> Result<(Vec<&CorpusItem>, Vec<&CorpusItem>, Vec<&CorpusItem>)> {
    let split = split_corpus(&corpus.items, seed)?;
    let (train, val, test) = (
        corpus.select(&split.train),
        corpus.select(&split.validation),
        corpus.select(&split.test),
    );
    let test = if test.is_empty() { val.clone() } else { test };
    Ok((train, val, test))
}

fn read_alignment(path: &Path, inv: &PhonemeInventory, n_samples: usize, cfg: &MelConfig) -> Result<PhonemeSegmentation> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let name = path.display().to_string();
    let raw = if name.to_ascii_lowercase().ends_with(".textgrid") {
        parse_textgrid(&text, cfg, &name)?
    } else {
        parse_alignment_csv(&text, &name)?
    };
    Ok(validate_alignment(&name, &raw, inv, n_samples, cfg)?)
}

fn corpus_cmd(cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Validate { root, inventory } => {
            let corpus = load_corpus(&CorpusArgs {
                corpus: root.clone(),
                inventory,
            })?;
            let frames: usize = corpus.items.iter().map(|i| i.n_frames()).sum();
            println!("{}: {} items, {frames} frames", root.display(), corpus.items.len());
            for (p, sym) in corpus.inventory.symbols().iter().enumerate() {
                let n: usize = corpus.items.iter().map(|i| i.segmentation.occurrences(p).count()).sum();
                println!("  {sym}: {n} occurrences");
            }
            if let Ok(split) = split_corpus(&corpus.items, 0) {
                println!(
                    "  split: {} train / {} validation / {} test",
                    split.train.len(),
                    split.validation.len(),
                    split.test.len()
                );
            }
        }
        CorpusCmd::Synth { seed, n, out, config } => {
            let cfg: SynthConfig = read_json(config.as_deref())?;
            let corpus = synth_corpus(seed, n, &cfg)?;
            write_corpus(&corpus, &out)?;
            println!("wrote {} items to {}", corpus.items.len(), out.display());
        }
    }
    Ok(())
}

fn open_log(out: &Path) -> Result<BufWriter<fs::File>> {
    fs::create_dir_all(out)?;
    Ok(BufWriter::new(fs::File::create(out.join(TRAIN_LOG))?))
}

fn train_cmd(cmd: TrainCmd) -> Result<()> {
    match cmd {
        TrainCmd::Siamese { corpus, config, out } => {
            let run: SiameseRun = read_json(config.as_deref())?;
            let corpus = load_corpus(&corpus)?;
            let (train, val, _) = partitions(&corpus, run.split_seed)?;
            let cfg = SiameseConfig {
                hidden: run.hidden,
                embed_dim: run.embed_dim,
                ..SiameseConfig::new(corpus.mel_config.n_mels)
            }
            .with_normalization(train.iter().map(|i| i.mel()));
            let mut log = open_log(&out)?;
            let (model, report) = train_siamese(
                Siamese::new(cfg, run.init_seed)?,
                &train,
                &val,
                &corpus.inventory,
                &run.train,
                Some(&mut log),
            )?;
            model.save(&out, serde_json::json!({ "best_epoch": report.best_epoch, "run": run }))?;
            fs::write(out.join(TRAIN_REPORT), serde_json::to_vec_pretty(&report)?)?;
            println!("siamese: {} ({} epochs)", report.stop_reason, report.epochs.len());
        }
        TrainCmd::Generator {
            corpus,
            config,
            siamese,
            out,
        } => {
            let run: GeneratorRun = read_json(config.as_deref())?;
            let corpus = load_corpus(&corpus)?;
            let (train, val, _) = partitions(&corpus, run.split_seed)?;
            let siamese = Siamese::load(checkpoint_dir(&siamese, "siamese"))?;
            let targets = symbols_to_indices(&corpus.inventory, &run.targets)?;
            let tau = run.train.tau.unwrap_or_else(|| derive_tau(&train, &targets));
            let cfg = GeneratorConfig {
                channels: run.channels,
                phoneme_embed_dim: run.phoneme_embed_dim,
                ..GeneratorConfig::new(tau, corpus.inventory.clone(), corpus.mel_config)
            }
            .with_normalization(train.iter().map(|i| i.mel()));
            let mut log = open_log(&out)?;
            let (model, report) = train_generator(
                Generator::new(cfg, run.init_seed)?,
                &siamese,
                &train,
                &val,
                &run.train,
                &targets,
                Some(&mut log),
            )?;
            model.save(&out, serde_json::json!({ "best_epoch": report.best_epoch, "run": run }))?;
            fs::write(out.join(TRAIN_REPORT), serde_json::to_vec_pretty(&report)?)?;
            println!("generator: tau {tau}, {} ({} epochs)", report.stop_reason, report.epochs.len());
        }
    }
    Ok(())
}

fn correct_cmd(args: CorrectArgs) -> Result<()> {
    let generator = Generator::load(checkpoint_dir(&args.ckpt, "generator"))?;
    let cfg = generator.config.mel;
    let inv = &generator.config.inventory;
    let waveform = resample(&load_wav(&args.input)?, cfg.sample_rate);
    let segmentation = read_alignment(&args.align, inv, waveform.len(), &cfg)?;
    let rho_star = inv.require(&args.target)?;
    let vocoder = args.vocoder.build(cfg)?;
    let mut req = CorrectionRequest::new(waveform, segmentation, args.k, rho_star);
    req.blend = args.blend;
    let out = correct_utterance(&req, &generator, &vocoder)?;
    write_wav(&args.out, &out.waveform)?;
    println!(
        "corrected frames {}..{} (blend {}) -> {}",
        out.window.utterance_start + out.window.mask_lo,
        out.window.utterance_start + out.window.mask_hi,
        out.blend,
        args.out.display()
    );
    Ok(())
}

fn baseline_cmd(args: BaselineArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let cfg = corpus.mel_config;
    let inv = &corpus.inventory;
    let recipient = resample(&load_wav(&args.input)?, cfg.sample_rate);
    let segmentation = read_alignment(&args.align, inv, recipient.len(), &cfg)?;
    let query = DonorQuery {
        target_phoneme: inv.require(&args.target)?,
        gender: Gender::parse(&args.gender),
        preferred_word: args.word.clone(),
    };
    let items: Vec<&CorpusItem> = corpus.items.iter().collect();
    let (donor_id, dk) = select_donor(&items, inv, &query, &args.speaker, args.seed)?;
    let donor_item = corpus.item(&donor_id).context("selected donor vanished")?;
    let donor = segment_samples(&donor_item.waveform, &donor_item.segmentation, dk, cfg.hop_size)?;
    let out = smooth_concat(
        &recipient,
        &segmentation,
        args.k,
        &donor,
        cfg.hop_size,
        &ConcatConfig::for_rate(cfg.sample_rate),
    )?;
    write_wav(&args.out, &out.waveform)?;
    println!(
        "donor {donor_id} segment {dk}, join offset {} samples -> {}",
        out.offset,
        args.out.display()
    );
    Ok(())
}

struct Models {
    generator: Generator,
    siamese: Siamese,
}

fn load_models(ckpt: &Path) -> Result<Models> {
    Ok(Models {
        generator: Generator::load(ckpt.join("generator")).context("loading generator checkpoint")?,
        siamese: Siamese::load(ckpt.join("siamese")).context("loading siamese checkpoint")?,
    })
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let models = load_models(&args.ckpt)?;
    if models.generator.config.inventory != corpus.inventory {
        bail!("generator inventory differs from the corpus inventory");
    }
    let (train, val, test) = partitions(&corpus, args.split_seed)?;
    let pairs = parse_pairs(&corpus.inventory, &args.pairs)?;
    let centroids = phoneme_centroids(&models.siamese, &train)?;
    let vocoder = args.vocoder.build(corpus.mel_config)?;
    let donors: Vec<&CorpusItem> = train.iter().chain(&val).copied().collect();
    let report = run_minimal_pair_experiment(
        &test,
        &donors,
        &corpus.inventory,
        &pairs,
        &ExperimentModels {
            generator: &models.generator,
            siamese: &models.siamese,
            centroids: &centroids,
            vocoder: &vocoder,
        },
        &ConcatConfig::for_rate(corpus.mel_config.sample_rate),
        args.seed,
    )?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    let md = report.to_markdown();
    fs::write(args.out.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}

/// The item's phoneme string with segment `k` replaced by `symbol`.
fn spelled(item: &CorpusItem, inv: &PhonemeInventory, k: usize, symbol: Option<&str>) -> String {
    let seg = &item.segmentation;
    (0..seg.len())
        .filter(|&i| seg.phoneme(i) != inv.silence_index() || i == k)
        .map(|i| match symbol {
            Some(s) if i == k => s.to_string(),
            _ => inv.symbol(seg.phoneme(i)).to_string(),
        })
        .collect::<Vec<_>>()
        .join("")
}

fn export_cmd(cmd: ExportCmd) -> Result<()> {
    match cmd {
        ExportCmd::Finetune {
            corpus,
            ckpt,
            targets,
            out,
        } => {
            let corpus = load_corpus(&corpus)?;
            let generator = Generator::load(checkpoint_dir(&ckpt, "generator"))?;
            let targets = symbols_to_indices(&corpus.inventory, &targets)?;
            let items: Vec<&CorpusItem> = corpus.items.iter().collect();
            let manifest = export_vocoder_finetune_set(&items, &corpus.inventory, &targets, &generator, &out)?;
            println!("wrote {} pairs to {}", manifest.pairs.len(), out.display());
        }
        ExportCmd::Listening {
            corpus,
            ckpt,
            pairs,
            n,
            vocoder,
            seed,
            split_seed,
            out,
        } => {
            let corpus = load_corpus(&corpus)?;
            let models = load_models(&ckpt)?;
            let inv = &corpus.inventory;
            let (_, _, test) = partitions(&corpus, split_seed)?;
            let pairs = parse_pairs(inv, &pairs)?;
            let vocoder = vocoder.build(corpus.mel_config)?;
            let mut stimuli = Vec::new();
            for (pi, &(p, q)) in pairs.iter().enumerate() {
                let cases: Vec<(&CorpusItem, usize)> = test
                    .iter()
                    .flat_map(|it| it.segmentation.occurrences(p).map(move |k| (*it, k)))
                    .take(n)
                    .collect();
                for (i, (item, k)) in cases.iter().enumerate() {
                    let req = CorrectionRequest::new(item.waveform.clone(), item.segmentation.clone(), *k, q);
                    let corrected = match correct_utterance(&req, &models.generator, &vocoder) {
                        Ok(c) => c,
                        Err(inpaint_core::Error::UtteranceTooShort { .. }) => continue,
                        Err(e) => return Err(e.into()),
                    };
                    let control = test[(i + 1 + pi) % test.len()];
                    stimuli.push(Stimulus {
                        id: format!("p{pi}-{i:03}"),
                        condition: "generated".into(),
                        target_word: spelled(item, inv, *k, Some(inv.symbol(q))),
                        minimal_pair_word: spelled(item, inv, *k, None),
                        control_word: spelled(control, inv, usize::MAX, None),
                        reference: Some(vocoder.vocode(&corrected.original_mel)?),
                        audio: corrected.waveform,
                    });
                }
            }
            let manifest = export_listening_manifest(&stimuli, &out, seed)?;
            println!(
                "wrote {} ABX tasks and {} MOS pairs to {}",
                manifest.abx_tasks.len(),
                manifest.mos_pairs.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Corpus(c) => corpus_cmd(c),
        Command::Train(c) => train_cmd(c),
        Command::Correct(a) => correct_cmd(a),
        Command::BaselineConcat(a) => baseline_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Export(c) => export_cmd(c),
    }
}
