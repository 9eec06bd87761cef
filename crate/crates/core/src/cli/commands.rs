use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::thread;

use super::config::{Interp, RunConfig};
use super::{io_error, CliError};
use crate::align::{duration_ratio, dtw, interpolate_source, warp_to_target, Distance};
use crate::dsp::{extract_f0, griffin_lim, mel_spectrogram, F0Config, MelConfig};
use crate::eval::{alignment_pgm, alignment_tsv, f0_rmse, mcd, mel_cepstra, overlay_tsv, MetricReport, UtteranceMetrics, MAX_MCD_COEFF};
use crate::features::{AlignmentMatrix, FeatureSequence};
use crate::io::{self, Checkpoint};
use crate::model::{convert, ConvertLimits, InputChannels, ModelConfig, StopReason};
use crate::synth::{build_corpus, load_split, read_path, CorpusPair, Manifest, Split};
use crate::train::{EpochSummary, FeatureStats, StepRecord, TrainPair, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const STEP_LOG: &str = "train.log";
pub const EPOCH_LOG: &str = "epochs.tsv";
pub const CONVERSION_INDEX: &str = "conversions.tsv";

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

/// Order-preserving map over scoped worker threads.
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = thread::available_parallelism().map_or(1, usize::from).min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Vec<U>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    Ok(Manifest::read(&dir.join("manifest.tsv"))?)
}

/// Write the corpus described by `cfg.corpus` into `cfg.paths.corpus`,
/// plus a `corpus.toml` recording the generator settings.
pub fn cmd_gen_data(cfg: &RunConfig, force: bool) -> Result<Manifest, CliError> {
    let dir = &cfg.paths.corpus;
    let manifest = build_corpus(&cfg.corpus, dir, force)?;
    manifest.validate(dir)?;
    let spec = toml::to_string(&cfg.corpus).map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&dir.join("corpus.toml"), spec)?;
    Ok(manifest)
}

fn cepstral_view(mel: &FeatureSequence) -> Result<FeatureSequence, CliError> {
    let n = mel.dims();
    let k = MAX_MCD_COEFF.min(n.saturating_sub(1));
    Ok(mel_cepstra(mel, n)?.select_dims(1, k))
}

/// Training pairs in normalised units. Without attention each source is
/// warped onto its target's timeline by DTW over mel cepstra, so the
/// decoder can read encoder states at a fixed rate.
pub fn prepare_pairs(
    model: &ModelConfig,
    pairs: &[CorpusPair],
    stats: &FeatureStats,
) -> Result<Vec<TrainPair>, CliError> {
    let prepared = par_map(pairs, |p| -> Result<TrainPair, CliError> {
        let source = stats.normalize_source(&p.source);
        let target = stats.normalize_target(&p.target);
        let source = if model.attention {
            source
        } else {
            let a = cepstral_view(&p.source.select_dims(0, model.d_mel))?;
            let b = cepstral_view(&p.target)?;
            let path = dtw(&a, &b, Distance::Euclidean)?;
            warp_to_target(&source, &path)?
        };
        Ok(TrainPair::new(source, target))
    });
    prepared.into_iter().collect()
}

fn check_dims(model: &ModelConfig, pairs: &[CorpusPair]) -> Result<(), CliError> {
    let Some(p) = pairs.first() else {
        return Err(CliError::Data("the split is empty".into()));
    };
    if p.source.dims() != model.d_mel + model.d_aux || p.target.dims() != model.d_mel {
        return Err(CliError::Data(format!(
            "corpus frames are {}-dim sources and {}-dim targets, the model expects {} and {}",
            p.source.dims(),
            p.target.dims(),
            model.d_mel + model.d_aux,
            model.d_mel
        )));
    }
    Ok(())
}

fn open_log(path: &Path, append: bool, header: &str) -> Result<BufWriter<File>, CliError> {
    let fresh = !append || !path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)
        .map_err(|e| io_error(path, e))?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{header}").map_err(|e| io_error(path, e))?;
    }
    Ok(w)
}

fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<(), CliError> {
    let tmp = path.with_extension("ckpt.tmp");
    trainer.checkpoint().save(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

/// Train until `cfg.train.epochs` epochs are complete. The run directory
/// receives the latest checkpoint after every epoch, the per-step log,
/// the per-epoch log and the resolved configuration.
pub fn cmd_train(cfg: &RunConfig, resume: bool, force: bool) -> Result<Vec<EpochSummary>, CliError> {
    let model = cfg.effective_model();
    let manifest = read_manifest(&cfg.paths.corpus)?;
    let train = load_split(&manifest, &cfg.paths.corpus, Split::Train)?;
    let val = load_split(&manifest, &cfg.paths.corpus, Split::Val)?;
    check_dims(&model, &train)?;

    let run = &cfg.paths.run;
    create_dir(run)?;
    let ck_path = run.join(CHECKPOINT_FILE);
    let resuming = resume && ck_path.exists();
    let mut trainer = if resuming {
        let ck = Checkpoint::load(&ck_path)?;
        if ck.model != model {
            return Err(CliError::Config("the checkpoint was trained with a different model configuration".into()));
        }
        let mut t = Trainer::from_checkpoint(ck)?;
        t.cfg.epochs = cfg.train.epochs;
        t
    } else {
        if ck_path.exists() && !force {
            return Err(CliError::Data(format!(
                "{} exists; pass --resume to continue or --force to start over",
                ck_path.display()
            )));
        }
        let mut t = Trainer::new(model.clone(), cfg.train.clone())?;
        let raw: Vec<TrainPair> = train.iter().map(|p| TrainPair::new(p.source.clone(), p.target.clone())).collect();
        t.stats = Some(FeatureStats::fit(&raw));
        t
    };
    let stats = trainer
        .stats
        .clone()
        .ok_or_else(|| CliError::Data("the checkpoint carries no feature statistics".into()))?;
    let data = prepare_pairs(&model, &train, &stats)?;
    let validation = prepare_pairs(&model, &val, &stats)?;

    write_file(&run.join(CONFIG_FILE), cfg.to_toml())?;
    let step_path = run.join(STEP_LOG);
    let epoch_path = run.join(EPOCH_LOG);
    let mut steps = open_log(&step_path, resuming, StepRecord::TSV_HEADER)?;
    let mut epochs = open_log(&epoch_path, resuming, "epoch\tmean_total\tskipped\tval_total")?;

    let mut summaries = Vec::new();
    while trainer.epoch < trainer.cfg.epochs {
        let s = trainer.train_epoch(&data, &validation, &mut steps)?;
        let val_total = s.validation.map_or_else(|| "n/a".to_string(), |v| format!("{:.8e}", v.total));
        writeln!(epochs, "{}\t{:.8e}\t{}\t{val_total}", s.epoch, s.mean_total, s.skipped)
            .map_err(|e| io_error(&epoch_path, e))?;
        steps.flush().map_err(|e| io_error(&step_path, e))?;
        epochs.flush().map_err(|e| io_error(&epoch_path, e))?;
        save_checkpoint(&trainer, &ck_path)?;
        summaries.push(s);
    }
    Ok(summaries)
}

/// What `convert` reads.
#[derive(Clone, Debug)]
pub enum ConvertInput {
    /// Every source of a corpus split, named by item id.
    Split(Split),
    /// One `[mel | aux]` feature file, named by its file stem.
    Features(PathBuf),
    /// One waveform plus optional auxiliary features.
    Wave { wav: PathBuf, aux: Option<PathBuf> },
}

/// One line of `conversions.tsv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvertedItem {
    pub id: String,
    pub source_frames: usize,
    pub input_frames: usize,
    pub output_frames: usize,
    pub steps: usize,
    pub stop: StopReason,
}

fn stem(path: &Path) -> String {
    let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    name.split('.').next().unwrap_or_default().to_string()
}

fn wave_source(
    cfg: &RunConfig,
    model: &ModelConfig,
    stats: &FeatureStats,
    wav: &Path,
    aux: Option<&Path>,
) -> Result<FeatureSequence, CliError> {
    let mel = mel_spectrogram(&io::read_wav(wav)?, &cfg.corpus.mel)?;
    let aux = match aux {
        Some(p) => io::read_features(p)?,
        None if model.inputs == InputChannels::MelOnly => {
            let mean = &stats.source_mean[model.d_mel..];
            FeatureSequence::from_frames(&vec![mean.to_vec(); mel.frames()])?
        }
        None => return Err(CliError::Data("this model reads auxiliary features; pass --aux".into())),
    };
    if aux.frames() != mel.frames() {
        return Err(CliError::Data(format!(
            "{} mel frames but {} auxiliary frames",
            mel.frames(),
            aux.frames()
        )));
    }
    mel.concat_dims(&aux).ok_or_else(|| CliError::Data("cannot join mel and auxiliary features".into()))
}

/// Mean target-over-source duration ratio of the corpus' training split.
pub fn training_ratio(corpus: &Path) -> Result<f64, CliError> {
    let manifest = read_manifest(corpus)?;
    let durations: Vec<(f64, f64)> = manifest
        .pairs(Split::Train)
        .into_iter()
        .map(|(s, t)| (s.duration_secs, t.duration_secs))
        .collect();
    Ok(duration_ratio(&durations)?)
}

fn alignment_features(a: &AlignmentMatrix) -> FeatureSequence {
    let t = a.tensor();
    FeatureSequence::new(t.rows(), t.cols(), t.data().to_vec()).expect("alignment shape")
}

/// Convert and write `{id}.mel.fea` (denormalised PostNet output),
/// `{id}.align.fea` (decoder steps × encoder states), `{id}.wav` when
/// Griffin-Lim is enabled, and `conversions.tsv`. Items that hit the
/// step cap keep their partial outputs and make the command fail with
/// [`CliError::Incomplete`] once every item has been written.
pub fn cmd_convert(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &ConvertInput,
    out: &Path,
) -> Result<Vec<ConvertedItem>, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model.clone();
    let stats = ck
        .stats
        .clone()
        .ok_or_else(|| CliError::Data("the checkpoint carries no feature statistics".into()))?;
    let sources: Vec<(String, FeatureSequence)> = match input {
        ConvertInput::Split(split) => {
            let manifest = read_manifest(&cfg.paths.corpus)?;
            load_split(&manifest, &cfg.paths.corpus, *split)?
                .into_iter()
                .map(|p| (p.id, p.source))
                .collect()
        }
        ConvertInput::Features(p) => vec![(stem(p), io::read_features(p)?)],
        ConvertInput::Wave { wav, aux } => vec![(stem(wav), wave_source(cfg, &model, &stats, wav, aux.as_deref())?)],
    };
    let ratio = match cfg.convert.interp {
        None => None,
        Some(Interp::Ratio(r)) => Some(r),
        Some(Interp::Auto) => Some(training_ratio(&cfg.paths.corpus)?),
    };
    let limits = ConvertLimits {
        max_steps: cfg.convert.max_steps,
    };
    create_dir(out)?;

    let mut items = Vec::new();
    for (id, source) in &sources {
        let x = match ratio {
            Some(r) => interpolate_source(source, r)?,
            None => source.clone(),
        };
        let c = convert(&model, &ck.params, &stats.normalize_source(&x), limits)?;
        let mel = stats.denormalize_target(&c.mel);
        io::write_features(&out.join(format!("{id}.mel.fea")), &mel)?;
        io::write_features(&out.join(format!("{id}.align.fea")), &alignment_features(&c.alignment))?;
        if cfg.convert.griffin_lim > 0 {
            let audio = griffin_lim(&mel, &cfg.corpus.mel, cfg.convert.griffin_lim)?;
            io::write_wav(&out.join(format!("{id}.wav")), &audio.waveform)?;
        }
        items.push(ConvertedItem {
            id: id.clone(),
            source_frames: source.frames(),
            input_frames: x.frames(),
            output_frames: mel.frames(),
            steps: c.p_end.len(),
            stop: c.stop,
        });
    }

    let mut index = String::from("id\tsource_frames\tinput_frames\toutput_frames\tsteps\tstop\n");
    for i in &items {
        let stop = match i.stop {
            StopReason::EndFlag => "end-flag",
            StopReason::FixedLength => "fixed-length",
            StopReason::StepCap => "step-cap",
        };
        index.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{stop}\n",
            i.id, i.source_frames, i.input_frames, i.output_frames, i.steps
        ));
    }
    write_file(&out.join(CONVERSION_INDEX), index)?;

    let capped: Vec<&str> = items.iter().filter(|i| i.stop == StopReason::StepCap).map(|i| i.id.as_str()).collect();
    if !capped.is_empty() {
        return Err(CliError::Incomplete(format!(
            "{} of {} items reached the step cap ({}); partial outputs were written",
            capped.len(),
            items.len(),
            capped.join(", ")
        )));
    }
    Ok(items)
}

/// A labelled directory of converted utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct System {
    pub label: String,
    pub dir: PathBuf,
}

impl System {
    /// `LABEL=DIR`, or a bare directory labelled by its last component.
    pub fn parse(s: &str) -> Self {
        match s.split_once('=') {
            Some((label, dir)) if !label.is_empty() => Self {
                label: label.to_string(),
                dir: dir.into(),
            },
            _ => {
                let dir = PathBuf::from(s);
                let label = dir.file_name().map_or_else(|| s.to_string(), |n| n.to_string_lossy().into_owned());
                Self { label, dir }
            }
        }
    }
}

fn f0_track(wav: &Path, cfg: &F0Config, frames: usize) -> Result<Vec<f64>, CliError> {
    let mut f0: Vec<f64> = extract_f0(&io::read_wav(wav)?, cfg).iter().map(|p| p.f0).collect();
    f0.resize(frames, 0.0);
    Ok(f0)
}

fn score(dir: &Path, p: &CorpusPair, mel_cfg: &MelConfig, f0_cfg: &F0Config) -> UtteranceMetrics {
    let mut m = UtteranceMetrics {
        id: p.id.clone(),
        target_secs: p.target_secs,
        ..UtteranceMetrics::default()
    };
    let mel_path = dir.join(format!("{}.mel.fea", p.id));
    if !mel_path.exists() {
        m.error = Some("converted features are missing".into());
        return m;
    }
    let result = (|| -> Result<(), CliError> {
        let conv = io::read_features(&mel_path)?;
        m.converted_secs = conv.frames() as f64 * mel_cfg.frame_secs();
        let d = mcd(&conv, &p.target)?;
        m.mcd = Some(d.mcd);
        let wav = dir.join(format!("{}.wav", p.id));
        if wav.exists() {
            let c = f0_track(&wav, f0_cfg, conv.frames())?;
            let r = f0_track(&p.target_wav, f0_cfg, p.target.frames())?;
            if let Ok(e) = f0_rmse(&c, &r, Some(&d.path)) {
                m.f0_rmse = Some(e.rmse);
                m.voiced_frames = e.voiced_frames;
                m.aligned_frames = e.aligned_frames;
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        m.error = Some(e.to_string());
    }
    m
}

/// Score each system against the split's targets. Writes
/// `{label}.report.txt` per system and a `summary.tsv` with one row per
/// system. F0 is measured when the converted directory holds audio.
/// Missing or unreadable items are listed in the reports and make the
/// command fail with a data error after everything is written.
pub fn cmd_eval(cfg: &RunConfig, systems: &[System], split: Split, out: &Path) -> Result<Vec<MetricReport>, CliError> {
    let manifest = read_manifest(&cfg.paths.corpus)?;
    let pairs = load_split(&manifest, &cfg.paths.corpus, split)?;
    let f0_cfg = F0Config {
        hop_ms: cfg.corpus.mel.hop_ms,
        ..F0Config::default()
    };
    create_dir(out)?;
    let mut reports = Vec::new();
    let mut summary = String::from("system\tmcd_db\tf0_rmse_hz\tddur_secs\tutterances\tfailures\n");
    for sys in systems {
        let utterances = par_map(&pairs, |p| score(&sys.dir, p, &cfg.corpus.mel, &f0_cfg));
        let report = MetricReport {
            label: sys.label.clone(),
            utterances,
        };
        write_file(&out.join(format!("{}.report.txt", sys.label)), report.to_text())?;
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"));
        summary.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            sys.label,
            opt(report.mcd()),
            opt(report.f0_rmse()),
            opt(report.ddur()),
            report.utterances.len(),
            report.failures()
        ));
        reports.push(report);
    }
    write_file(&out.join("summary.tsv"), summary)?;
    let failed: usize = reports.iter().map(MetricReport::failures).sum();
    if failed > 0 {
        return Err(CliError::Data(format!("{failed} utterances could not be scored; see the reports")));
    }
    Ok(reports)
}

/// For every `{id}.align.fea` in `converted`: a PGM heat map (width =
/// encoder states, height = decoder steps), the matrix as TSV, and, when
/// `corpus` is given, the ground-truth path subsampled to one encoder
/// state per decoder step. Returns the ids plotted.
pub fn cmd_plot(
    converted: &Path,
    corpus: Option<&Path>,
    split: Split,
    r: usize,
    downsample: usize,
    out: &Path,
) -> Result<Vec<String>, CliError> {
    let mut ids: Vec<String> = fs::read_dir(converted)
        .map_err(|e| io_error(converted, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix(".align.fea").map(str::to_string))
        .collect();
    ids.sort();
    let truths = match corpus {
        Some(dir) => {
            let manifest = read_manifest(dir)?;
            manifest
                .pairs(split)
                .into_iter()
                .filter_map(|(_, t)| Some((t.id.clone(), dir.join(t.truth.as_ref()?))))
                .collect()
        }
        None => Vec::new(),
    };
    create_dir(out)?;
    for id in &ids {
        let a = AlignmentMatrix::new(io::read_features(&converted.join(format!("{id}.align.fea")))?.into_tensor());
        write_file(&out.join(format!("{id}.pgm")), alignment_pgm(&a))?;
        write_file(&out.join(format!("{id}.align.tsv")), alignment_tsv(&a))?;
        if let Some((_, path)) = truths.iter().find(|(t, _)| t == id) {
            let track = read_path(path)?.encoder_track(a.steps(), r, downsample);
            write_file(&out.join(format!("{id}.overlay.tsv")), overlay_tsv(&track))?;
        }
    }
    Ok(ids)
}
