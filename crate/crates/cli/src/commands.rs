use std::fs;
use std::io::Write;
use std::path::Path;

use svg_core::analysis::{
    compare_distributions, prior_variance_probe, sequence_velocity_distribution, VelocityHistogram,
};
use svg_core::config::{DataConfig, ExperimentConfig, Mode, ModelConfig, Profile};
use svg_core::data::{
    batch_frames, branching_batch, export_sequences, import_sequences, synchronized_batch, Bounds, Glyph, SmMnist,
    Split, TrajectoryState, VideoSequence,
};
use svg_core::evaluation::{best_of_n_eval, write_curves_csv, Metric};
use svg_core::models::Sampling;
use svg_core::render;
use svg_core::rng::{derive_seed, stream, Domain, Rng};
use svg_core::training::{load_checkpoint, save_checkpoint, MetricsLog, OnTheFly, Trainer};
use svg_core::{Error, Result};

use crate::{Common, EvalArgs, ExportArgs, GenerateArgs, PriorVarianceArgs, SplitArg, TrainArgs, VelocityArgs};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// Rows pushed through one sampling rollout.
const ROLLOUT_BATCH: usize = 64;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Mode { .. } | Error::Tensor(_) => EXIT_USAGE,
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) => EXIT_DATA,
        Error::Numerical(_) => EXIT_NUMERICAL,
    }
}

/// `model.*` overrides that install the architecture preset for `profile`,
/// keeping whatever mode is configured.
fn preset_overrides(profile: Profile) -> Vec<String> {
    let preset = match profile {
        Profile::Paper => ModelConfig::paper(),
        Profile::Small => ModelConfig::default(),
    };
    let table = toml::Table::try_from(preset).expect("model config serialises");
    table
        .into_iter()
        .filter(|(k, _)| k != "mode")
        .map(|(k, v)| format!("model.{k}={v}"))
        .collect()
}

/// Defaults < `--config` file < `--profile` < `--set` < dedicated flags.
pub fn resolve(common: &Common, flags: &[String]) -> Result<ExperimentConfig> {
    let mut overrides = Vec::new();
    if let Some(p) = common.profile {
        let profile = Profile::from(p);
        let name = match profile {
            Profile::Paper => "paper",
            Profile::Small => "small",
        };
        overrides.push(format!("data.profile=\"{name}\""));
        let probe = ExperimentConfig::load(common.config.as_deref(), &[&overrides[..], &common.set[..]].concat())?;
        if probe.model.frame_size != profile.frame_size() {
            overrides.extend(preset_overrides(profile));
        }
    }
    overrides.extend(common.set.iter().cloned());
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    overrides.extend(flags.iter().cloned());
    let cfg = ExperimentConfig::load(common.config.as_deref(), &overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn setup(common: &Common) -> Result<()> {
    if common.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    // a second build in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(common.threads).build_global();
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Data settings of a checkpoint, with the dataset directory taken from the
/// current run when it was set explicitly.
fn checkpoint_data(tr: &Trainer, run: &ExperimentConfig) -> DataConfig {
    let mut data = tr.config.data.clone();
    if run.data.mnist_dir != DataConfig::default().mnist_dir {
        data.mnist_dir = run.data.mnist_dir.clone();
    }
    data
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(m) = a.mode {
        flags.push(format!("model.mode=\"{}\"", Mode::from(m).name()));
    }
    if let Some(s) = a.steps {
        flags.push(format!("train.steps={s}"));
    }
    let cfg = resolve(&a.common, &flags)?;
    setup(&a.common)?;
    let out = &a.common.out;
    let metrics_path = out.join("metrics.csv");
    let mut tr = match &a.resume {
        Some(path) => {
            let mut tr = load_checkpoint(path)?;
            if a.mode.is_some_and(|m| Mode::from(m) != tr.model.mode()) {
                return Err(Error::Config("--mode differs from the resumed checkpoint".into()));
            }
            tr.config.train.steps = cfg.train.steps;
            tr
        }
        None => {
            if metrics_path.exists() {
                fs::remove_file(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
            }
            Trainer::new(cfg)?
        }
    };
    let data = SmMnist::load(&tr.config.data, Split::Train)?;
    let until = tr.config.train.steps;
    let every = tr.config.train.checkpoint_every;
    write_text(&out.join("config.toml"), &tr.config.to_toml())?;
    let mut log = MetricsLog::open(&metrics_path)?;
    let source = OnTheFly {
        data: &data,
        seed: tr.config.seed,
        batch_size: tr.config.train.batch_size,
        seq_len: tr.config.train.seq_len,
    };
    let report_every = (until / 20).max(1);
    eprintln!(
        "training {} model: {} parameters, steps {}..{until}",
        tr.model.mode().name(),
        tr.params.num_elements(),
        tr.step
    );
    tr.train(&source, until, |tr, m| {
        log.append(m)?;
        if m.step % report_every == 0 || m.step == until {
            eprintln!(
                "step {:>7}  loss {:.4}  recon {:.4}  kl {:.4}{}",
                m.step,
                m.report.total,
                m.report.recon(),
                m.report.kl(),
                if m.clipped { "  (clipped)" } else { "" }
            );
        }
        if every > 0 && m.step % every == 0 {
            save_checkpoint(tr, &out.join(format!("checkpoint-{:08}.svgc", m.step)))?;
        }
        Ok(())
    })?;
    let path = out.join("checkpoint.svgc");
    save_checkpoint(&tr, &path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn blank(n: usize) -> Vec<f64> {
    vec![0.0; n]
}

/// Per-row noise streams for rows `first..first + n` and sample `s`.
fn sample_streams(seed: u64, domain: Domain, first: usize, n: usize, s: usize) -> Vec<Rng> {
    (0..n)
        .map(|i| stream(seed, domain, &[(first + i) as u64, s as u64]))
        .collect()
}

/// Copy of `seq` whose frames from `context` on are the given rows.
fn with_generated(seq: &VideoSequence, context: usize, generated: &[Vec<f64>]) -> VideoSequence {
    let n = seq.height * seq.width;
    let mut out = seq.clone();
    for (k, frame) in generated.iter().enumerate() {
        out.pixels[(context + k) * n..(context + k + 1) * n].copy_from_slice(frame);
    }
    out
}

/// Roll out every sequence once for sample index `s`, returning the
/// generated frames per sequence.
fn sample_continuations(
    tr: &Trainer,
    seqs: &[VideoSequence],
    context: usize,
    total: usize,
    seed: u64,
    domain: Domain,
    s: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for (c, chunk) in seqs.chunks(ROLLOUT_BATCH).enumerate() {
        let frames = batch_frames(chunk)?;
        let mut rngs = sample_streams(seed, domain, c * ROLLOUT_BATCH, chunk.len(), s);
        let roll = tr
            .model
            .rollout(&tr.params, &frames[..context], context, total, Sampling::Prior, &mut rngs)?;
        let n = chunk[0].height * chunk[0].width;
        for i in 0..chunk.len() {
            out.push(roll.frames.iter().map(|f| f.data()[i * n..(i + 1) * n].to_vec()).collect());
        }
    }
    Ok(out)
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let run = resolve(&a.common, &[])?;
    setup(&a.common)?;
    if a.context == 0 || a.horizon <= a.context {
        return Err(Error::Config(format!(
            "--horizon ({}) must exceed --context ({}), which must be at least 1",
            a.horizon, a.context
        )));
    }
    if a.samples == 0 || a.sequences == 0 {
        return Err(Error::Config("--samples and --sequences must be at least 1".into()));
    }
    let tr = load_checkpoint(&a.checkpoint)?;
    let test = SmMnist::load(&checkpoint_data(&tr, &run), Split::Test)?;
    let seqs = test.sequences(tr.config.seed, Domain::TestData, 0, a.sequences, a.horizon)?;
    let seed = a.common.seed.unwrap_or(tr.config.seed);
    let mut samples = Vec::with_capacity(a.samples);
    for s in 0..a.samples {
        samples.push(sample_continuations(&tr, &seqs, a.context, a.horizon, seed, Domain::EvalSample, s)?);
    }
    let (h, w) = (seqs[0].height, seqs[0].width);
    let pad = blank(h * w);
    let mut raw = Vec::with_capacity(a.sequences * a.samples);
    for (i, seq) in seqs.iter().enumerate() {
        let mut rows: Vec<Vec<&[f64]>> = vec![(0..seq.len).map(|t| seq.frame(t)).collect()];
        for sample in &samples {
            let mut row: Vec<&[f64]> = vec![&pad[..]; a.context];
            row.extend(sample[i].iter().map(|f| &f[..]));
            rows.push(row);
            raw.push(with_generated(seq, a.context, &sample[i]));
        }
        render::save_frame_sheet(&a.common.out.join(format!("sheet_{i:03}.png")), &rows, h, w)?;
    }
    export_sequences(&a.common.out.join("samples.smmn"), &raw)?;
    export_sequences(&a.common.out.join("ground_truth.smmn"), &seqs)?;
    eprintln!(
        "wrote {} sheets and {} sampled sequences to {}",
        seqs.len(),
        raw.len(),
        a.common.out.display()
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let run = resolve(&a.common, &[])?;
    setup(&a.common)?;
    let samples = a.samples.unwrap_or(run.eval.samples);
    let context = a.context.unwrap_or(run.eval.context);
    let horizon = a.horizon.unwrap_or(run.eval.horizon);
    let count = a.sequences.unwrap_or(run.eval.test_sequences);
    if count == 0 {
        return Err(Error::Config("evaluation needs at least one test sequence".into()));
    }
    let tr = load_checkpoint(&a.checkpoint)?;
    let test = SmMnist::load(&checkpoint_data(&tr, &run), Split::Test)?;
    let seqs = test.sequences(tr.config.seed, Domain::TestData, 0, count, context + horizon)?;
    let seed = a.common.seed.unwrap_or(tr.config.seed);
    let report = best_of_n_eval(&tr.model, &tr.params, &seqs, context, horizon, samples, seed)?;
    write_curves_csv(&a.common.out.join("eval.csv"), &report.curves)?;
    for metric in Metric::ALL {
        let c = report.curve(metric);
        println!(
            "{} best-of-{samples}: mean over {horizon} predicted frames {:.4}",
            metric.name(),
            c.window_mean(0, c.len())
        );
    }
    Ok(())
}

fn bounds_for(data: &DataConfig) -> Bounds {
    let size = data.profile.frame_size();
    Bounds {
        height: size,
        width: size,
        sprite: data.profile.digit_size(),
        max_speed: data.max_speed,
    }
}

fn save_histogram(out: &Path, prefix: &str, hist: &VelocityHistogram) -> Result<()> {
    hist.write_csv(&out.join(format!("{prefix}_t{:03}.csv", hist.t)))?;
    let values: Vec<f64> = hist.counts.iter().map(|&c| c as f64).collect();
    render::save_heatmap(&out.join(format!("{prefix}_t{:03}.png", hist.t)), &values, hist.side(), hist.side())
}

pub fn velocity_dist(a: &VelocityArgs) -> Result<()> {
    let run = resolve(&a.common, &[])?;
    setup(&a.common)?;
    let model = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let data = match &model {
        Some(tr) => checkpoint_data(tr, &run),
        None => run.data.clone(),
    };
    let n = a.samples.unwrap_or(run.analysis.velocity_samples);
    let len = a.len.unwrap_or(run.analysis.velocity_len);
    if n == 0 || len < 2 {
        return Err(Error::Config("velocity analysis needs samples >= 1 and len >= 2".into()));
    }
    if model.is_some() && (a.context == 0 || a.context >= len) {
        return Err(Error::Config(format!("--context must lie in 1..{len}")));
    }
    let test = SmMnist::load(&data, Split::Test)?;
    let bounds = bounds_for(&data);
    let seed = run.seed;
    let start = TrajectoryState::random(&bounds, &mut stream(seed, Domain::Analysis, &[0]));
    let size = bounds.height;
    let truth = branching_batch(
        &test.glyphs,
        &start,
        n,
        len,
        size,
        size,
        data.max_speed,
        derive_seed(seed, Domain::Analysis, &[1]),
    )?;
    let templates: Vec<&Glyph> = (0..n).map(|i| &test.glyphs[i % test.glyphs.len()]).collect();
    if let Some(c) = truth[0].collisions[0].first() {
        eprintln!("shared trajectory first collides at frame {}", c.step);
    }

    let out = &a.common.out;
    let mut summary = String::from("source,t,samples,dropped,peak_mass,tv_to_truth\n");
    let mut truth_hists = Vec::with_capacity(len - 1);
    for t in 0..len - 1 {
        let hist = sequence_velocity_distribution(&truth, &templates, t)?;
        save_histogram(out, "truth", &hist)?;
        summary.push_str(&format!("truth,{t},{},{},{:.6},\n", hist.samples, hist.dropped, hist.peak_mass()));
        truth_hists.push(hist);
    }
    if let Some(tr) = &model {
        let generated = sample_continuations(tr, &truth, a.context, len, seed, Domain::Analysis, 2)?;
        let sampled: Vec<VideoSequence> = truth
            .iter()
            .zip(&generated)
            .map(|(s, g)| with_generated(s, a.context, g))
            .collect();
        for (t, truth_hist) in truth_hists.iter().enumerate().skip(a.context - 1) {
            let hist = sequence_velocity_distribution(&sampled, &templates, t)?;
            save_histogram(out, "model", &hist)?;
            let tv = compare_distributions(&hist, truth_hist)?;
            summary.push_str(&format!(
                "model,{t},{},{},{:.6},{tv:.6}\n",
                hist.samples,
                hist.dropped,
                hist.peak_mass()
            ));
        }
    }
    write_text(&out.join("velocity_summary.csv"), &summary)?;
    eprintln!("wrote velocity histograms to {}", out.display());
    Ok(())
}

pub fn prior_variance(a: &PriorVarianceArgs) -> Result<()> {
    let run = resolve(&a.common, &[])?;
    setup(&a.common)?;
    let tr = load_checkpoint(&a.checkpoint)?;
    if tr.model.mode() != Mode::Lp {
        return Err(Error::Mode {
            mode: tr.model.mode().name().into(),
            what: "the prior-variance probe, which needs a learned prior (train with --mode lp)",
        });
    }
    let data = checkpoint_data(&tr, &run);
    let n = a.sequences.unwrap_or(run.analysis.probe_sequences);
    let len = a.len.unwrap_or(run.analysis.probe_len);
    let test = SmMnist::load(&data, Split::Test)?;
    let size = data.profile.frame_size();
    let probe = synchronized_batch(
        &test.glyphs,
        data.num_digits,
        derive_seed(run.seed, Domain::Analysis, &[3]),
        n,
        len,
        size,
        size,
        data.max_speed,
    )?;
    let curve = prior_variance_probe(&tr.model, &tr.params, &probe)?;
    let out = &a.common.out;
    curve.write_csv(&out.join("prior_variance.csv"))?;
    // curve entry i covers frame i + 1
    let markers: Vec<usize> = curve
        .collisions
        .iter()
        .flatten()
        .filter(|&&k| k >= 1)
        .map(|&k| k - 1)
        .collect();
    render::save_line_plot(&out.join("prior_variance.png"), &curve.mean, &curve.std, &markers)?;
    if let Some((near, far)) = curve.collision_contrast(1, 3) {
        println!("mean sigma near collisions {near:.5}, away from collisions {far:.5}, ratio {:.3}", near / far);
    }
    Ok(())
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    }
}

pub fn dataset_export(a: &ExportArgs) -> Result<()> {
    let run = resolve(&a.common, &[])?;
    setup(&a.common)?;
    if a.count == 0 || a.len == 0 {
        return Err(Error::Config("--count and --len must be at least 1".into()));
    }
    let data = SmMnist::load(&run.data, split_of(a.split))?;
    let seqs = data.sequences(run.seed, Domain::Export, 0, a.count, a.len)?;
    export_sequences(&a.common.out.join("dataset.smmn"), &seqs)?;
    let rows: Vec<Vec<&[f64]>> = seqs.iter().take(8).map(|s| (0..s.len).map(|t| s.frame(t)).collect()).collect();
    render::save_frame_sheet(
        &a.common.out.join("dataset_preview.png"),
        &rows,
        seqs[0].height,
        seqs[0].width,
    )?;
    eprintln!("wrote {} sequences to {}", seqs.len(), a.common.out.display());
    Ok(())
}

pub fn dataset_inspect(file: &Path) -> Result<()> {
    let (len, h, w, count, pixels) = import_sequences(file)?;
    let mean = pixels.iter().map(|&p| p as f64).sum::<f64>() / pixels.len().max(1) as f64;
    let max = pixels.iter().cloned().fold(0.0f32, f32::max);
    println!("sequences {count}");
    println!("frames {len}");
    println!("height {h}");
    println!("width {w}");
    println!("mean_pixel {mean:.6}");
    println!("max_pixel {max:.6}");
    Ok(())
}

pub fn dump_config(common: &Common) -> Result<()> {
    let cfg = resolve(common, &[])?;
    print!("{}", cfg.to_toml());
    Ok(())
}
