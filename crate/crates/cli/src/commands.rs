//! The `pretrain`, `train-relations`, `evaluate`, `plot` and `list-taps`
//! commands. Every command reads the experiment configuration, works inside
//! its output directory and records what it wrote in the run manifest.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use mlcl::checkpoint::atomic_write;
use mlcl::encoders::{list_taps, Encoder, EncoderConfig};
use mlcl::episodes::EvalReport;
use mlcl::experiment::evaluate_members;
use mlcl::fewshot::{load_relation_net, save_relation_net, train_relation_net, RelationNet};
use mlcl::pretrain::{config_fingerprint, continue_pretrain, load_encoder, load_train_state, save_train_state, TrainState};

use crate::config::ExperimentConfig;
use crate::manifest::{Artifact, ArtifactKind, RunManifest};
use crate::plot::{Chart, Row};

pub const REPORT_SCHEMA: u32 = 1;

/// An experiment configuration bound to its output directory and manifest.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub fingerprint: String,
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl Run {
    pub fn open(cfg: ExperimentConfig) -> anyhow::Result<Self> {
        cfg.validate()?;
        let dir = cfg.output_dir.clone();
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut manifest = RunManifest::open(&dir)?;
        let fingerprint = cfg.fingerprint()?;
        manifest.register_config(&dir, &fingerprint, &cfg.to_toml()?)?;
        manifest.save(&dir)?;
        Ok(Run {
            cfg,
            fingerprint,
            dir,
            manifest,
        })
    }

    fn record(&mut self, artifact: Artifact) -> anyhow::Result<()> {
        self.manifest.record(&self.dir, artifact)?;
        self.manifest.save(&self.dir)
    }

    fn rel(seed: u64, name: String) -> PathBuf {
        PathBuf::from(format!("seed{seed}")).join(name)
    }
}

#[derive(Debug, Clone, Serialize)]
struct MetricLine<'a> {
    seed: u64,
    encoder: &'a str,
    step: u64,
    ce: f64,
    levels: BTreeMap<String, f64>,
    mlcl: f64,
    total: f64,
    lr: f64,
}

/// Keeps only the metric lines of steps before `step`.
fn truncate_metrics(path: &Path, step: u64) -> anyhow::Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let v: serde_json::Value = serde_json::from_str(&line).with_context(|| format!("corrupt metrics line in {}", path.display()))?;
        if v["step"].as_u64().is_some_and(|s| s < step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    atomic_write(path, kept.as_bytes())?;
    Ok(())
}

/// Outcome of [`cmd_pretrain`] for one (seed, encoder).
#[derive(Debug, Clone, PartialEq)]
pub enum PretrainStatus {
    Complete,
    AlreadyComplete,
    Stopped { step: u64 },
}

/// Pretrains every encoder for every seed, resuming from existing
/// checkpoints. `stop_after` halts each run at that global step, leaving a
/// resumable checkpoint (used to exercise interruption).
pub fn cmd_pretrain(run: &mut Run, stop_after: Option<u64>) -> anyhow::Result<Vec<(u64, String, PretrainStatus)>> {
    let mut out = Vec::new();
    for seed in run.cfg.seeds.clone() {
        let ds = run.cfg.dataset_for(seed)?;
        for (e, entry) in run.cfg.encoders.clone().iter().enumerate() {
            let enc_cfg = entry.encoder_config()?;
            let pcfg = run.cfg.pretrain_for(e, seed)?;
            let want = config_fingerprint(&enc_cfg, &pcfg)?;
            let ckpt_rel = Run::rel(seed, format!("{}.ckpt", entry.id));
            let metrics_rel = Run::rel(seed, format!("{}.metrics.jsonl", entry.id));
            let ckpt = run.dir.join(&ckpt_rel);
            let metrics = run.dir.join(&metrics_rel);
            std::fs::create_dir_all(ckpt.parent().unwrap())?;
            let mut state: TrainState<f32> = if ckpt.exists() {
                let (state, saved) = load_train_state::<f32>(&ckpt)?;
                let have = config_fingerprint(state.encoder.config(), &saved)?;
                if have != want {
                    bail!(
                        "{} was trained with a different configuration ({have} != {want}); remove it or use another output directory",
                        ckpt.display()
                    );
                }
                log::info!("seed {seed} encoder {}: resuming at step {}", entry.id, state.step);
                state
            } else {
                TrainState::new(&enc_cfg, ds.train.len(), &pcfg)?
            };
            let done_before = state.total_steps > 0 && state.step >= state.total_steps;
            truncate_metrics(&metrics, state.step)?;
            if !done_before {
                let mut sink = BufWriter::new(OpenOptions::new().create(true).append(true).open(&metrics)?);
                let every = run.cfg.checkpoint_every;
                let id = entry.id.clone();
                let mut observer = |st: &TrainState<f32>, r: &mlcl::pretrain::StepRecord| -> mlcl::Result<()> {
                    let line = MetricLine {
                        seed,
                        encoder: &id,
                        step: r.step,
                        ce: r.ce,
                        levels: r.levels.iter().map(|(l, v)| (l.to_string(), *v)).collect(),
                        mlcl: r.mlcl,
                        total: r.total,
                        lr: r.lr,
                    };
                    let io = |e| mlcl::Error::io(&metrics, e);
                    serde_json::to_writer(&mut sink, &line)?;
                    sink.write_all(b"\n").map_err(io)?;
                    if st.step % every == 0 {
                        sink.flush().map_err(io)?;
                        save_train_state(&ckpt, st, &pcfg)?;
                    }
                    if r.step % 10 == 0 {
                        log::info!("seed {seed} encoder {id} step {} ce {:.4} mlcl {:.4} lr {:.5}", r.step, r.ce, r.mlcl, r.lr);
                    }
                    Ok(())
                };
                continue_pretrain(&mut state, &pcfg, &ds.train, stop_after, &mut observer)?;
                sink.flush()?;
                drop(sink);
                save_train_state(&ckpt, &state, &pcfg)?;
            }
            if state.step < state.total_steps {
                out.push((seed, entry.id.clone(), PretrainStatus::Stopped { step: state.step }));
                continue;
            }
            let fp = run.fingerprint.clone();
            run.record(Artifact::new(ArtifactKind::Checkpoint, &ckpt_rel, &fp).seed(seed).encoder(&entry.id))?;
            run.record(Artifact::new(ArtifactKind::Metrics, &metrics_rel, &fp).seed(seed).encoder(&entry.id))?;
            let status = if done_before { PretrainStatus::AlreadyComplete } else { PretrainStatus::Complete };
            out.push((seed, entry.id.clone(), status));
        }
    }
    Ok(out)
}

fn load_checkpoint(run: &Run, seed: u64, id: &str) -> anyhow::Result<Encoder<f32>> {
    let a = run
        .manifest
        .find(ArtifactKind::Checkpoint, seed, id, None)
        .with_context(|| format!("no completed checkpoint for encoder '{id}' (seed {seed}); run `pretrain` first"))?;
    let path = run.dir.join(&a.path);
    if !path.exists() {
        bail!("checkpoint {} is listed in the manifest but missing", path.display());
    }
    Ok(load_encoder::<f32>(&path)?.0)
}

/// Trains one relation net per (encoder, tap) of the ensemble, restricted to
/// `ids` when given.
pub fn cmd_train_relations(run: &mut Run, ids: &[String]) -> anyhow::Result<Vec<PathBuf>> {
    for id in ids {
        run.cfg.encoder_index(id)?;
    }
    let mut written = Vec::new();
    for seed in run.cfg.seeds.clone() {
        let ds = run.cfg.dataset_for(seed)?;
        let rcfg = run.cfg.relation_for(seed);
        for (e, entry) in run.cfg.encoders.clone().iter().enumerate() {
            if !ids.is_empty() && !ids.contains(&entry.id) {
                continue;
            }
            let Some(taps) = run.cfg.taps_for(e)? else {
                continue;
            };
            let encoder = load_checkpoint(run, seed, &entry.id)?;
            let fp = encoder.fingerprint();
            for (tap, (net, losses)) in train_relation_net(&encoder, &ds.train, &taps, &rcfg)? {
                log::info!(
                    "seed {seed} encoder {} tap {tap}: relation loss {:.4} -> {:.4}",
                    entry.id,
                    losses.first().copied().unwrap_or(f64::NAN),
                    losses.last().copied().unwrap_or(f64::NAN)
                );
                let rel = Run::rel(seed, format!("{}.tap{tap}.rel", entry.id));
                save_relation_net(&run.dir.join(&rel), &net, tap, &fp, &losses)?;
                let cfp = run.fingerprint.clone();
                run.record(Artifact::new(ArtifactKind::RelationNet, &rel, &cfp).seed(seed).encoder(&entry.id).tap(tap))?;
                written.push(rel);
            }
        }
    }
    Ok(written)
}

/// A report as written to disk, with what it describes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    pub seed: u64,
    /// Encoder id for single-representation reports; `None` for the ensemble.
    pub encoder: Option<String>,
    pub tap: Option<usize>,
    /// `encoder/tapN` labels of the members.
    pub members: Vec<String>,
    pub report: EvalReport,
}

/// Evaluates every member and the ensemble for each configured shot count.
pub fn cmd_evaluate(run: &mut Run) -> anyhow::Result<Vec<PathBuf>> {
    let spec = run.cfg.ensemble_spec()?;
    let mut written = Vec::new();
    for seed in run.cfg.seeds.clone() {
        let ds = run.cfg.dataset_for(seed)?;
        let eval = run.cfg.eval_for(seed);
        let mut encoders = Vec::new();
        for e in 0..spec.encoder_count() {
            encoders.push(load_checkpoint(run, seed, &run.cfg.encoders[e].id)?);
        }
        let mut nets: Vec<(usize, usize, RelationNet<f32>)> = Vec::new();
        for &(e, tap) in &spec.members {
            let id = &run.cfg.encoders[e].id;
            let a = run
                .manifest
                .find(ArtifactKind::RelationNet, seed, id, Some(tap))
                .with_context(|| format!("no relation net for encoder '{id}' tap {tap} (seed {seed}); run `train-relations` first"))?;
            let (net, meta) = load_relation_net::<f32>(&run.dir.join(&a.path))?;
            if meta.encoder_fingerprint != encoders[e].fingerprint() {
                bail!(
                    "incompatible artifacts: relation net {} was trained on encoder {} but checkpoint '{id}' is {}",
                    a.path.display(),
                    meta.encoder_fingerprint,
                    encoders[e].fingerprint()
                );
            }
            nets.push((e, tap, net));
        }
        let enc_refs: Vec<&Encoder<f32>> = encoders.iter().collect();
        let members: Vec<(usize, usize, &RelationNet<f32>)> = nets.iter().map(|(e, t, n)| (*e, *t, n)).collect();
        let labels: Vec<String> = spec.members.iter().map(|&(e, t)| format!("{}/tap{t}", run.cfg.encoders[e].id)).collect();
        for &shot in &eval.shots {
            let (singles, ensemble) = evaluate_members(&enc_refs, &members, &ds.test, shot, &eval)?;
            let dir = PathBuf::from("reports").join(format!("seed{seed}")).join(format!("{shot}shot"));
            let mut files = Vec::new();
            for (&(e, tap), mut r) in spec.members.iter().zip(singles) {
                let id = run.cfg.encoders[e].id.clone();
                r.label = format!("{id}/tap{tap}");
                let f = ReportFile {
                    schema_version: REPORT_SCHEMA,
                    seed,
                    encoder: Some(id.clone()),
                    tap: Some(tap),
                    members: vec![r.label.clone()],
                    report: r,
                };
                files.push((dir.join(format!("{id}-tap{tap}.json")), f, Some(id), Some(tap)));
            }
            files.push((
                dir.join("ensemble.json"),
                ReportFile {
                    schema_version: REPORT_SCHEMA,
                    seed,
                    encoder: None,
                    tap: None,
                    members: labels.clone(),
                    report: ensemble,
                },
                None,
                None,
            ));
            for (rel, f, id, tap) in files {
                let path = run.dir.join(&rel);
                std::fs::create_dir_all(path.parent().unwrap())?;
                atomic_write(&path, serde_json::to_string_pretty(&f)?.as_bytes())?;
                log::info!("{}: {:.2}% ± {:.2}", f.report.label, f.report.mean_accuracy, f.report.ci95);
                let mut a = Artifact::new(ArtifactKind::Report, &rel, &run.fingerprint).seed(seed).shot(shot);
                a.encoder = id;
                a.tap = tap;
                run.record(a)?;
                written.push(rel);
            }
        }
    }
    Ok(written)
}

/// Collects report files from paths, descending into directories.
pub fn collect_reports(paths: &[PathBuf]) -> anyhow::Result<Vec<(PathBuf, ReportFile)>> {
    fn walk(p: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
            entries.sort();
            for e in entries {
                walk(&e, out)?;
            }
        } else if p.extension().is_some_and(|x| x == "json") {
            out.push(p.to_path_buf());
        }
        Ok(())
    }
    let mut files = Vec::new();
    for p in paths {
        if !p.exists() {
            bail!("{} does not exist", p.display());
        }
        walk(p, &mut files)?;
    }
    let mut out = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f)?;
        let r: ReportFile = serde_json::from_str(&text).with_context(|| format!("{} is not a report file", f.display()))?;
        out.push((f, r));
    }
    if out.is_empty() {
        bail!("no report files found");
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    mlcl::episodes::stable_sum(v) / v.len() as f64
}

/// Builds the per-layer chart (taps × encoders, single members only) and the
/// ensemble chart (best single member vs ensemble) for each shot count.
pub fn build_charts(reports: &[(PathBuf, ReportFile)]) -> anyhow::Result<Vec<(String, Chart)>> {
    let (p0, r0) = &reports[0];
    for (p, r) in reports {
        let same = r.schema_version == r0.schema_version
            && r.report.way == r0.report.way
            && r.report.queries == r0.report.queries
            && r.report.episodes == r0.report.episodes;
        if !same {
            bail!(
                "inconsistent report schemas: {} (v{}, {}-way, {} queries, {} episodes) vs {} (v{}, {}-way, {} queries, {} episodes)",
                p.display(),
                r.schema_version,
                r.report.way,
                r.report.queries,
                r.report.episodes,
                p0.display(),
                r0.schema_version,
                r0.report.way,
                r0.report.queries,
                r0.report.episodes
            );
        }
    }
    let way = r0.report.way;
    let mut shots: Vec<usize> = reports.iter().map(|(_, r)| r.report.shot).collect();
    shots.sort();
    shots.dedup();
    let mut charts = Vec::new();
    for shot in shots {
        let at: Vec<&ReportFile> = reports.iter().map(|(_, r)| r).filter(|r| r.report.shot == shot).collect();
        let title = format!("{way}-way {shot}-shot accuracy per layer");
        let mut cells: BTreeMap<(usize, String), Vec<&EvalReport>> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        for r in at.iter().filter(|r| r.encoder.is_some()) {
            let id = r.encoder.clone().unwrap();
            if !order.contains(&id) {
                order.push(id.clone());
            }
            cells.entry((r.tap.unwrap_or(0), id)).or_default().push(&r.report);
        }
        let mut keys: Vec<&(usize, String)> = cells.keys().collect();
        keys.sort_by_key(|(t, id)| (*t, order.iter().position(|o| o == id)));
        let rows: Vec<Row> = keys
            .into_iter()
            .map(|k| {
                let rs = &cells[k];
                Row {
                    chart: title.clone(),
                    group: format!("tap {}", k.0),
                    series: k.1.clone(),
                    value: mean(&rs.iter().map(|r| r.mean_accuracy).collect::<Vec<_>>()),
                    ci95: mean(&rs.iter().map(|r| r.ci95).collect::<Vec<_>>()),
                    runs: rs.len(),
                }
            })
            .collect();
        if !rows.is_empty() {
            charts.push((format!("layers_{shot}shot"), Chart { title, rows }));
        }
        let ens: Vec<&&ReportFile> = at.iter().filter(|r| r.encoder.is_none()).collect();
        if !ens.is_empty() {
            let title = format!("{way}-way {shot}-shot ensemble vs best single member");
            let mut best = Vec::new();
            for e in &ens {
                let b = at
                    .iter()
                    .filter(|r| r.encoder.is_some() && r.seed == e.seed && e.members.contains(&r.report.label))
                    .max_by(|a, b| a.report.mean_accuracy.total_cmp(&b.report.mean_accuracy));
                if let Some(b) = b {
                    best.push(&b.report);
                }
            }
            let group = ens[0].members.join(" + ");
            let mut rows = Vec::new();
            if !best.is_empty() {
                rows.push(Row {
                    chart: title.clone(),
                    group: group.clone(),
                    series: "best single".into(),
                    value: mean(&best.iter().map(|r| r.mean_accuracy).collect::<Vec<_>>()),
                    ci95: mean(&best.iter().map(|r| r.ci95).collect::<Vec<_>>()),
                    runs: best.len(),
                });
            }
            rows.push(Row {
                chart: title.clone(),
                group,
                series: "ensemble".into(),
                value: mean(&ens.iter().map(|r| r.report.mean_accuracy).collect::<Vec<_>>()),
                ci95: mean(&ens.iter().map(|r| r.report.ci95).collect::<Vec<_>>()),
                runs: ens.len(),
            });
            charts.push((format!("ensemble_{shot}shot"), Chart { title, rows }));
        }
    }
    Ok(charts)
}

/// Writes every chart as CSV + SVG + PNG into `out`.
pub fn cmd_plot(reports: &[PathBuf], out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let collected = collect_reports(reports)?;
    let mut written = Vec::new();
    for (stem, chart) in build_charts(&collected)? {
        written.extend(chart.write(out, &stem)?);
    }
    Ok(written)
}

/// Plots the reports listed in a run's manifest into `<output_dir>/plots`.
pub fn cmd_plot_run(run: &mut Run) -> anyhow::Result<Vec<PathBuf>> {
    let reports: Vec<PathBuf> = run
        .manifest
        .artifacts
        .iter()
        .filter(|a| a.kind == ArtifactKind::Report)
        .map(|a| run.dir.join(&a.path))
        .collect();
    if reports.is_empty() {
        bail!("the manifest lists no reports; run `evaluate` first");
    }
    let out = run.dir.join("plots");
    let written = cmd_plot(&reports, &out)?;
    for p in &written {
        let rel = p.strip_prefix(&run.dir).unwrap_or(p).to_path_buf();
        let fp = run.fingerprint.clone();
        run.record(Artifact::new(ArtifactKind::Plot, rel, &fp))?;
    }
    Ok(written)
}

/// Human-readable tap table of an encoder configuration.
pub fn tap_table(cfg: &EncoderConfig) -> String {
    let mut s = format!("{} ({} taps, input {}×{})\n", cfg.name, cfg.tap_count(), cfg.input_size, cfg.input_size);
    for t in list_taps(cfg) {
        let [c, h, w] = t.shape();
        s.push_str(&format!("  {:>3}  {c}×{h}×{w}\n", t.index));
    }
    s
}
