use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use insta_core::align::{sample_pairs, train_head, AuxiliaryPair, PairTexts, ProjectionHead};
use insta_core::corpus::{corpus_stats, load_manifest_with, validate_heldout, LoadOptions, MetaDataset, TaskId};
use insta_core::embed::Embedder;
use insta_core::mixture::build_mixture;
use insta_core::refine::{refine_corpus, RefinementConfig};
use insta_core::select::{
    random_select, rank_correlation, score_matrix, select_top_k, Aggregation, CostComparison, DstaRun, Method,
    ScoreMatrix, SelectionResult, TransferMatrix, DEFAULT_SAMPLES_PER_INSTRUCTION,
};
use insta_core::synth::{self, Shape};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::backend::{build_embedder, BackendSpec};
use crate::config::{PipelineConfig, Preset};
use crate::meta::{self, Recorder};
use crate::{
    AlignArgs, Cli, Command, CompareArgs, IngestArgs, MixtureArgs, RefineArgs, ReportArgs, SelectArgs, SelectionOpts,
    SweepArgs, SynthArgs, VerifyArgs,
};

/// Bad invocation or configuration; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<insta_core::Error>() {
        Some(insta_core::Error::Config(_)) => 2,
        _ => 1,
    }
}

pub fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path).map_err(|e| usage(format!("{e:#}")))?,
        None => PipelineConfig::default(),
    };
    let ctx = Ctx { cfg, cli };
    match &cli.command {
        Command::Ingest(a) => ctx.ingest(a),
        Command::Refine(a) => ctx.refine(a),
        Command::Align(a) => ctx.align(a),
        Command::Select(a) => ctx.select(a),
        Command::Mixture(a) => ctx.mixture(a),
        Command::Compare(a) => ctx.compare(a),
        Command::Report(a) => ctx.report(a),
        Command::SweepK(a) => ctx.sweep(a),
        Command::Verify(a) => return verify(a),
        Command::Synth(a) => ctx.synth(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

struct Ctx<'a> {
    cfg: PipelineConfig,
    cli: &'a Cli,
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (std::path::absolute(a), std::path::absolute(b)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

/// Hex digest of a selected set, independent of rank order.
pub fn set_hash(tasks: &[TaskId]) -> String {
    let mut ids: Vec<&str> = tasks.iter().map(TaskId::as_str).collect();
    ids.sort_unstable();
    format!("{:x}", Sha256::digest(ids.join("\n").as_bytes()))
}

/// Where selection scores come from; reused across k.
enum Ranking {
    Matrix {
        sm: ScoreMatrix,
        method: Method,
        aggregation: Aggregation,
    },
    Random {
        seed: u64,
    },
}

struct SelectionPlan {
    target: TaskId,
    method: Method,
    settings: serde_json::Value,
    seed: Option<u64>,
}

impl Ctx<'_> {
    fn manifest(&self, flag: &Option<PathBuf>) -> Result<PathBuf> {
        flag.clone()
            .or_else(|| self.cfg.corpus.manifest.clone())
            .ok_or_else(|| usage("no corpus manifest: pass --manifest or set corpus.manifest"))
    }

    fn load(&self, path: &Path, lenient: bool, rec: &mut Recorder) -> Result<MetaDataset> {
        rec.input(path)?;
        let ds = load_manifest_with(
            path,
            LoadOptions {
                enforce_split: !lenient,
                ..LoadOptions::default()
            },
        )?;
        for task in &ds.tasks {
            if let Some(file) = task.instances_file().filter(|f| f.exists()) {
                rec.input(file)?;
            }
        }
        log::info!("loaded {} tasks from {}", ds.tasks.len(), path.display());
        Ok(ds)
    }

    fn backend_spec(&self, flag: &Option<String>) -> Result<BackendSpec> {
        let spec = flag.clone().or_else(|| self.cfg.backend.spec.clone()).unwrap_or_else(|| "ref".into());
        spec.parse().map_err(|e: anyhow::Error| usage(format!("--backend: {e}")))
    }

    fn embedder(&self, spec: &BackendSpec) -> Result<Embedder> {
        build_embedder(spec, &self.cfg.backend, !self.cli.no_cache)
    }

    fn ingest(&self, a: &IngestArgs) -> Result<()> {
        let mut rec = Recorder::default();
        let path = self.manifest(&a.manifest)?;
        let lenient = a.lenient || self.cfg.corpus.lenient.unwrap_or(false);
        let ds = self.load(&path, lenient, &mut rec)?;
        let mut violations = BTreeMap::new();
        for task in ds.eval_tasks() {
            let leaks = validate_heldout(&ds, &task.id)?;
            if !leaks.is_empty() {
                log::warn!("{} shares its cluster with {} training tasks", task.id, leaks.len());
                violations.insert(task.id.clone(), leaks);
            }
        }
        let report = json!({
            "corpus": ds.name,
            "stats": corpus_stats(&ds),
            "heldout_violations": violations,
        });
        write_json(&a.out, &report)?;
        rec.finish(
            &meta::meta_path(&a.out),
            "ingest",
            None,
            json!({ "lenient": lenient }),
            std::slice::from_ref(&a.out),
        )
    }

    fn refine(&self, a: &RefineArgs) -> Result<()> {
        let mut rec = Recorder::default();
        let path = self.manifest(&a.manifest)?;
        if same_file(&path, &a.out) {
            return Err(usage("--out must differ from the input manifest"));
        }
        let mut ds = self.load(&path, self.cfg.corpus.lenient.unwrap_or(false), &mut rec)?;
        let settings = self.cfg.refine.clone().unwrap_or_default();
        let rc = if a.disable || !settings.enabled {
            RefinementConfig::disabled()
        } else {
            self.cfg.refinement()?
        };
        let report = refine_corpus(&mut ds, &rc)?;
        log::info!(
            "refined {} instructions: {} candidate and {} text slots",
            report.instructions.len(),
            report.candidate_slots,
            report.text_slots
        );

        // Instance paths are relative to the manifest; keep them readable
        // when the refined manifest lands elsewhere.
        let src_dir = std::path::absolute(&path)?.parent().map(Path::to_path_buf);
        let dst_dir = std::path::absolute(&a.out)?.parent().map(Path::to_path_buf);
        if src_dir != dst_dir {
            for task in &mut ds.tasks {
                if let Some(file) = task.instances_file() {
                    task.instances_path = Some(std::path::absolute(file)?.display().to_string());
                }
            }
        }
        write_file(&a.out, ds.to_manifest_string())?;
        let mut outputs = vec![a.out.clone()];
        if let Some(rp) = &a.report {
            write_json(rp, &report)?;
            outputs.push(rp.clone());
        }
        rec.finish(
            &meta::meta_path(&a.out),
            "refine",
            None,
            json!({
                "enabled": rc.enabled,
                "candidate_patterns": if rc.enabled { settings.candidate_patterns } else { Vec::new() },
            }),
            &outputs,
        )
    }

    fn align(&self, a: &AlignArgs) -> Result<()> {
        let mut rec = Recorder::default();
        let path = self.manifest(&a.manifest)?;
        let ds = self.load(&path, false, &mut rec)?;
        let mut tc = self.cfg.train_config(a.preset)?;
        if let Some(v) = a.lr {
            tc.learning_rate = v;
        }
        if let Some(v) = a.epochs {
            tc.epochs = v;
        }
        if let Some(v) = a.seed {
            tc.seed = v;
        }
        if let Some(v) = &a.aux {
            tc.auxiliary_pairs_path = Some(v.clone());
        }
        tc.validate()?;
        if let Some(aux) = &tc.auxiliary_pairs_path {
            rec.input(aux)?;
        }
        let spec = self.backend_spec(&a.backend)?;
        let embedder = self.embedder(&spec)?;
        let (head, report) = train_head(&ds, &embedder, &tc)?;
        log::info!(
            "best epoch {} with validation loss {:.6}",
            report.best_epoch,
            report.best_val_loss
        );
        create_parent(&a.out)?;
        head.save(&a.out)?;
        let mut outputs = vec![a.out.clone()];
        if let Some(rp) = &a.report {
            write_json(rp, &report)?;
            outputs.push(rp.clone());
        }
        if let Some(ep) = &a.export_pairs {
            let texts = PairTexts::from_corpus(&ds, tc.use_refined);
            let mut out = String::new();
            for p in sample_pairs(&ds, tc.n_pos, tc.n_neg, tc.seed)? {
                let origin = serde_json::to_value(p.origin)?;
                let row = AuxiliaryPair {
                    text_a: texts.get(&p.a).unwrap_or_default().to_owned(),
                    text_b: texts.get(&p.b).unwrap_or_default().to_owned(),
                    label: p.y,
                    source: origin.as_str().unwrap_or("corpus").to_owned(),
                };
                out.push_str(&serde_json::to_string(&row)?);
                out.push('\n');
            }
            write_file(ep, out)?;
            outputs.push(ep.clone());
        }
        let preset = a.preset.or(self.cfg.train.preset).unwrap_or(Preset::P3);
        rec.finish(
            &meta::meta_path(&a.out),
            "align",
            Some(tc.seed),
            json!({
                "preset": preset,
                "train": tc,
                "backend": spec,
                "head_fingerprint": head.fingerprint(),
            }),
            &outputs,
        )
    }

    fn plan(&self, o: &SelectionOpts, rec: &mut Recorder) -> Result<(MetaDataset, SelectionPlan, Ranking)> {
        let s = &self.cfg.select;
        let path = self.manifest(&o.manifest)?;
        let target = o
            .target
            .clone()
            .or_else(|| s.target.clone())
            .ok_or_else(|| usage("no target: pass --target or set select.target"))?;
        let target = TaskId::from(target.as_str());
        let method = o.method.or(s.method).unwrap_or(Method::Insta);
        let aggregation = o.aggregation.or(s.aggregation).unwrap_or_default();
        let use_refined = o.use_refined.or(s.use_refined).unwrap_or(true);
        let seed = o.seed.or(s.seed).unwrap_or(0);
        let n = o.n.or(s.samples).unwrap_or(DEFAULT_SAMPLES_PER_INSTRUCTION);
        let head_path = o.head.clone().or_else(|| s.head.clone());
        if method == Method::InstaAligned && head_path.is_none() {
            return Err(usage("insta_aligned needs --head"));
        }
        if method != Method::InstaAligned && head_path.is_some() {
            log::warn!("--head is ignored by {method}");
        }
        let ds = self.load(&path, false, rec)?;
        ds.task(&target)?;

        let mut settings = json!({
            "target": target,
            "method": method,
            "use_refined": use_refined,
        });
        let ranking = if method == Method::Random {
            settings["seed"] = json!(seed);
            Ranking::Random { seed }
        } else {
            let spec = self.backend_spec(&o.backend)?;
            let embedder = self.embedder(&spec)?;
            settings["backend"] = serde_json::to_value(&spec)?;
            settings["aggregation"] = serde_json::to_value(aggregation)?;
            let sm = match method {
                Method::Dsta => {
                    settings["samples"] = json!(n);
                    settings["seed"] = json!(seed);
                    let run = DstaRun {
                        ds: &ds,
                        embedder: &embedder,
                        n,
                        seed,
                    };
                    run.select_many(std::slice::from_ref(&target), 1)?.remove(0).1
                }
                Method::InstaAligned => {
                    let hp = head_path.expect("checked above");
                    rec.input(&hp)?;
                    let head = ProjectionHead::load(&hp)?;
                    settings["head_fingerprint"] = json!(head.fingerprint());
                    score_matrix(&target, &ds, &embedder, Some(&head), use_refined)?
                }
                _ => score_matrix(&target, &ds, &embedder, None, use_refined)?,
            };
            log::info!("encoded {} texts", embedder.encode_count());
            Ranking::Matrix {
                sm,
                method,
                aggregation,
            }
        };
        let seed = matches!(method, Method::Random | Method::Dsta).then_some(seed);
        Ok((
            ds,
            SelectionPlan {
                target,
                method,
                settings,
                seed,
            },
            ranking,
        ))
    }

    fn select(&self, a: &SelectArgs) -> Result<()> {
        let k = a
            .k
            .or(self.cfg.select.k)
            .ok_or_else(|| usage("no k: pass --k or set select.k"))?;
        if k == 0 {
            return Err(usage("--k must be at least 1"));
        }
        let mut rec = Recorder::default();
        let (ds, mut plan, ranking) = self.plan(&a.opts, &mut rec)?;
        let sel = ranking.select(&ds, &plan.target, k)?;
        log::info!("selected {} tasks for {} with {}", sel.ranked.len(), plan.target, plan.method);
        write_file(&a.out, sel.to_json())?;
        plan.settings["k"] = json!(k);
        rec.finish(&meta::meta_path(&a.out), "select", plan.seed, plan.settings, std::slice::from_ref(&a.out))
    }

    fn sweep(&self, a: &SweepArgs) -> Result<()> {
        if a.kmin == 0 || a.kmax < a.kmin {
            return Err(usage(format!("bad k range {}..={}", a.kmin, a.kmax)));
        }
        let mut rec = Recorder::default();
        let (ds, mut plan, ranking) = self.plan(&a.opts, &mut rec)?;
        std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
        let mut csv = String::from("k,selected,set_hash\n");
        let mut outputs = Vec::new();
        for k in a.kmin..=a.kmax {
            let sel = ranking.select(&ds, &plan.target, k)?;
            let path = a.out_dir.join(format!("sel_k{k}.json"));
            write_file(&path, sel.to_json())?;
            outputs.push(path);
            csv.push_str(&format!("{k},{},{}\n", sel.ranked.len(), set_hash(&sel.task_ids())));
        }
        let csv_path = a.out_dir.join("sweep.csv");
        write_file(&csv_path, csv)?;
        outputs.push(csv_path.clone());
        plan.settings["kmin"] = json!(a.kmin);
        plan.settings["kmax"] = json!(a.kmax);
        rec.finish(&meta::meta_path(&csv_path), "sweep-k", plan.seed, plan.settings, &outputs)
    }

    fn mixture(&self, a: &MixtureArgs) -> Result<()> {
        let m = &self.cfg.mixture;
        let cap = a
            .cap
            .or(m.cap)
            .ok_or_else(|| usage("no cap: pass --cap or set mixture.cap"))?;
        let seed = a.seed.or(m.seed).unwrap_or(0);
        let rendering = a.render.or(m.render).unwrap_or_default();
        let mut rec = Recorder::default();
        rec.input(&a.selection)?;
        let text = std::fs::read_to_string(&a.selection)
            .with_context(|| format!("reading {}", a.selection.display()))?;
        let sel: SelectionResult =
            serde_json::from_str(&text).with_context(|| format!("parsing selection {}", a.selection.display()))?;
        let path = self.manifest(&a.manifest)?;
        let ds = self.load(&path, false, &mut rec)?;
        let mix = build_mixture(&sel, &ds, cap, seed, rendering)?;
        log::info!("mixture of {} instances from {} tasks", mix.total_instances, mix.entries.len());
        create_parent(&a.out)?;
        let file = File::create(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
        let mut w = BufWriter::new(file);
        mix.write_jsonl(&mut w)?;
        w.flush()?;
        rec.finish(
            &meta::meta_path(&a.out),
            "mixture",
            Some(seed),
            json!({ "cap_per_task": cap, "rendering": rendering, "target": sel.target, "method": sel.method }),
            std::slice::from_ref(&a.out),
        )
    }

    fn compare(&self, a: &CompareArgs) -> Result<()> {
        let mut rec = Recorder::default();
        rec.input(&a.transfer)?;
        let tm = TransferMatrix::from_csv_path(&a.transfer)?;
        let mut sels = Vec::new();
        for p in &a.selections {
            rec.input(p)?;
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let sel: SelectionResult =
                serde_json::from_str(&text).with_context(|| format!("parsing selection {}", p.display()))?;
            sels.push((p, sel));
        }
        let rows: Vec<serde_json::Value> = sels
            .iter()
            .map(|(p, sel)| {
                let mut row = json!({
                    "path": p,
                    "target": sel.target,
                    "method": sel.method,
                    "k": sel.k,
                });
                match rank_correlation(&sel.scores(), &tm, &sel.target) {
                    Ok(rho) => row["spearman"] = json!(rho),
                    Err(e) => row["error"] = json!(e.to_string()),
                }
                row
            })
            .collect();
        let mut overlap = Vec::new();
        for i in 0..sels.len() {
            for j in i + 1..sels.len() {
                let a_set: std::collections::BTreeSet<_> = sels[i].1.task_ids().into_iter().collect();
                let b_set: std::collections::BTreeSet<_> = sels[j].1.task_ids().into_iter().collect();
                let union = a_set.union(&b_set).count();
                let inter = a_set.intersection(&b_set).count();
                overlap.push(json!({
                    "a": sels[i].0,
                    "b": sels[j].0,
                    "shared": inter,
                    "jaccard": if union == 0 { 1.0 } else { inter as f64 / union as f64 },
                }));
            }
        }
        write_json(&a.out, &json!({ "selections": rows, "overlap": overlap }))?;
        rec.finish(&meta::meta_path(&a.out), "compare", None, json!({}), std::slice::from_ref(&a.out))
    }

    fn report(&self, a: &ReportArgs) -> Result<()> {
        if !a.cost {
            return Err(usage("report needs a kind; pass --cost"));
        }
        let cmp = CostComparison::new(a.t_t, a.t_e, a.k, a.n)?;
        let text = serde_json::to_string_pretty(&cmp)? + "\n";
        match &a.out {
            Some(out) => {
                write_file(out, &text)?;
                Recorder::default().finish(
                    &meta::meta_path(out),
                    "report",
                    None,
                    json!({ "Tt": a.t_t, "Te": a.t_e, "k": a.k, "n": a.n }),
                    std::slice::from_ref(out),
                )?;
            }
            None => std::io::stdout().write_all(text.as_bytes())?,
        }
        Ok(())
    }

    fn synth(&self, a: &SynthArgs) -> Result<()> {
        if a.instances == 0 {
            return Err(usage("--instances must be positive"));
        }
        let shape = match a.shape {
            Preset::P3 => Shape::p3(a.instances),
            Preset::Niv2 => Shape::niv2(a.instances),
        };
        std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
        let ds = synth::generate(&shape, &a.out_dir)?;
        log::info!("wrote {} tasks to {}", ds.tasks.len(), a.out_dir.display());
        let manifest = a.out_dir.join(synth::MANIFEST_FILE);
        Recorder::default().finish(
            &meta::meta_path(&manifest),
            "synth",
            Some(shape.seed),
            json!({ "shape": a.shape, "instances_per_task": a.instances }),
            &[manifest.clone(), a.out_dir.join(synth::INSTANCES_FILE)],
        )
    }
}

impl Ranking {
    fn select(&self, ds: &MetaDataset, target: &TaskId, k: usize) -> Result<SelectionResult> {
        Ok(match self {
            Ranking::Matrix {
                sm,
                method,
                aggregation,
            } => select_top_k(sm, ds, k, *aggregation, *method)?,
            Ranking::Random { seed } => random_select(ds, target, k, *seed)?,
        })
    }
}

fn verify(a: &VerifyArgs) -> Result<ExitCode> {
    if !a.run_dir.is_dir() {
        return Err(usage(format!("{} is not a directory", a.run_dir.display())));
    }
    let report = meta::verify(&a.run_dir)?;
    for m in &report.mismatches {
        log::warn!("{:?}: {}", m.kind, m.path.display());
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
