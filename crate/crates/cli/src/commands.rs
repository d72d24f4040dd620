use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::Level;
use serde_json::{json, Value};
use tumorseg::checkpoint::Checkpoint;
use tumorseg::dataset::{
    load_label_map, load_region_masks, load_volume, save_label_map, save_region_masks, save_volume, DatasetManifest,
    ManifestEntry, Split,
};
use tumorseg::infer::{occupancy, EnsembleConfig, LoadedEnsemble};
use tumorseg::metrics::evaluate_cohort;
use tumorseg::postprocess::{enforce_hierarchy, postprocess_case};
use tumorseg::synth::{phantom, PhantomConfig};
use tumorseg::train::{train_from_manifest, TrainRun};
use tumorseg::volume::{labels_to_regions, normalize_intensities, regions_to_labels};
use tumorseg::{MultiModalVolume, RegionMaskSet};

use crate::config::PipelineConfig;
use crate::logging::event;
use crate::report;
use crate::{CaseSelection, Cli, CliError, Command};

type CliResult<T = ()> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult {
    let mut cfg = match &cli.global.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.global.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &cli.global.output {
        cfg.output = o.clone();
    }
    cfg.validate()?;
    let ctx = Ctx { cfg, dry_run: cli.global.dry_run, resume: cli.global.resume };
    match cli.command {
        Command::Train => ctx.train(),
        Command::Predict { checkpoint, select } => {
            let ckpt = checkpoint.unwrap_or_else(|| ctx.cfg.output.join("train").join("best.ckpt"));
            ctx.segment("predict", EnsembleConfig::singletons([ckpt]), &select)
        }
        Command::Ensemble { members, select } => {
            let ens = match members {
                Some(p) => load_members(&p)?,
                None => ctx.cfg.ensemble.clone().ok_or_else(|| {
                    CliError::Schema("no ensemble members: pass --members or set `ensemble` in the config".into())
                })?,
            };
            ens.validate()?;
            ctx.segment("ensemble", ens, &select)
        }
        Command::Postprocess { input, cases } => ctx.postprocess(input, cases),
        Command::Evaluate { pred, split } => ctx.evaluate(pred, split),
        Command::Report { aggregate, masks } => ctx.report(aggregate, masks),
        Command::Synth { count, size, lesions, val } => ctx.synth(count, size, lesions, val),
    }
}

fn load_members(path: &Path) -> CliResult<EnsembleConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Schema(format!("cannot read {}: {e}", path.display())))?;
    let mut ens: EnsembleConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in ens.groups.iter_mut().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(ens)
}

fn parse_split(s: &str) -> CliResult<Split> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| CliError::Schema(format!("unknown split `{s}` (expected train, val or test)")))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Case ids that have a complete set of region masks in `dir`.
fn mask_cases(dir: &Path) -> CliResult<BTreeSet<String>> {
    let mut ids = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let name = entry.map_err(io_err(dir))?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix("_wt.nii.gz") {
            ids.insert(id.to_string());
        }
    }
    Ok(ids)
}

fn write_case(dir: &Path, vol_affine: &tumorseg::volume::Affine, id: &str, masks: &RegionMaskSet, ctx: &Ctx) -> CliResult {
    save_region_masks(dir, id, masks, vol_affine)?;
    let nested = if masks.is_nested() { masks.clone() } else { enforce_hierarchy(masks) };
    let labels = regions_to_labels(&nested, &ctx.cfg.data.mapping, id)?;
    save_label_map(&dir.join(format!("{id}_seg.nii.gz")), &labels, masks.spacing, vol_affine)?;
    Ok(())
}

struct Ctx {
    cfg: PipelineConfig,
    dry_run: bool,
    resume: bool,
}

impl Ctx {
    fn out(&self, stage: &str) -> PathBuf {
        self.cfg.output.join(stage)
    }

    /// Prints the resolved plan; true when the caller should stop there.
    fn plan(&self, command: &str, details: Value) -> bool {
        if self.dry_run {
            let mut cfg = serde_json::to_value(&self.cfg).expect("config serializes");
            cfg["train"] = serde_json::to_value(self.cfg.resolved_train()).expect("config serializes");
            let plan = json!({ "command": command, "dry_run": true, "plan": details, "config": cfg });
            let text = serde_json::to_string_pretty(&plan).expect("plan serializes");
            let _ = writeln!(std::io::stdout().lock(), "{text}");
        }
        self.dry_run
    }

    fn manifest(&self) -> CliResult<DatasetManifest> {
        Ok(DatasetManifest::load(self.cfg.manifest()?)?)
    }

    fn select<'m>(&self, manifest: &'m DatasetManifest, sel: &CaseSelection) -> CliResult<Vec<&'m ManifestEntry>> {
        let split = sel.split.as_deref().map(parse_split).transpose()?;
        let in_split = |e: &&ManifestEntry| split.is_none_or(|s| e.split == s);
        match &sel.cases {
            None => Ok(manifest.entries.iter().filter(in_split).collect()),
            Some(ids) => {
                let unknown: Vec<&str> =
                    ids.iter().filter(|id| manifest.get(id).is_none_or(|e| !in_split(&e))).map(String::as_str).collect();
                if !unknown.is_empty() {
                    return Err(CliError::CaseMismatch(format!("not in manifest: {}", unknown.join(", "))));
                }
                Ok(ids.iter().map(|id| manifest.get(id).expect("checked above")).collect())
            }
        }
    }

    fn train(&self) -> CliResult {
        let out = self.out("train");
        let tcfg = self.cfg.resolved_train();
        let spec = tcfg.architecture()?;
        let details = json!({
            "manifest": self.cfg.manifest()?,
            "variant": tcfg.variant_name,
            "parameters": tumorseg::Model::build(&spec, 0)?.parameter_count(),
            "resume": self.resume,
            "outputs": [out.join("best.ckpt"), out.join("last.ckpt"), out.join("train_log.jsonl")],
        });
        if self.plan("train", details) {
            return Ok(());
        }
        let resume = if self.resume {
            let last = out.join("last.ckpt");
            if !last.exists() {
                return Err(CliError::MissingCheckpoint(last));
            }
            Some(Checkpoint::load(&last)?)
        } else {
            None
        };
        let manifest = self.manifest()?;
        event(Level::Info, "train_start", json!({ "variant": tcfg.variant_name, "output": out, "resume": self.resume }));
        let outcome = train_from_manifest(&tcfg, &manifest, &self.cfg.data.mapping, TrainRun { output_dir: Some(out.clone()), resume })?;
        fs::write(out.join("config.json"), serde_json::to_string_pretty(&tcfg).expect("config serializes") + "\n")
            .map_err(io_err(&out))?;
        let last = outcome.history.last();
        event(
            Level::Info,
            "train_done",
            json!({
                "steps": outcome.last.model.trained_steps,
                "final_loss": last.map(|r| r.loss),
                "best_val_dice": outcome.best.progress.as_ref().and_then(|p| p.best_val_dice),
            }),
        );
        Ok(())
    }

    fn segment(&self, stage: &str, ens: EnsembleConfig, sel: &CaseSelection) -> CliResult {
        let out = self.out(stage);
        let details = json!({ "members": ens.groups, "cases": sel.cases, "split": sel.split, "output": out });
        if self.plan(stage, details) {
            return Ok(());
        }
        for p in ens.groups.iter().flatten() {
            if !p.is_file() {
                return Err(CliError::MissingCheckpoint(p.clone()));
            }
        }
        let manifest = self.manifest()?;
        let cases = self.select(&manifest, sel)?;
        if cases.is_empty() {
            event(Level::Info, "no_cases", json!({ "stage": stage }));
            return Ok(());
        }
        let models = LoadedEnsemble::load(&ens)?;
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        for entry in cases {
            let raw = load_volume(entry.modality_paths(), &entry.case_id)?;
            let vol = normalize_intensities(&raw);
            let masks = models.predict(&vol, &self.cfg.inference)?;
            write_case(&out, &vol.affine, &entry.case_id, &masks, self)?;
            event(Level::Info, "predicted", json!({ "stage": stage, "case_id": entry.case_id, "wt_fraction": occupancy(&masks.wt) }));
        }
        Ok(())
    }

    fn postprocess(&self, input: Option<PathBuf>, cases: Option<Vec<String>>) -> CliResult {
        let input = input.unwrap_or_else(|| self.out("ensemble"));
        let out = self.out("postprocess");
        if self.plan("postprocess", json!({ "input": input, "cases": cases, "output": out })) {
            return Ok(());
        }
        let available = mask_cases(&input)?;
        let ids: Vec<String> = match cases {
            Some(ids) => {
                let missing: Vec<&str> = ids.iter().filter(|i| !available.contains(*i)).map(String::as_str).collect();
                if !missing.is_empty() {
                    return Err(CliError::CaseMismatch(format!("no masks in {} for: {}", input.display(), missing.join(", "))));
                }
                ids
            }
            None => available.into_iter().collect(),
        };
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        for id in ids {
            let (raw, affine) = load_region_masks(&input, &id)?;
            let clean = postprocess_case(&raw, &self.cfg.postprocess)?;
            write_case(&out, &affine, &id, &clean, self)?;
            event(Level::Info, "postprocessed", json!({ "case_id": id, "wt_fraction": occupancy(&clean.wt) }));
        }
        Ok(())
    }

    fn evaluate(&self, pred: Option<PathBuf>, split: Option<String>) -> CliResult {
        let pred = pred.unwrap_or_else(|| self.out("postprocess"));
        let out = self.out("evaluation");
        let outputs = [out.join("cases.csv"), out.join("aggregate.json")];
        if self.plan("evaluate", json!({ "pred": pred, "split": split, "outputs": outputs })) {
            return Ok(());
        }
        let manifest = self.manifest()?;
        let split = split.as_deref().map(parse_split).transpose()?;
        let gt: Vec<&ManifestEntry> =
            manifest.entries.iter().filter(|e| e.label.is_some() && split.is_none_or(|s| e.split == s)).collect();
        let gt_ids: BTreeSet<String> = gt.iter().map(|e| e.case_id.clone()).collect();
        let pred_ids = mask_cases(&pred)?;
        if gt_ids != pred_ids {
            let only_gt: Vec<_> = gt_ids.difference(&pred_ids).cloned().collect();
            let only_pred: Vec<_> = pred_ids.difference(&gt_ids).cloned().collect();
            return Err(CliError::CaseMismatch(format!(
                "missing predictions for [{}]; no ground truth for [{}]",
                only_gt.join(", "),
                only_pred.join(", ")
            )));
        }
        let mut triples = Vec::with_capacity(gt.len());
        for e in gt {
            let (p, _) = load_region_masks(&pred, &e.case_id)?;
            let label_path = e.label.as_ref().expect("filtered to labeled cases");
            let (_, header) = tumorseg::nifti::read_labels(label_path)?;
            let lm = load_label_map(label_path, self.cfg.data.mapping.vocabulary(), &e.case_id)?;
            let g = labels_to_regions(&lm, &self.cfg.data.mapping, header.spacing)?;
            triples.push((e.case_id.clone(), p, g));
        }
        triples.sort_by(|a, b| a.0.cmp(&b.0));
        let report = evaluate_cohort(&triples, &self.cfg.metrics)?;
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        fs::write(&outputs[0], report.to_csv()).map_err(io_err(&outputs[0]))?;
        let agg = serde_json::to_string_pretty(&report.aggregate_json()).expect("report serializes") + "\n";
        fs::write(&outputs[1], agg).map_err(io_err(&outputs[1]))?;
        event(Level::Info, "evaluated", json!({ "cases": report.cases.len(), "aggregate": report.aggregate_json()["regions"] }));
        Ok(())
    }

    fn report(&self, aggregate: Option<PathBuf>, masks: Option<PathBuf>) -> CliResult {
        let aggregate = aggregate.unwrap_or_else(|| self.out("evaluation").join("aggregate.json"));
        let masks = masks.unwrap_or_else(|| self.out("postprocess"));
        let out = self.out("report");
        if self.plan("report", json!({ "aggregate": aggregate, "masks": masks, "output": out })) {
            return Ok(());
        }
        let text = fs::read_to_string(&aggregate).map_err(io_err(&aggregate))?;
        let agg: Value = serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", aggregate.display())))?;
        let mut md = report::markdown_table(&agg)?;
        fs::create_dir_all(&out).map_err(io_err(&out))?;

        let cases: Vec<String> = if masks.is_dir() { mask_cases(&masks)?.into_iter().collect() } else { Vec::new() };
        let manifest = match (&self.cfg.data.manifest, cases.is_empty()) {
            (Some(_), false) => Some(self.manifest()?),
            (None, false) => {
                event(Level::Warn, "overlays_skipped", json!({ "reason": "data.manifest not set" }));
                None
            }
            _ => None,
        };
        if let Some(manifest) = manifest {
            md.push_str("\n## Slice overlays\n\nFLAIR with WT (green), TC (yellow) and ET (red).\n");
            for id in cases {
                let Some(entry) = manifest.get(&id) else {
                    event(Level::Warn, "overlay_skipped", json!({ "case_id": id, "reason": "not in manifest" }));
                    continue;
                };
                let vol: MultiModalVolume = load_volume(entry.modality_paths(), &id)?;
                let (m, _) = load_region_masks(&masks, &id)?;
                let names = report::write_overlays(&out, &vol, &m)?;
                md.push_str(&format!("\n### {id}\n\n"));
                for (name, (plane, _)) in names.iter().zip(report::PLANES) {
                    md.push_str(&format!("![{id} {plane}]({name})\n"));
                }
            }
        }
        let path = out.join("report.md");
        fs::write(&path, md).map_err(io_err(&path))?;
        event(Level::Info, "reported", json!({ "output": path }));
        Ok(())
    }

    fn synth(&self, count: usize, size: usize, lesions: usize, val: usize) -> CliResult {
        let out = self.cfg.output.clone();
        if size < 8 || count == 0 || val > count {
            return Err(CliError::Schema(format!("synth: need size >= 8, count >= 1 and val <= count (got {size}, {count}, {val})")));
        }
        if self.plan("synth", json!({ "count": count, "size": size, "lesions": lesions, "val": val, "output": out })) {
            return Ok(());
        }
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        let seed = self.cfg.seed.unwrap_or(0);
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let id = format!("phantom_{i:03}");
            let pc = PhantomConfig { shape: [size; 3], lesions, seed: seed.wrapping_add(i as u64), ..Default::default() };
            let (vol, labels) = phantom(&pc, &id)?;
            save_volume(&out, &vol)?;
            let seg = format!("{id}_seg.nii.gz");
            save_label_map(&out.join(&seg), &labels, vol.spacing, &vol.affine)?;
            let rel = |m: &str| PathBuf::from(format!("{id}_{m}.nii.gz"));
            entries.push(ManifestEntry {
                case_id: id.clone(),
                t1: rel("t1"),
                t1gd: rel("t1gd"),
                t2: rel("t2"),
                flair: rel("flair"),
                label: Some(PathBuf::from(seg)),
                split: if i >= count - val { Split::Val } else { Split::Train },
            });
        }
        DatasetManifest::new(entries)?.save(&out.join("manifest.json"))?;
        event(Level::Info, "synthesized", json!({ "cases": count, "output": out }));
        Ok(())
    }
}
