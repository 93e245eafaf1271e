use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::artifacts::{dataset_files, write_csv_with, write_file, write_json, write_run_manifest};
use super::config::{HeadKind, RankLevel, RunConfig, SynthSection};
use super::CliError;
use crate::evalkit::{
    bootstrap_compare, compute_metrics, make_splits, write_comparisons_csv, write_metrics_csv, BootstrapConfig,
    ClassificationMetrics, ComparisonRow, SplitPlan,
};
use crate::heads::{
    load_checkpoint, predict_bags, predict_rows, save_checkpoint, train_mil, train_mlp, AnyHead, Prediction,
};
use crate::lens::{
    attention_dice, clustering_bootstrap, coverage_curve, tsne, write_projection_csv, AttentionMap, ClusterStats,
    RegionMask,
};
use crate::prune::{apply_signature, concat_encoders, majority_vote, sweep_thetas, PrunedSignature};
use crate::simgauge::similarity_report;
use crate::store::{
    load_manifest, slide_mean_matrix, standardize, subsample_tiles, BagDataset, ColumnStats, Dataset,
    EmbeddingMatrix, Label, SlideBag,
};
use crate::synthgen::{generate, generate_bags, write_bag_dataset, write_slide_dataset};

type Result<T> = std::result::Result<T, CliError>;

pub const CONCAT: &str = "concat";
const VOTE: &str = "vote";

fn if_name(theta: f64) -> String {
    format!("if_{theta}")
}

/// Validated config plus resolved output root and seed.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub seed: u64,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.output_dir()?.to_path_buf();
        let seed = cfg.seed()?;
        Ok(Ctx { cfg, out, seed })
    }

    fn dir(&self, step: &str) -> PathBuf {
        self.out.join(step)
    }

    fn finish(&self, step: &str, inputs: &[PathBuf]) -> Result<()> {
        let config = serde_json::json!({ "step": step, "run": self.cfg.canonical() });
        write_run_manifest(&self.out, &self.dir(step), step, config, inputs)?;
        Ok(())
    }

    fn load(&self) -> Result<(Dataset, Vec<PathBuf>)> {
        let m = self.cfg.manifest()?;
        let files = dataset_files(m)?;
        Ok((load_manifest(m)?, files))
    }

    fn encoders(&self, available: &[String]) -> Result<Vec<String>> {
        match &self.cfg.encoders {
            None => Ok(available.to_vec()),
            Some(list) => {
                if let Some(e) = list.iter().find(|e| !available.contains(e)) {
                    return Err(CliError::config(format!("encoder `{e}` not in dataset (have {})", available.join(", "))));
                }
                let unique: BTreeSet<&String> = list.iter().collect();
                if unique.len() != list.len() {
                    return Err(CliError::config("encoder listed twice"));
                }
                Ok(list.clone())
            }
        }
    }
}

/// One row per slide: per-encoder vectors (tile means for tile datasets).
struct Features {
    ids: Vec<String>,
    patients: Vec<String>,
    labels: Vec<Label>,
    encoders: Vec<(String, EmbeddingMatrix)>,
}

impl Features {
    fn of(ctx: &Ctx, ds: &Dataset) -> Result<Self> {
        match ds {
            Dataset::SlideVectors(sv) => {
                let avail: Vec<String> = sv.encoders.keys().cloned().collect();
                let encs = ctx.encoders(&avail)?;
                Ok(Features {
                    ids: sv.slide_ids().to_vec(),
                    patients: sv.patient_ids.clone(),
                    labels: sv.labels.clone(),
                    encoders: encs.into_iter().map(|e| (e.clone(), sv.encoders[&e].clone())).collect(),
                })
            }
            Dataset::Bags(b) => {
                let encs = ctx.encoders(&b.encoders())?;
                let encoders = encs
                    .into_iter()
                    .map(|e| Ok((e.clone(), slide_mean_matrix(b, &e)?)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Features {
                    ids: b.slides.iter().map(|s| s.slide_id.clone()).collect(),
                    patients: b.slides.iter().map(|s| s.patient_id.clone()).collect(),
                    labels: b.labels(),
                    encoders,
                })
            }
        }
    }

    fn names(&self) -> Vec<String> {
        self.encoders.iter().map(|(n, _)| n.clone()).collect()
    }

    fn concat(&self) -> Result<EmbeddingMatrix> {
        let refs: Vec<&EmbeddingMatrix> = self.encoders.iter().map(|(_, m)| m).collect();
        Ok(concat_encoders(&refs)?)
    }

    fn patient_labels(&self) -> Result<Vec<(String, Label)>> {
        let mut map: BTreeMap<&str, Label> = BTreeMap::new();
        for (p, &l) in self.patients.iter().zip(&self.labels) {
            if map.insert(p, l).is_some_and(|prev| prev != l) {
                return Err(CliError::data(format!("patient {p} has conflicting labels")));
            }
        }
        Ok(map.into_iter().map(|(p, l)| (p.to_string(), l)).collect())
    }

    fn plan(&self, ctx: &Ctx) -> Result<SplitPlan> {
        Ok(make_splits(&self.patient_labels()?, &ctx.cfg.split, ctx.seed)?)
    }

    fn rows(&self, patients: &[String]) -> Vec<usize> {
        SplitPlan::sample_indices(&self.patients, patients)
    }

    /// Slide-level input matrix of a model.
    fn model_matrix(&self, model: &str, sigs: &BTreeMap<String, PrunedSignature>) -> Result<EmbeddingMatrix> {
        if let Some((_, m)) = self.encoders.iter().find(|(n, _)| n == model) {
            return Ok(m.clone());
        }
        if model == CONCAT {
            return self.concat();
        }
        match sigs.get(model) {
            Some(sig) => Ok(apply_signature(&self.concat()?, sig)?),
            None => Err(CliError::config(format!("unknown model `{model}` (no such encoder or fused signature)"))),
        }
    }
}

fn default_models(encoders: &[String], sigs: &BTreeMap<String, PrunedSignature>) -> Vec<String> {
    let mut m = encoders.to_vec();
    if encoders.len() > 1 {
        m.push(CONCAT.into());
        let mut fused: Vec<&PrunedSignature> = sigs.values().collect();
        fused.sort_by(|a, b| a.theta.total_cmp(&b.theta));
        m.extend(fused.iter().map(|s| if_name(s.theta)));
    }
    m
}

fn signatures_path(ctx: &Ctx) -> PathBuf {
    ctx.dir("fuse").join("signatures.json")
}

fn load_signatures(ctx: &Ctx) -> Result<(BTreeMap<String, PrunedSignature>, Vec<PathBuf>)> {
    let p = signatures_path(ctx);
    if !p.exists() {
        return Ok((BTreeMap::new(), Vec::new()));
    }
    let text = std::fs::read_to_string(&p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
    let sigs = serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
    Ok((sigs, vec![p]))
}

/// Tile bags of a model input under the single key `x`.
fn model_bags(
    ds: &BagDataset,
    encoders: &[String],
    model: &str,
    sigs: &BTreeMap<String, PrunedSignature>,
) -> Result<BagDataset> {
    let members: Vec<String> = if encoders.iter().any(|e| e == model) {
        vec![model.to_string()]
    } else if model == CONCAT || sigs.contains_key(model) {
        encoders.to_vec()
    } else {
        return Err(CliError::config(format!("unknown model `{model}`")));
    };
    let sig = sigs.get(model);
    let slides = ds
        .slides
        .iter()
        .map(|s| {
            let m = stack_tiles(s, &members)?;
            let m = match sig {
                Some(sig) => apply_signature(&m, sig)?,
                None => m,
            };
            Ok(SlideBag::new(s.slide_id.clone(), s.patient_id.clone(), s.label, BTreeMap::from([("x".into(), m)]), Some(s.coords.clone()))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BagDataset::new(slides, ds.class_names.clone())?)
}

fn stack_tiles(s: &SlideBag, members: &[String]) -> Result<EmbeddingMatrix> {
    let mats: Vec<&EmbeddingMatrix> = members
        .iter()
        .map(|e| s.tiles.get(e).ok_or_else(|| CliError::data(format!("slide {} lacks encoder {e}", s.slide_id))))
        .collect::<Result<_>>()?;
    if mats.len() == 1 {
        return Ok(mats[0].clone());
    }
    let n = s.n_tiles();
    let d: usize = mats.iter().map(|m| m.dim()).sum();
    let mut values = DMatrix::zeros(n, d);
    let mut prov = Vec::with_capacity(d);
    let mut off = 0;
    for m in &mats {
        values.columns_mut(off, m.dim()).copy_from(m.values());
        prov.extend_from_slice(m.provenance());
        off += m.dim();
    }
    Ok(EmbeddingMatrix::with_provenance(members.join("+"), mats[0].sample_ids().to_vec(), values, prov)?)
}

pub fn cmd_similarity(ctx: &Ctx) -> Result<()> {
    let (ds, inputs) = ctx.load()?;
    let encoders: BTreeMap<String, EmbeddingMatrix> = match &ds {
        Dataset::Bags(b) => {
            let encs = ctx.encoders(&b.encoders())?;
            let n = ctx.cfg.similarity.tiles.min(b.total_tiles());
            let sample = subsample_tiles(b, n, ctx.seed)?;
            sample.encoders.into_iter().filter(|(k, _)| encs.contains(k)).collect()
        }
        Dataset::SlideVectors(_) => Features::of(ctx, &ds)?.encoders.into_iter().collect(),
    };
    let report = similarity_report(&encoders, &ctx.cfg.similarity.metrics)?;
    let dir = ctx.dir("similarity");
    write_file(&dir.join("similarity.csv"), report.to_csv_string().as_bytes())?;
    write_json(&dir.join("similarity.json"), &report)?;
    ctx.finish("similarity", &inputs)
}

#[derive(Serialize)]
struct RankRow<'a> {
    rank: usize,
    index: usize,
    encoder: &'a str,
    original_index: usize,
    p_value: f64,
}

pub fn cmd_fuse(ctx: &Ctx) -> Result<()> {
    let (ds, inputs) = ctx.load()?;
    let f = Features::of(ctx, &ds)?;
    let plan = f.plan(ctx)?;
    let holdout: BTreeSet<&String> = plan.holdout.iter().collect();
    let (x, labels) = match (&ds, ctx.cfg.fuse.rank_level) {
        (Dataset::Bags(b), RankLevel::Tiles) => training_tiles(ctx, b, &f.names(), &holdout)?,
        _ => {
            let rows: Vec<usize> = (0..f.ids.len()).filter(|&i| !holdout.contains(&f.patients[i])).collect();
            (f.concat()?.select_rows(&rows)?, rows.iter().map(|&i| f.labels[i]).collect())
        }
    };
    let sweep = sweep_thetas(&x, &labels, &ctx.cfg.thetas())?;

    let dir = ctx.dir("fuse");
    write_json(&dir.join("split.json"), &plan)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for (rank, &j) in sweep.ranked.order.iter().enumerate() {
        let p = &x.provenance()[j];
        w.serialize(RankRow { rank: rank + 1, index: j, encoder: &p.encoder, original_index: p.column, p_value: sweep.ranked.p_values[j] })
            .map_err(|e| CliError::data(e.to_string()))?;
    }
    write_file(&dir.join("ranking.csv"), &w.into_inner().map_err(|e| CliError::data(e.to_string()))?)?;
    write_csv_with(&dir.join("retention.csv"), |b| sweep.profile.write_csv(b))?;
    let sigs: BTreeMap<String, PrunedSignature> =
        sweep.signatures.iter().map(|s| (if_name(s.theta), s.clone())).collect();
    for (name, s) in &sigs {
        write_json(&dir.join(format!("signature_{name}.json")), s)?;
    }
    write_json(&signatures_path(ctx), &sigs)?;
    ctx.finish("fuse", &inputs)
}

/// Concatenated subsample of non-holdout tiles with their slide labels.
fn training_tiles(
    ctx: &Ctx,
    ds: &BagDataset,
    encoders: &[String],
    holdout: &BTreeSet<&String>,
) -> Result<(EmbeddingMatrix, Vec<Label>)> {
    let slides: Vec<SlideBag> = ds.slides.iter().filter(|s| !holdout.contains(&s.patient_id)).cloned().collect();
    let train = BagDataset::new(slides, ds.class_names.clone())?;
    let n = ctx.cfg.fuse.tiles.min(train.total_tiles());
    let sample = subsample_tiles(&train, n, ctx.seed)?;
    let mats: Vec<&EmbeddingMatrix> = encoders.iter().map(|e| &sample.encoders[e]).collect();
    Ok((concat_encoders(&mats)?, sample.labels))
}

fn write_predictions(path: &Path, f: &Features, rows: &[usize], probs: &[f64]) -> Result<()> {
    let mut text = String::from("sample_id,patient_id,label,prob_high,pred\n");
    for (&i, &p) in rows.iter().zip(probs) {
        text.push_str(&format!("{},{},{},{:?},{}\n", f.ids[i], f.patients[i], f.labels[i], p, u8::from(p >= 0.5)));
    }
    write_file(path, text.as_bytes())
}

pub fn cmd_train(ctx: &Ctx) -> Result<()> {
    let (ds, mut inputs) = ctx.load()?;
    let (sigs, sig_files) = load_signatures(ctx)?;
    inputs.extend(sig_files);
    let f = Features::of(ctx, &ds)?;
    let plan = f.plan(ctx)?;
    let split_file = ctx.dir("fuse").join("split.json");
    if split_file.exists() {
        let text = std::fs::read_to_string(&split_file).map_err(|e| CliError::data(format!("{}: {e}", split_file.display())))?;
        let fused: SplitPlan = serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", split_file.display())))?;
        if fused != plan {
            return Err(CliError::config("split config or seed differs from the one used by `fuse`"));
        }
    }
    let encs = f.names();
    let models = ctx.cfg.train.models.clone().unwrap_or_else(|| default_models(&encs, &sigs));
    let section = &ctx.cfg.train;
    let bags = match (section.head, &ds) {
        (HeadKind::Mil, Dataset::Bags(b)) => Some(b),
        (HeadKind::Mil, Dataset::SlideVectors(_)) => {
            return Err(CliError::config("the MIL head needs a tile-level manifest"));
        }
        (HeadKind::Mlp, _) => None,
    };
    let hold = f.rows(&plan.holdout);
    let dir = ctx.dir("train");

    for model in &models {
        let mdir = dir.join(model);
        std::fs::create_dir_all(&mdir).map_err(|e| CliError::data(format!("{}: {e}", mdir.display())))?;
        let mut prob_sum = vec![0.0; hold.len()];
        let slide_x = if bags.is_none() { Some(f.model_matrix(model, &sigs)?) } else { None };
        let tile_x = match bags {
            Some(b) => Some(model_bags(b, &encs, model, &sigs)?),
            None => None,
        };
        for (k, fold) in plan.folds.iter().enumerate() {
            let tr = f.rows(&fold.train);
            let va = f.rows(&fold.val);
            let mut tcfg = section.config;
            tcfg.seed = ctx.seed.wrapping_add(k as u64);
            let (ckpt, history, preds): (_, _, Vec<Prediction>) = match (&slide_x, &tile_x) {
                (Some(x), _) => {
                    let x = if section.standardize {
                        let stats = ColumnStats::of(x.select_rows(&tr)?.values());
                        standardize(x, Some(&stats))?.0
                    } else {
                        x.clone()
                    };
                    let t = train_mlp(&x, &f.labels, &tr, &va, section.mlp.clone(), &tcfg)?;
                    let p = predict_rows(&t.model, &x, &hold)?;
                    (t.checkpoint(), t.history, p)
                }
                (None, Some(b)) => {
                    let t = train_mil(b, "x", &tr, &va, section.mil, &tcfg)?;
                    let p = predict_bags(&t.model, b, "x", &hold)?;
                    (t.checkpoint(), t.history, p)
                }
                (None, None) => unreachable!("one input form is always built"),
            };
            save_checkpoint(&ckpt, &mdir.join(format!("fold{k}.embh")))?;
            write_csv_with(&mdir.join(format!("history_fold{k}.csv")), |b| crate::heads::write_history_csv(&history, b))?;
            for (s, p) in prob_sum.iter_mut().zip(&preds) {
                *s += p.prob_high;
            }
        }
        let probs: Vec<f64> = prob_sum.iter().map(|s| s / plan.folds.len() as f64).collect();
        write_predictions(&mdir.join("predictions.csv"), &f, &hold, &probs)?;
    }
    write_json(&dir.join("models.json"), &models)?;
    ctx.finish("train", &inputs)
}

#[derive(Debug, Clone, PartialEq)]
struct PredFile {
    ids: Vec<String>,
    labels: Option<Vec<Label>>,
    probs: Option<Vec<f64>>,
    preds: Vec<Label>,
}

fn read_predictions(path: &Path) -> Result<PredFile> {
    let err = |m: String| CliError::data(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let headers = r.headers().map_err(|e| err(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("sample_id").ok_or_else(|| err("missing `sample_id` column".into()))?;
    let pred_col = col("pred").ok_or_else(|| err("missing `pred` column".into()))?;
    let (label_col, prob_col) = (col("label"), col("prob_high"));
    let mut out = PredFile {
        ids: Vec::new(),
        labels: label_col.map(|_| Vec::new()),
        probs: prob_col.map(|_| Vec::new()),
        preds: Vec::new(),
    };
    let label = |s: &str| match s.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(err(format!("label `{other}` is not 0 or 1"))),
    };
    for rec in r.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        out.ids.push(rec[id_col].to_string());
        out.preds.push(label(&rec[pred_col])?);
        if let (Some(c), Some(v)) = (label_col, out.labels.as_mut()) {
            v.push(label(&rec[c])?);
        }
        if let (Some(c), Some(v)) = (prob_col, out.probs.as_mut()) {
            let p: f64 = rec[c].trim().parse().map_err(|_| err(format!("bad probability `{}`", &rec[c])))?;
            if !p.is_finite() {
                return Err(CliError::numeric(format!("{}: non-finite probability", path.display())));
            }
            v.push(p);
        }
    }
    if out.ids.is_empty() {
        return Err(err("no predictions".into()));
    }
    Ok(out)
}

fn vote_files(files: &[PredFile]) -> Result<(Vec<Label>, Vec<f64>, Vec<bool>)> {
    let ids = &files[0].ids;
    if files.iter().any(|f| &f.ids != ids) {
        return Err(CliError::data("prediction files cover different samples or orders"));
    }
    let preds: Vec<Vec<Label>> = files.iter().map(|f| f.preds.clone()).collect();
    let v = majority_vote(&preds)?;
    Ok((v.labels, v.positive_share, v.ties))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Evaluation {
    metrics: BTreeMap<String, ClassificationMetrics>,
    comparisons: Vec<ComparisonRow>,
}

pub fn cmd_evaluate(ctx: &Ctx) -> Result<()> {
    let tdir = ctx.dir("train");
    let models_path = tdir.join("models.json");
    let text = std::fs::read_to_string(&models_path).map_err(|e| CliError::data(format!("{}: {e}", models_path.display())))?;
    let models: Vec<String> = serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", models_path.display())))?;
    let mut inputs = vec![models_path];
    let mut files = BTreeMap::new();
    for m in &models {
        let p = tdir.join(m).join("predictions.csv");
        files.insert(m.clone(), read_predictions(&p)?);
        inputs.push(p);
    }
    let first = files.get(&models[0]).ok_or_else(|| CliError::data("train produced no models"))?;
    let labels = first.labels.clone().ok_or_else(|| CliError::data("predictions lack labels"))?;
    let mut scores: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (m, f) in &files {
        if f.ids != first.ids || f.labels.as_ref() != Some(&labels) {
            return Err(CliError::data(format!("predictions of `{m}` are not aligned with `{}`", models[0])));
        }
        scores.insert(m.clone(), f.probs.clone().ok_or_else(|| CliError::data(format!("`{m}` lacks prob_high")))?);
    }

    let dir = ctx.dir("evaluate");
    let singles: Vec<&String> = models.iter().filter(|m| *m != CONCAT && !m.starts_with("if_")).collect();
    let mut order: Vec<String> = models.clone();
    if singles.len() >= 2 {
        let voters: Vec<PredFile> = singles.iter().map(|m| files[*m].clone()).collect();
        let (vl, share, ties) = vote_files(&voters)?;
        let mut text = String::from("sample_id,label,prob_high,pred,tie\n");
        for i in 0..vl.len() {
            text.push_str(&format!("{},{},{:?},{},{}\n", first.ids[i], labels[i], share[i], vl[i], u8::from(ties[i])));
        }
        write_file(&dir.join("vote_predictions.csv"), text.as_bytes())?;
        scores.insert(VOTE.into(), share);
        order.push(VOTE.into());
    }

    let bcfg = &ctx.cfg.evaluate.bootstrap;
    let mut metrics = BTreeMap::new();
    let mut rows = Vec::new();
    for m in &order {
        let mm = compute_metrics(&scores[m], &labels, bcfg.threshold)?;
        rows.push((m.clone(), mm));
        metrics.insert(m.clone(), mm);
    }
    write_csv_with(&dir.join("metrics.csv"), |b| write_metrics_csv(&rows, b))?;

    let fused: Vec<&String> = order.iter().filter(|m| m.starts_with("if_")).collect();
    let (subjects, baselines): (Vec<&String>, Vec<&String>) = if fused.is_empty() {
        (order.iter().filter(|m| *m == CONCAT).collect(), singles.clone())
    } else {
        let base = order.iter().filter(|m| !m.starts_with("if_")).collect();
        (fused, base)
    };
    let pairs: Vec<(&String, &String)> =
        subjects.iter().flat_map(|a| baselines.iter().map(move |b| (*a, *b))).collect();
    let cfg = BootstrapConfig { n_comparisons: pairs.len().max(1), seed: ctx.seed, ..*bcfg };
    let comparisons = pairs
        .iter()
        .map(|(a, b)| {
            let result = bootstrap_compare(&scores[*a], &scores[*b], &labels, ctx.cfg.evaluate.metric, &cfg)?;
            Ok(ComparisonRow { model_a: (*a).clone(), model_b: (*b).clone(), result })
        })
        .collect::<Result<Vec<_>>>()?;
    write_csv_with(&dir.join("comparisons.csv"), |b| write_comparisons_csv(&comparisons, b))?;
    write_json(&dir.join("evaluation.json"), &Evaluation { metrics, comparisons })?;
    ctx.finish("evaluate", &inputs)
}

pub fn cmd_vote(ctx: &Ctx) -> Result<()> {
    let paths = &ctx.cfg.vote.predictions;
    if paths.len() < 2 {
        return Err(CliError::config("vote needs at least two prediction files"));
    }
    for p in paths {
        if !p.exists() {
            return Err(CliError::data(format!("{}: not found", p.display())));
        }
    }
    let files = paths.iter().map(|p| read_predictions(p)).collect::<Result<Vec<_>>>()?;
    let (vl, share, ties) = vote_files(&files)?;
    let labels = files.iter().find_map(|f| f.labels.clone());
    let mut text = String::from(if labels.is_some() { "sample_id,label,prob_high,pred,tie\n" } else { "sample_id,prob_high,pred,tie\n" });
    for i in 0..vl.len() {
        let label = labels.as_ref().map(|l| format!("{},", l[i])).unwrap_or_default();
        text.push_str(&format!("{},{label}{:?},{},{}\n", files[0].ids[i], share[i], vl[i], u8::from(ties[i])));
    }
    write_file(&ctx.dir("vote").join("predictions.csv"), text.as_bytes())?;
    ctx.finish("vote", paths)
}

fn load_signature(path: &Path) -> Result<PrunedSignature> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn cmd_attention(ctx: &Ctx) -> Result<()> {
    let section = &ctx.cfg.attention;
    if section.models.is_empty() {
        return Err(CliError::config("attention.models is empty"));
    }
    let (ds, mut inputs) = ctx.load()?;
    let Dataset::Bags(bags) = ds else {
        return Err(CliError::config("attention needs a tile-level manifest"));
    };
    let dir = ctx.dir("attention");
    let mut maps: BTreeMap<String, Vec<AttentionMap>> = BTreeMap::new();
    for am in &section.models {
        inputs.push(am.checkpoint.clone());
        let ckpt = load_checkpoint(&am.checkpoint)?;
        let AnyHead::Mil(model) = ckpt.head else {
            return Err(CliError::config(format!("{}: not a MIL checkpoint", am.checkpoint.display())));
        };
        let mut sigs = BTreeMap::new();
        let name = match &am.signature {
            Some(p) => {
                inputs.push(p.clone());
                sigs.insert(am.name.clone(), load_signature(p)?);
                am.name.clone()
            }
            None if am.encoders.len() == 1 => am.encoders[0].clone(),
            None => CONCAT.to_string(),
        };
        let b = model_bags(&bags, &am.encoders, &name, &sigs)?;
        let idx: Vec<usize> = (0..b.slides.len()).collect();
        let preds = predict_bags(&model, &b, "x", &idx)?;
        let mut list = Vec::new();
        for (s, p) in b.slides.iter().zip(preds) {
            let map = AttentionMap::new(s.slide_id.clone(), s.coords.clone(), p.attention.unwrap_or_default())?;
            let mut buf = Vec::new();
            map.write_csv(&mut buf)?;
            write_file(&dir.join(&am.name).join(format!("{}.csv", s.slide_id)), &buf)?;
            list.push(map);
        }
        maps.insert(am.name.clone(), list);
    }

    if let Some(rdir) = &section.regions_dir {
        let mut text = String::from("model,slide_id,percentile,tumor,benign\n");
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:?}"));
        for (name, list) in &maps {
            for map in list {
                let rp = rdir.join(format!("{}.csv", map.slide_id));
                if !rp.exists() {
                    continue;
                }
                let file = std::fs::File::open(&rp).map_err(|e| CliError::data(format!("{}: {e}", rp.display())))?;
                let mask = RegionMask::read_csv(file).map_err(|e| CliError::data(format!("{}: {e}", rp.display())))?;
                inputs.push(rp);
                for c in coverage_curve(map, &mask, &section.percentiles)? {
                    text.push_str(&format!("{name},{},{:?},{},{}\n", map.slide_id, c.percentile, opt(c.tumor), opt(c.benign)));
                }
            }
        }
        write_file(&dir.join("coverage.csv"), text.as_bytes())?;
    }

    let names: Vec<&String> = maps.keys().collect();
    if names.len() >= 2 {
        let mut text = String::from("model_a,model_b,slide_id,percentile,dice,both_empty\n");
        for (i, a) in names.iter().enumerate() {
            for b in &names[i + 1..] {
                for (ma, mb) in maps[*a].iter().zip(&maps[*b]) {
                    for &p in &section.percentiles {
                        let d = attention_dice(ma, mb, p)?;
                        text.push_str(&format!("{a},{b},{},{p:?},{:?},{}\n", ma.slide_id, d.value, d.both_empty));
                    }
                }
            }
        }
        write_file(&dir.join("dice.csv"), text.as_bytes())?;
    }
    ctx.finish("attention", &inputs)
}

pub fn cmd_cluster(ctx: &Ctx) -> Result<()> {
    let (ds, mut inputs) = ctx.load()?;
    let (sigs, sig_files) = load_signatures(ctx)?;
    inputs.extend(sig_files);
    let f = Features::of(ctx, &ds)?;
    let section = &ctx.cfg.cluster;
    let sets = section.feature_sets.clone().unwrap_or_else(|| default_models(&f.names(), &sigs));
    let dir = ctx.dir("cluster");
    let tcfg = crate::lens::TsneConfig { seed: ctx.seed, ..section.tsne };
    let mut xs = BTreeMap::new();
    let mut text = String::from("feature_set,silhouette,compactness_0,compactness_1\n");
    for set in &sets {
        let x = f.model_matrix(set, &sigs)?;
        let p = tsne(x.values(), &tcfg)?;
        let mut buf = Vec::new();
        write_projection_csv(&p, &f.ids, &mut buf)?;
        write_file(&dir.join(format!("tsne_{set}.csv")), &buf)?;
        let s = ClusterStats::of(x.values(), &f.labels)?;
        text.push_str(&format!("{set},{:?},{:?},{:?}\n", s.silhouette, s.compactness[0], s.compactness[1]));
        xs.insert(set.clone(), x.values().clone());
    }
    write_file(&dir.join("stats.csv"), text.as_bytes())?;
    if xs.len() >= 2 {
        let n_pairs = xs.len() * (xs.len() - 1) / 2 * 3;
        let bcfg = BootstrapConfig { seed: ctx.seed, n_comparisons: n_pairs, ..section.bootstrap };
        let boot = clustering_bootstrap(&xs, &f.labels, &bcfg)?;
        write_csv_with(&dir.join("comparisons.csv"), |b| boot.write_csv(b))?;
    }
    ctx.finish("cluster", &inputs)
}

/// Writes the synthetic dataset and returns its manifest path.
pub fn cmd_synth(ctx: &Ctx) -> Result<PathBuf> {
    let section: &SynthSection = ctx.cfg.synth.as_ref().ok_or_else(|| CliError::config("no `synth` section"))?;
    let g = section.generator(ctx.seed)?;
    let dir = ctx.dir("synth");
    let manifest = if g.bag_mode.is_some() {
        write_bag_dataset(&dir, &generate_bags(&g)?)?
    } else {
        write_slide_dataset(&dir, &generate(&g)?)?
    };
    write_json(&dir.join("generator.json"), &g)?;
    ctx.finish("synth", &[])?;
    Ok(manifest)
}

#[derive(Serialize)]
struct Report {
    steps: Vec<String>,
    metrics: Option<serde_json::Value>,
}

/// Runs the configured steps in order, then writes `report.json` and a root
/// run manifest covering every artifact.
pub fn cmd_run(ctx: &Ctx) -> Result<()> {
    let steps = ctx.cfg.steps.clone().unwrap_or_else(|| {
        let mut s = Vec::new();
        if ctx.cfg.synth.is_some() {
            s.push("synth".to_string());
        }
        s.extend(["fuse", "train", "evaluate"].map(String::from));
        s
    });
    let mut ctx = ctx.clone();
    for step in &steps {
        match step.as_str() {
            "synth" => {
                let m = cmd_synth(&ctx)?;
                ctx.cfg.manifest = Some(m);
            }
            "similarity" => cmd_similarity(&ctx)?,
            "fuse" => cmd_fuse(&ctx)?,
            "train" => cmd_train(&ctx)?,
            "evaluate" => cmd_evaluate(&ctx)?,
            "cluster" => cmd_cluster(&ctx)?,
            "attention" => cmd_attention(&ctx)?,
            "vote" => cmd_vote(&ctx)?,
            other => return Err(CliError::config(format!("unknown step `{other}`"))),
        }
    }
    let eval = ctx.dir("evaluate").join("evaluation.json");
    let metrics = if eval.exists() {
        let text = std::fs::read_to_string(&eval).map_err(|e| CliError::data(format!("{}: {e}", eval.display())))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::data(e.to_string()))?;
        Some(v["metrics"].clone())
    } else {
        None
    };
    write_json(&ctx.out.join("report.json"), &Report { steps: steps.clone(), metrics })?;
    let config = serde_json::json!({ "step": "run", "run": ctx.cfg.canonical() });
    write_run_manifest(&ctx.out, &ctx.out, "run", config, &[])?;
    Ok(())
}
