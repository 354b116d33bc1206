//! Command implementations. Every command is a pure function of
//! (config, seed) over the filesystem: reruns produce identical artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use curelora::eval::{
    build_trajectory_probe, final_score, gating_stats, knowledge_preservation, safety_recovery,
    toy_asr, toy_kr, ProbeVariant,
};
use curelora::io::{load_bundle, save_bundle, TensorContainer};
use curelora::lora::AdapterBundle;
use curelora::pipeline::{
    build_pairs, cure_adapter, ensemble_from_container, ensemble_to_container, load_ensemble,
    train_ensemble_jobs, train_moe_router, CureOptions, CureReport, Curer, TranslatorEnsemble,
};
use curelora::rng::{fnv1a64, Prng};
use curelora::router::RouterParams;
use curelora::tensor::max_abs;
use curelora::toyforge::{
    forge_pairs, generate_corpora, sample_analytic_pairs, MapKind, ToyBaseModel, ToyCorpus,
};
use curelora::translator::{init_translator, translate, Family};
use curelora::{Error, Result};

use crate::config::RunConfig;

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub base_model_id: String,
    pub corpora_files: BTreeMap<String, String>,
    pub pairs: Vec<PairEntry>,
    pub analytic_files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairEntry {
    pub domain: String,
    pub index: usize,
    /// "train" or "held_out".
    pub split: String,
    pub unsafe_path: String,
    pub safe_path: String,
    pub unsafe_hash: String,
    pub safe_hash: String,
}

impl Manifest {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let path = cfg.manifest_path();
        let text =
            std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn mkdirs(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

fn corpus_text(corpus: &ToyCorpus) -> String {
    let mut out = String::new();
    for s in &corpus.sequences {
        let prompt: Vec<String> = s.tokens[..s.prompt_len].iter().map(|t| t.to_string()).collect();
        let resp: Vec<String> = s.tokens[s.prompt_len..].iter().map(|t| t.to_string()).collect();
        let _ = writeln!(out, "{} | {}", prompt.join(" "), resp.join(" "));
    }
    out
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    mkdirs(&cfg.out_dir)?;
    let staging = cfg.out_dir.join(".staging-gen");
    if staging.exists() {
        std::fs::remove_dir_all(&staging)
            .map_err(|e| Error::io(staging.display().to_string(), e))?;
    }
    let result = gen_data_into(cfg, &staging);
    if result.is_err() {
        let _ = std::fs::remove_dir_all(&staging);
        return result;
    }
    // Promote staged subdirectories, replacing any previous generation.
    for sub in ["corpora", "pairs", "analytic"] {
        let from = staging.join(sub);
        let to = cfg.out_dir.join(sub);
        if to.exists() {
            std::fs::remove_dir_all(&to).map_err(|e| Error::io(to.display().to_string(), e))?;
        }
        std::fs::rename(&from, &to).map_err(|e| Error::io(to.display().to_string(), e))?;
    }
    let manifest_from = staging.join("manifest.json");
    std::fs::rename(&manifest_from, cfg.manifest_path())
        .map_err(|e| Error::io(cfg.manifest_path().display().to_string(), e))?;
    let _ = std::fs::remove_dir_all(&staging);
    Ok(())
}

fn gen_data_into(cfg: &RunConfig, root: &Path) -> Result<()> {
    let corpora_dir = root.join("corpora");
    let pairs_dir = root.join("pairs");
    let analytic_dir = root.join("analytic");
    mkdirs(&corpora_dir)?;
    mkdirs(&pairs_dir)?;
    mkdirs(&analytic_dir)?;

    let base = ToyBaseModel::new(cfg.toy.base_seed);
    let corpora_seed = Prng::derive(cfg.seed, "corpora").next_u64();
    let (domains, safety) = generate_corpora(cfg.toy.domain_count, cfg.toy.corpus_size, corpora_seed);

    let mut corpora_files = BTreeMap::new();
    for corpus in domains.iter().chain(std::iter::once(&safety)) {
        let rel = format!("corpora/{}.txt", corpus.domain);
        let path = corpora_dir.join(format!("{}.txt", corpus.domain));
        write_text(&path, &corpus_text(corpus))?;
        corpora_files.insert(rel, file_hash(&path)?);
    }

    let forge_seed = Prng::derive(cfg.seed, "forge").next_u64();
    let pairs = forge_pairs(&base, &domains, &safety, cfg.toy.pairs_per_domain, &cfg.sft, forge_seed)?;
    let mut pair_entries = Vec::new();
    let mut index_in_domain: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &pairs {
        let idx = index_in_domain.entry(p.domain.as_str()).or_insert(0);
        let split = if *idx < cfg.toy.train_per_domain { "train" } else { "held_out" };
        let unsafe_rel = format!("pairs/{}.{idx}.unsafe.ct", p.domain);
        let safe_rel = format!("pairs/{}.{idx}.safe.ct", p.domain);
        let unsafe_path = pairs_dir.join(format!("{}.{idx}.unsafe.ct", p.domain));
        let safe_path = pairs_dir.join(format!("{}.{idx}.safe.ct", p.domain));
        save_bundle(&p.unsafe_bundle, &unsafe_path)?;
        save_bundle(&p.safe_bundle, &safe_path)?;
        pair_entries.push(PairEntry {
            domain: p.domain.clone(),
            index: *idx,
            split: split.into(),
            unsafe_path: unsafe_rel,
            safe_path: safe_rel,
            unsafe_hash: file_hash(&unsafe_path)?,
            safe_hash: file_hash(&safe_path)?,
        });
        *idx += 1;
    }

    let keys: Vec<curelora::lora::ShapeKey> = cfg
        .analytic
        .keys
        .iter()
        .map(|&(d, k)| curelora::lora::ShapeKey::new(d, k))
        .collect();
    let analytic_seed = Prng::derive(cfg.seed, "analytic").next_u64();
    let mut analytic_files = BTreeMap::new();
    for (kind, name, sigma) in [
        (MapKind::Affine, "affine", 0.0),
        (MapKind::Tanh, "tanh", cfg.analytic.sigma),
    ] {
        let (corpus, _) = sample_analytic_pairs(&keys, cfg.analytic.n, kind, sigma, analytic_seed)?;
        let mut c = TensorContainer::new();
        c.metadata.insert("kind".into(), "analytic_pairs".into());
        c.metadata.insert("map".into(), name.into());
        c.metadata.insert("sigma".into(), format!("{sigma}"));
        c.metadata.insert("seed".into(), analytic_seed.to_string());
        for (key, set) in &corpus {
            let d = key.flat_dim();
            let n = set.pairs.len();
            let mut x_dom = Vec::with_capacity(n * d);
            let mut x_safe = Vec::with_capacity(n * d);
            for p in &set.pairs {
                x_dom.extend_from_slice(&p.x_dom);
                x_safe.extend_from_slice(&p.x_safe);
            }
            c.insert_f64(format!("s{}.x_dom", key.label()), vec![n, d], &x_dom);
            c.insert_f64(format!("s{}.x_safe", key.label()), vec![n, d], &x_safe);
        }
        let rel = format!("analytic/{name}.ct");
        let path = analytic_dir.join(format!("{name}.ct"));
        c.write(&path)?;
        analytic_files.insert(rel, file_hash(&path)?);
    }

    let manifest = Manifest {
        seed: cfg.seed,
        base_model_id: base.id.clone(),
        corpora_files,
        pairs: pair_entries,
        analytic_files,
    };
    write_text(
        &root.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).unwrap(),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn load_split(cfg: &RunConfig, manifest: &Manifest, split: &str) -> Result<Vec<(AdapterBundle, AdapterBundle)>> {
    let mut out = Vec::new();
    for e in manifest.pairs.iter().filter(|e| e.split == split) {
        let u = load_bundle(&cfg.out_dir.join(&e.unsafe_path))?;
        let s = load_bundle(&cfg.out_dir.join(&e.safe_path))?;
        out.push((u, s));
    }
    if out.is_empty() {
        return Err(Error::Config(format!("manifest lists no `{split}` pairs")));
    }
    Ok(out)
}

fn loss_log_csv(ens: &TranslatorEnsemble) -> String {
    let mut out = String::from("shape,epoch,loss\n");
    for (key, losses) in &ens.log {
        for (epoch, loss) in losses.iter().enumerate() {
            let _ = writeln!(out, "{},{epoch},{loss}", key.label());
        }
    }
    out
}

pub fn cmd_train(cfg: &RunConfig, family_arg: &str) -> Result<()> {
    let manifest = Manifest::load(cfg)?;
    mkdirs(&cfg.checkpoints_dir())?;
    let train_bundles = load_split(cfg, &manifest, "train")?;
    let corpus = build_pairs(&train_bundles)?;

    if family_arg == "moe" {
        // The router blends pre-trained frozen experts.
        for tag in ["fm", "mlp"] {
            if !cfg.checkpoint_path(tag).exists() {
                return Err(Error::Config(format!(
                    "family=moe requires a trained `{tag}` checkpoint; run `train --family {tag}` first"
                )));
            }
        }
        let surgical = load_ensemble(&cfg.checkpoint_path("fm"))?;
        let aggressive = load_ensemble(&cfg.checkpoint_path("mlp"))?;
        let router_seed = Prng::derive(cfg.seed, "router").next_u64();
        let mut router = RouterParams::init(router_seed);
        let losses = train_moe_router(
            &mut router,
            &corpus,
            &surgical,
            &aggressive,
            &cfg.router_recipe,
            &cfg.infer,
            router_seed,
        )?;
        router.to_container().write(&cfg.checkpoint_path("router"))?;
        let mut log = String::from("epoch,loss\n");
        for (epoch, loss) in losses.iter().enumerate() {
            let _ = writeln!(log, "{epoch},{loss}");
        }
        write_text(&cfg.checkpoints_dir().join("router.loss.csv"), &log)?;
        return Ok(());
    }

    let family = Family::parse(family_arg)?;
    let hyper = cfg.hyper_for(family);
    let recipe = cfg.recipe_for(family);
    let train_seed = Prng::derive(cfg.seed, &format!("train.{family}")).next_u64();

    // Identity-at-init smoke check before any training.
    for key in corpus.keys() {
        let probe_params = init_translator(family, *key, hyper, train_seed);
        let mut rng = Prng::derive(train_seed, "smoke");
        let x: Vec<f64> = (0..key.flat_dim()).map(|_| rng.normal()).collect();
        let y = translate(&probe_params, &x, &cfg.infer)?;
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        if err > 1e-6 {
            return Err(Error::numerical(
                format!("identity-at-init smoke check ({family}, {})", key.label()),
                format!("max abs deviation {err}"),
            ));
        }
    }

    let ens = train_ensemble_jobs(family, &corpus, hyper, &recipe, train_seed, cfg.jobs)?;
    ensemble_to_container(&ens).write(&cfg.checkpoint_path(family.as_str()))?;
    write_text(
        &cfg.checkpoints_dir().join(format!("{family}.loss.csv")),
        &loss_log_csv(&ens),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// cure
// ---------------------------------------------------------------------------

pub struct CureArgs<'a> {
    pub adapter: &'a Path,
    pub family: &'a str,
    pub out: Option<&'a Path>,
    pub dry_run: bool,
}

enum LoadedCurer {
    Single(TranslatorEnsemble),
    Moe {
        surgical: TranslatorEnsemble,
        aggressive: TranslatorEnsemble,
        router: RouterParams,
    },
}

impl LoadedCurer {
    fn as_curer(&self) -> Curer<'_> {
        match self {
            LoadedCurer::Single(e) => Curer::Single(e),
            LoadedCurer::Moe {
                surgical,
                aggressive,
                router,
            } => Curer::Moe {
                surgical,
                aggressive,
                router,
            },
        }
    }
}

fn load_curer(cfg: &RunConfig, family: &str) -> Result<LoadedCurer> {
    if family == "moe" {
        Ok(LoadedCurer::Moe {
            surgical: load_ensemble(&cfg.checkpoint_path("fm"))?,
            aggressive: load_ensemble(&cfg.checkpoint_path("mlp"))?,
            router: RouterParams::from_container(&TensorContainer::read(
                &cfg.checkpoint_path("router"),
            )?)?,
        })
    } else {
        let f = Family::parse(family)?;
        Ok(LoadedCurer::Single(load_ensemble(&cfg.checkpoint_path(f.as_str()))?))
    }
}

pub fn cmd_cure(cfg: &RunConfig, args: &CureArgs) -> Result<()> {
    let loaded = load_curer(cfg, args.family)?;
    let bundle = load_bundle(args.adapter)?;
    let opts = CureOptions {
        infer: cfg.infer,
        ..CureOptions::default()
    };
    let (cured, report) = cure_adapter(&bundle, &loaded.as_curer(), &opts)?;
    for row in &report.rows {
        if row.warned {
            eprintln!(
                "warning: layer `{}` refactor residual {:.4} above tolerance",
                row.name, row.refactor_residual
            );
        }
    }
    if args.dry_run {
        println!("dry-run ok: {} layers coverable", report.rows.len());
        return Ok(());
    }
    mkdirs(&cfg.cured_dir())?;
    let stem = args
        .adapter
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "adapter".into());
    let out_path = args
        .out
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.cured_dir().join(format!("{stem}.{}.ct", args.family)));
    save_bundle(&cured, &out_path)?;
    write_text(
        &out_path.with_extension("report.csv"),
        &report.to_csv(),
    )?;
    println!("cured -> {}", out_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct EvalScores {
    asr: f64,
    kr: f64,
    final_score: f64,
}

#[derive(Debug, Serialize)]
struct FamilyEval {
    asr: f64,
    kr: f64,
    final_score: f64,
    per_domain: BTreeMap<String, EvalScores>,
    mean_g: Option<f64>,
    safety_recovery: Vec<f64>,
    kp_cured: Vec<f64>,
    kp_safe: Vec<f64>,
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let manifest = Manifest::load(cfg)?;
    mkdirs(&cfg.eval_dir())?;
    let base = ToyBaseModel::new(cfg.toy.base_seed);
    let corpora_seed = Prng::derive(cfg.seed, "corpora").next_u64();
    let (domains, safety) = generate_corpora(cfg.toy.domain_count, cfg.toy.corpus_size, corpora_seed);
    let benign: Vec<usize> = domains
        .first()
        .map(|d| d.benign_prompts())
        .unwrap_or_default();
    let held = load_split(cfg, &manifest, "held_out")?;
    let held_domains: Vec<String> = manifest
        .pairs
        .iter()
        .filter(|e| e.split == "held_out")
        .map(|e| e.domain.clone())
        .collect();

    // Baseline behavior of the forged experts.
    let mut unsafe_asr = 0.0;
    let mut safe_asr = 0.0;
    for (u, s) in &held {
        let eu = base.effective(Some(u))?;
        let es = base.effective(Some(s))?;
        unsafe_asr += toy_asr(&base, &eu, &safety.triggers, safety.refusal);
        safe_asr += toy_asr(&base, &es, &safety.triggers, safety.refusal);
    }
    unsafe_asr /= held.len() as f64;
    safe_asr /= held.len() as f64;

    let candidates = ["mlp", "ae", "cvae", "fm", "moe"];
    let mut families = BTreeMap::new();
    let mut metrics_csv = String::from("family,domain,asr,kr,final_score\n");
    let mut trajectory_csv = String::from("family,layer,safety_recovery,kp_cured,kp_safe\n");
    let opts = CureOptions {
        infer: cfg.infer,
        ..CureOptions::default()
    };
    for fam in candidates {
        let available = if fam == "moe" {
            cfg.checkpoint_path("router").exists()
                && cfg.checkpoint_path("fm").exists()
                && cfg.checkpoint_path("mlp").exists()
        } else {
            cfg.checkpoint_path(fam).exists()
        };
        if !available {
            continue;
        }
        let loaded = load_curer(cfg, fam)?;
        let curer = loaded.as_curer();

        let mut per_domain: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
        let mut reports: Vec<CureReport> = Vec::new();
        let mut recovery = vec![0.0; curelora::toyforge::NUM_BLOCKS];
        let mut kp_cured = vec![0.0; curelora::toyforge::NUM_BLOCKS];
        let mut kp_safe = vec![0.0; curelora::toyforge::NUM_BLOCKS];
        for ((u, s), domain) in held.iter().zip(&held_domains) {
            let (cured, report) = cure_adapter(u, &curer, &opts)?;
            let eu = base.effective(Some(u))?;
            let es = base.effective(Some(s))?;
            let ec = base.effective(Some(&cured))?;
            let asr = toy_asr(&base, &ec, &safety.triggers, safety.refusal);
            let kr = toy_kr(&base, &ec, &eu, &benign);
            let e = per_domain.entry(domain.clone()).or_insert((0.0, 0.0, 0));
            e.0 += asr;
            e.1 += kr;
            e.2 += 1;
            reports.push(report);

            let harm_probe = build_trajectory_probe(&base, &eu, &es, &ec, &safety.triggers)?;
            let benign_probe = build_trajectory_probe(&base, &eu, &es, &ec, &benign)?;
            for l in 0..recovery.len() {
                recovery[l] += safety_recovery(&harm_probe, l)?.value;
                kp_cured[l] += knowledge_preservation(&benign_probe, l, ProbeVariant::Cured)?;
                kp_safe[l] += knowledge_preservation(&benign_probe, l, ProbeVariant::Safe)?;
            }
        }
        let n = held.len() as f64;
        for v in recovery.iter_mut().chain(&mut kp_cured).chain(&mut kp_safe) {
            *v /= n;
        }
        let mut per_domain_out = BTreeMap::new();
        let mut mean_asr = 0.0;
        let mut mean_kr = 0.0;
        for (domain, (asr_sum, kr_sum, count)) in &per_domain {
            let asr = asr_sum / *count as f64;
            let kr = kr_sum / *count as f64;
            mean_asr += asr;
            mean_kr += kr;
            let _ = writeln!(
                metrics_csv,
                "{fam},{domain},{asr},{kr},{}",
                final_score(asr, kr)
            );
            per_domain_out.insert(
                domain.clone(),
                EvalScores {
                    asr,
                    kr,
                    final_score: final_score(asr, kr),
                },
            );
        }
        mean_asr /= per_domain.len() as f64;
        mean_kr /= per_domain.len() as f64;
        for l in 0..recovery.len() {
            let _ = writeln!(
                trajectory_csv,
                "{fam},{l},{},{},{}",
                recovery[l], kp_cured[l], kp_safe[l]
            );
        }
        let mean_g = if fam == "moe" {
            let gs: Vec<f64> = reports.iter().filter_map(|r| r.mean_g()).collect();
            let stats = gating_stats(&reports)?;
            write_text(&cfg.eval_dir().join("gating_layer.csv"), &stats.layer_csv())?;
            write_text(&cfg.eval_dir().join("gating_domain.csv"), &stats.domain_csv())?;
            Some(gs.iter().sum::<f64>() / gs.len().max(1) as f64)
        } else {
            None
        };
        families.insert(
            fam.to_string(),
            FamilyEval {
                asr: mean_asr,
                kr: mean_kr,
                final_score: final_score(mean_asr, mean_kr),
                per_domain: per_domain_out,
                mean_g,
                safety_recovery: recovery,
                kp_cured,
                kp_safe,
            },
        );
    }
    if families.is_empty() {
        return Err(Error::Config(
            "no trained checkpoints found; run `train` first".into(),
        ));
    }

    #[derive(Serialize)]
    struct Summary {
        seed: u64,
        unsafe_asr: f64,
        safe_asr: f64,
        families: BTreeMap<String, FamilyEval>,
    }
    let summary = Summary {
        seed: cfg.seed,
        unsafe_asr,
        safe_asr,
        families,
    };
    write_text(
        &cfg.eval_dir().join("summary.json"),
        &serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    write_text(&cfg.eval_dir().join("metrics.csv"), &metrics_csv)?;
    write_text(&cfg.eval_dir().join("trajectory.csv"), &trajectory_csv)?;
    println!("eval -> {}", cfg.eval_dir().display());
    Ok(())
}

// ---------------------------------------------------------------------------
// route-stats
// ---------------------------------------------------------------------------

pub fn cmd_route_stats(cfg: &RunConfig) -> Result<()> {
    let manifest = Manifest::load(cfg)?;
    mkdirs(&cfg.eval_dir())?;
    let loaded = load_curer(cfg, "moe")?;
    let curer = loaded.as_curer();
    let held = load_split(cfg, &manifest, "held_out")?;
    let opts = CureOptions {
        infer: cfg.infer,
        ..CureOptions::default()
    };
    let mut reports = Vec::new();
    for (u, _) in &held {
        let (_, report) = cure_adapter(u, &curer, &opts)?;
        reports.push(report);
    }
    let stats = gating_stats(&reports)?;
    write_text(&cfg.eval_dir().join("gating_layer.csv"), &stats.layer_csv())?;
    write_text(&cfg.eval_dir().join("gating_domain.csv"), &stats.domain_csv())?;
    println!("route-stats -> {}", cfg.eval_dir().display());
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

pub fn cmd_inspect(path: &Path) -> Result<()> {
    let c = TensorContainer::read(path)?;
    println!("{}", path.display());
    if !c.metadata.is_empty() {
        println!("metadata:");
        for (k, v) in &c.metadata {
            println!("  {k} = {v}");
        }
    }
    println!("tensors ({}):", c.tensors.len());
    for (name, t) in &c.tensors {
        let values = t.data.len();
        let l2 = t.data.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        println!("  {name}  F32 {:?}  |x|_2 = {l2:.6} ({values} values)", t.shape);
    }
    if c.metadata.get("kind").map(|s| s.as_str()) == Some("ensemble") {
        let ens = ensemble_from_container(&c)?;
        println!(
            "ensemble: family {}, shapes {:?}",
            ens.family,
            ens.shape_keys().iter().map(|k| k.label()).collect::<Vec<_>>()
        );
    } else if c.tensors.keys().any(|k| k.ends_with(".lora_A")) {
        let bundle = curelora::io::container_to_bundle(&c)?;
        println!(
            "adapter bundle: {} entries, base `{}`",
            bundle.entries.len(),
            bundle.base_model_id
        );
        for e in &bundle.entries {
            let delta = curelora::lora::extract_delta(&e.factors)?;
            println!(
                "  {} block {} role {} shape {} rank {} alpha {} |delta| {:.4} max {:.4}",
                e.name,
                e.layer_index,
                e.role.as_str(),
                e.factors.shape_key().label(),
                e.factors.rank,
                e.factors.alpha,
                delta.frob_norm(),
                max_abs(&delta.data),
            );
        }
    }
    Ok(())
}
