// Scratch experiment: sweep translator configurations against one cached
// forged corpus, reporting held-out regression quality and cure behavior.

use std::collections::BTreeMap;
use std::path::PathBuf;

use curelora::baseline::{apply_linear_baseline, fit_linear_baseline};
use curelora::eval::{toy_asr, toy_kr};
use curelora::io::{load_bundle, save_bundle};
use curelora::lora::AdapterBundle;
use curelora::lora::PairCorpus;
use curelora::rng::Prng;
use curelora::pipeline::{build_pairs, cure_adapter, train_ensemble, CureOptions, Curer};
use curelora::toyforge::{forge_pairs, generate_corpora, SftRecipe, ToyBaseModel};
use curelora::translator::{Family, Hyper, InferOptions, OptimKindTag, TrainRecipe};

fn main() {
    let cache = PathBuf::from("/tmp/fitprobe-cache");
    let base = ToyBaseModel::new(0xBA5E);
    let (domains, safety) = generate_corpora(8, 48, 7);

    // Forge once, cache bundles on disk.
    let (train, held): (Vec<(AdapterBundle, AdapterBundle)>, Vec<(AdapterBundle, AdapterBundle)>) =
        if cache.exists() {
            let mut train = Vec::new();
            let mut held = Vec::new();
            for d in 0..8 {
                for j in 0..10 {
                    let u = load_bundle(&cache.join(format!("d{d}.{j}.unsafe.ct"))).unwrap();
                    let s = load_bundle(&cache.join(format!("d{d}.{j}.safe.ct"))).unwrap();
                    if j < 8 {
                        train.push((u, s));
                    } else {
                        held.push((u, s));
                    }
                }
            }
            (train, held)
        } else {
            std::fs::create_dir_all(&cache).unwrap();
            let sft = SftRecipe { max_epochs: 300, ..SftRecipe::default() };
            let pairs = forge_pairs(&base, &domains, &safety, 10, &sft, 1).unwrap();
            let mut train = Vec::new();
            let mut held = Vec::new();
            let mut idx: BTreeMap<&str, usize> = BTreeMap::new();
            for p in &pairs {
                let j = idx.entry(p.domain.as_str()).or_insert(0);
                let d: usize = p.domain[6..].parse().unwrap();
                save_bundle(&p.unsafe_bundle, &cache.join(format!("d{d}.{j}.unsafe.ct"))).unwrap();
                save_bundle(&p.safe_bundle, &cache.join(format!("d{d}.{j}.safe.ct"))).unwrap();
                if *j < 8 {
                    train.push((p.unsafe_bundle.clone(), p.safe_bundle.clone()));
                } else {
                    held.push((p.unsafe_bundle.clone(), p.safe_bundle.clone()));
                }
                *j += 1;
            }
            (train, held)
        };

    let corpus: PairCorpus = build_pairs(&train).unwrap();
    let held_corpus: PairCorpus = build_pairs(&held).unwrap();
    let benign_by_domain: BTreeMap<String, Vec<usize>> = domains
        .iter()
        .map(|d| (d.domain.clone(), d.benign_prompts()))
        .collect();
    let prompts_for = |b: &AdapterBundle| -> &Vec<usize> {
        &benign_by_domain[&b.provenance.as_ref().unwrap().domain]
    };

    // Reference: identity and ridge baselines.
    for (key, set) in &held_corpus {
        let mut id_mse = 0.0;
        for p in &set.pairs {
            id_mse += curelora::tensor::mean_sq_diff(&p.x_dom, &p.x_safe).unwrap();
        }
        println!("identity {}: held-out mse {:.6}", key.label(), id_mse / set.pairs.len() as f64);
    }
    for lambda in [1e-3, 1e-1, 1.0, 10.0] {
        let mut line = format!("ridge l={lambda:<6}");
        for (key, set) in &corpus {
            let map = fit_linear_baseline(set, lambda, None).unwrap();
            let hs = &held_corpus[key];
            let mut mse = 0.0;
            for p in &hs.pairs {
                let out = apply_linear_baseline(&map, &p.x_dom).unwrap();
                mse += curelora::tensor::mean_sq_diff(&out, &p.x_safe).unwrap();
            }
            line += &format!("  {} {:.6}", key.label(), mse / hs.pairs.len() as f64);
        }
        println!("{line}");
    }

    // Mean shifts per shape, for the oracle specs below.
    let mut mean_shift: BTreeMap<curelora::lora::ShapeKey, Vec<f64>> = BTreeMap::new();
    for (key, set) in &corpus {
        let d = key.flat_dim();
        let mut acc = vec![0.0; d];
        for p in &set.pairs {
            for i in 0..d {
                acc[i] += p.x_safe[i] - p.x_dom[i];
            }
        }
        for v in &mut acc {
            *v /= set.pairs.len() as f64;
        }
        mean_shift.insert(*key, acc);
    }

    // Per-domain mean gaps (domain-conditional oracle).
    let mut dmean: BTreeMap<(String, curelora::lora::ShapeKey), Vec<f64>> = BTreeMap::new();
    {
        let mut counts: BTreeMap<(String, curelora::lora::ShapeKey), usize> = BTreeMap::new();
        for (key, set) in &corpus {
            for p in &set.pairs {
                let slot = dmean
                    .entry((p.domain.clone(), *key))
                    .or_insert_with(|| vec![0.0; key.flat_dim()]);
                for i in 0..slot.len() {
                    slot[i] += p.x_safe[i] - p.x_dom[i];
                }
                *counts.entry((p.domain.clone(), *key)).or_insert(0) += 1;
            }
        }
        for (k, v) in dmean.iter_mut() {
            let n = counts[k] as f64;
            for x in v.iter_mut() {
                *x /= n;
            }
        }
    }

    // Config grid from argv:
    //   family:H:epochs:wd[:batch]  -> train that translator
    //   oracle:GAMMA:RHO            -> cure with x + GAMMA*mean_shift + noise
    //                                  of norm RHO*|delta| (seeded)
    //   dmean:GAMMA                 -> cure with x + GAMMA*domain_mean_gap
    //   moe:FMH:FME:FMWD:MLPH:MLPE:MLPWD -> full mixture with router
    for spec in std::env::args().skip(1) {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts[0] == "dmean" {
            let gamma: f64 = parts[1].parse().unwrap();
            let mut asr = 0.0;
            let mut kr = 0.0;
            for (u, _) in &held {
                use curelora::lora::{extract_delta, LayerRole};
                let eu = base.effective(Some(u)).unwrap();
                let mut eff = base.effective(None).unwrap();
                let dom = &u.provenance.as_ref().unwrap().domain;
                for e in &u.entries {
                    let key = e.factors.shape_key();
                    let delta = extract_delta(&e.factors).unwrap();
                    let shift = &dmean[&(dom.clone(), key)];
                    let mut cured = delta.clone();
                    for (i, v) in cured.data.iter_mut().enumerate() {
                        *v += gamma * shift[i];
                    }
                    let f = curelora::svd::refactor_rank_r(&cured, e.factors.rank, e.factors.alpha).unwrap();
                    let mut dm = extract_delta(&f).unwrap();
                    dm.scale(e.factors.alpha / e.factors.rank as f64);
                    let slot = match e.role {
                        LayerRole::AttentionBlock => &mut eff.w_attn[e.layer_index],
                        LayerRole::MlpBlock => &mut eff.w_mlp[e.layer_index],
                    };
                    slot.add_assign(&dm);
                }
                asr += toy_asr(&base, &eff, &safety.triggers, safety.refusal);
                kr += toy_kr(&base, &eff, &eu, prompts_for(u));
            }
            println!(
                "{spec:<24} asr {:.3} kr {:.3} final {:.4}",
                asr / held.len() as f64,
                kr / held.len() as f64,
                curelora::eval::final_score(asr / held.len() as f64, kr / held.len() as f64)
            );
            continue;
        }
        if parts[0] == "moe" {
            let nums: Vec<f64> = parts[1..].iter().map(|s| s.parse().unwrap()).collect();
            let train_one = |family: Family, h: usize, epochs: usize, wd: f64| {
                let mut hyper = Hyper::default_for(family);
                hyper.hidden = h;
                if family == Family::Fm {
                    hyper.time_dim = h;
                    hyper.blocks = 2;
                }
                let mut recipe = TrainRecipe::default_for(family);
                recipe.epochs = epochs;
                if wd > 0.0 {
                    recipe.optimizer.kind = OptimKindTag::AdamW;
                    recipe.optimizer.weight_decay = wd;
                }
                if let curelora::optim::Schedule::Cosine { horizon, .. } = &mut recipe.lr_schedule {
                    *horizon = epochs;
                }
                train_ensemble(family, &corpus, hyper, &recipe, 99).unwrap()
            };
            let t0 = std::time::Instant::now();
            let fm = train_one(Family::Fm, nums[0] as usize, nums[1] as usize, nums[2]);
            let mlp = train_one(Family::Mlp, nums[3] as usize, nums[4] as usize, nums[5]);
            let examples =
                curelora::pipeline::build_router_examples(&corpus, &fm, &mlp, &InferOptions::default())
                    .unwrap();
            // Analytic per-example optimum of the two-anchor loss, grouped
            // by (role-ish shape, layer position).
            {
                let corpus_pairs: Vec<&curelora::lora::FlatPair> =
                    corpus.values().flat_map(|s| s.pairs.iter()).collect();
                let mut cells: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
                for (ex, p) in examples.iter().zip(corpus_pairs) {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for j in 0..ex.surg_out.len() {
                        let delta = ex.aggr_out[j] - ex.surg_out[j];
                        num += delta * (ex.x_safe[j] - ex.surg_out[j]);
                        den += delta * delta;
                    }
                    let gstar = (num / (2.0 * den)).clamp(0.0, 1.0);
                    let e = cells
                        .entry((p.role.as_str().to_string(), p.layer_index))
                        .or_insert((0.0, 0));
                    e.0 += gstar;
                    e.1 += 1;
                }
                let mut line = String::from("    analytic g*:");
                for ((role, layer), (sum, n)) in &cells {
                    line += &format!(" {role}[{layer}]={:.2}", sum / *n as f64);
                }
                println!("{line}");
            }
            let mut router = curelora::router::RouterParams::init(7);
            curelora::router::train_router(
                &mut router,
                &examples,
                &curelora::router::default_router_recipe(),
                8,
            )
            .unwrap();
            let eval = |curer: &Curer, tag: &str| {
                let mut asr = 0.0;
                let mut kr = 0.0;
                let mut g_mlp = 0.0;
                let mut g_attn = 0.0;
                let mut n_roles = 0.0;
                for (u, _) in &held {
                    let (cured, report) = cure_adapter(u, curer, &CureOptions::default()).unwrap();
                    let ec = base.effective(Some(&cured)).unwrap();
                    let eu = base.effective(Some(u)).unwrap();
                    asr += toy_asr(&base, &ec, &safety.triggers, safety.refusal);
                    kr += toy_kr(&base, &ec, &eu, prompts_for(u));
                    for row in &report.rows {
                        if let Some(g) = row.g {
                            match row.role {
                                curelora::lora::LayerRole::MlpBlock => g_mlp += g,
                                curelora::lora::LayerRole::AttentionBlock => g_attn += g,
                            }
                        }
                    }
                    n_roles += 4.0;
                }
                let asr = asr / held.len() as f64;
                let kr = kr / held.len() as f64;
                if g_mlp > 0.0 || g_attn > 0.0 {
                    println!(
                        "    mean g: mlp-role {:.3} attn-role {:.3}",
                        g_mlp / n_roles,
                        g_attn / n_roles
                    );
                }
                println!(
                    "    {tag}: asr {asr:.3} kr {kr:.3} final {:.4}",
                    curelora::eval::final_score(asr, kr)
                );
                (asr, kr)
            };
            println!("{spec}  [{:.0}s to train]", t0.elapsed().as_secs_f64());
            eval(&Curer::Single(&fm), "fm ");
            eval(&Curer::Single(&mlp), "mlp");
            eval(
                &Curer::Moe {
                    surgical: &fm,
                    aggressive: &mlp,
                    router: &router,
                },
                "moe",
            );
            // Forced-g sweep: what the convex blend can reach at all.
            for g in [0.5f64, 0.6, 0.7, 0.8, 0.9] {
                let mut forced = curelora::router::RouterParams::init(0);
                forced.fc3.w.data.iter_mut().for_each(|v| *v = 0.0);
                forced.fc3.b[0] = (g / (1.0 - g)).ln();
                eval(
                    &Curer::Moe {
                        surgical: &fm,
                        aggressive: &mlp,
                        router: &forced,
                    },
                    &format!("g={g}"),
                );
            }
            continue;
        }
        if parts[0] == "oracle" {
            let gamma: f64 = parts[1].parse().unwrap();
            let rho: f64 = parts[2].parse().unwrap();
            let mut rng = Prng::new(4242);
            let mut asr = 0.0;
            let mut kr = 0.0;
            for (u, _) in &held {
                use curelora::lora::{extract_delta, LayerRole};
                let eu = base.effective(Some(u)).unwrap();
                let mut eff = base.effective(None).unwrap();
                for e in &u.entries {
                    let key = e.factors.shape_key();
                    let delta = extract_delta(&e.factors).unwrap();
                    let shift = &mean_shift[&key];
                    let mut cured = delta.clone();
                    let noise: Vec<f64> = (0..cured.data.len()).map(|_| rng.normal()).collect();
                    let nn = curelora::tensor::l2_norm(&noise);
                    let target = rho * delta.frob_norm();
                    for (i, v) in cured.data.iter_mut().enumerate() {
                        *v += gamma * shift[i] + noise[i] / nn * target;
                    }
                    let f = curelora::svd::refactor_rank_r(&cured, e.factors.rank, e.factors.alpha).unwrap();
                    let mut dm = extract_delta(&f).unwrap();
                    dm.scale(e.factors.alpha / e.factors.rank as f64);
                    let slot = match e.role {
                        LayerRole::AttentionBlock => &mut eff.w_attn[e.layer_index],
                        LayerRole::MlpBlock => &mut eff.w_mlp[e.layer_index],
                    };
                    slot.add_assign(&dm);
                }
                asr += toy_asr(&base, &eff, &safety.triggers, safety.refusal);
                kr += toy_kr(&base, &eff, &eu, prompts_for(u));
            }
            println!(
                "{spec:<24} asr {:.3} kr {:.3}",
                asr / held.len() as f64,
                kr / held.len() as f64
            );
            continue;
        }
        let family = Family::parse(parts[0]).unwrap();
        let h: usize = parts[1].parse().unwrap();
        let epochs: usize = parts[2].parse().unwrap();
        let wd: f64 = parts[3].parse().unwrap();
        let batch: usize = parts.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);
        let mut hyper = Hyper::default_for(family);
        hyper.hidden = h;
        if family == Family::Fm {
            hyper.time_dim = h;
            hyper.blocks = 2;
        }
        if family == Family::Ae {
            hyper.latent = h / 2;
        }
        let mut recipe = TrainRecipe::default_for(family);
        recipe.epochs = epochs;
        if batch > 0 {
            recipe.batch_size = batch;
        }
        if wd > 0.0 {
            recipe.optimizer.kind = OptimKindTag::AdamW;
            recipe.optimizer.weight_decay = wd;
        }
        if let curelora::optim::Schedule::Cosine { horizon, .. } = &mut recipe.lr_schedule {
            *horizon = epochs;
        }
        let t0 = std::time::Instant::now();
        let ens = train_ensemble(family, &corpus, hyper, &recipe, 99).unwrap();

        let mut line = format!("{spec:<24}");
        for (key, set) in &held_corpus {
            let mut mse = 0.0;
            for p in &set.pairs {
                let out = curelora::translator::translate(&ens.models[key], &p.x_dom, &InferOptions::default()).unwrap();
                mse += curelora::tensor::mean_sq_diff(&out, &p.x_safe).unwrap();
            }
            line += &format!(" hm[{}] {:.6}", key.label(), mse / set.pairs.len() as f64);
        }

        // Cure behavior on held-out adapters.
        let mut asr = 0.0;
        let mut kr = 0.0;
        let curer = Curer::Single(&ens);
        for (u, _) in &held {
            let (cured, _) = cure_adapter(u, &curer, &CureOptions::default()).unwrap();
            let ec = base.effective(Some(&cured)).unwrap();
            let eu = base.effective(Some(u)).unwrap();
            asr += toy_asr(&base, &ec, &safety.triggers, safety.refusal);
            kr += toy_kr(&base, &ec, &eu, prompts_for(u));
        }
        asr /= held.len() as f64;
        kr /= held.len() as f64;
        println!(
            "{line}  asr {asr:.3} kr {kr:.3} final {:.4}  [{:.0}s]",
            curelora::eval::final_score(asr, kr),
            t0.elapsed().as_secs_f64()
        );
    }
}
