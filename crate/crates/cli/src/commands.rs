use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use morphprint_autodiff::operator_suite;
use morphprint_core::config::RunConfig;
use morphprint_core::flatten::{
    flatten_half, read_planar_map, split_sphere, write_beltrami, write_planar_map,
};
use morphprint_core::mesh::{load_mesh, write_features, write_obj, TriMesh};
use morphprint_core::model::{loss_gradcheck_suite, Model};
use morphprint_core::raster::{
    augment_pair, rasterize, ChannelStats, FeatureImage, PartitionCache, PartitionSet,
};
use morphprint_core::seed::derive_seed;
use morphprint_core::synth::{
    generate_cohort, load_cohort, load_subject_meshes, separability, write_cohort,
};
use morphprint_core::train::{
    ablation_suite, channel_contribution, cross_validate, identify, occlusion_saliency,
    topk_accuracy, train_model, ExperimentTable, RasterCohort, Readout,
};
use morphprint_core::{Error, Result};

use crate::run::Record;
use crate::{Command, Global};

const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Half {
    /// x > 0
    Pos,
    /// x ≤ 0
    Neg,
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None if g.desk => RunConfig::desk(),
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn mesh_with_features(mesh: &Path, features: Option<&PathBuf>) -> Result<TriMesh> {
    load_mesh(mesh, features.map(PathBuf::as_path))
}

fn raster_cohort(manifest: &Path, cfg: &RunConfig) -> Result<(RasterCohort, Vec<String>)> {
    load_cohort(manifest, &cfg.flatten, &PartitionCache::new())
}

/// Checkpoint files inside a `train` output directory.
fn checkpoint(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("model"), dir.join("stats.csv"))
}

fn write_table(table: &ExperimentTable, path: &Path) -> Result<()> {
    table.write_csv(create(path)?)?;
    for r in &table.rows {
        let (t1, t5) = r.metrics.mean();
        println!(
            "{:<10} top1={t1:.4} top5={t5:.4}  {}",
            r.label, r.description
        );
    }
    Ok(())
}

pub fn dispatch(g: &Global, cmd: Command) -> Result<u8> {
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    let mut cfg = load_config(g)?;
    let out = g.out.as_path();
    std::fs::create_dir_all(out)?;
    let mut rec = Record::default();
    if let Some(p) = &g.config {
        rec.input(p)?;
    }
    let mut code = 0;
    let name = match cmd {
        Command::Synth { subjects, singles } => {
            if let Some(n) = subjects {
                cfg.data.n_pairs = n;
            }
            if let Some(n) = singles {
                cfg.data.n_singles = n;
            }
            let cohort = generate_cohort(&cfg.cohort_spec())?;
            let files = write_cohort(&cohort, out)?;
            for r in &files.rows {
                rec.output(&out.join(&r.feature_path));
            }
            rec.output(&files.manifest);
            println!(
                "manifest {} sha256 {}",
                files.manifest.display(),
                files.manifest_hash
            );
            if cfg.data.n_pairs >= 2 {
                let sep = separability(&cohort.rasterize(&cfg.flatten, &PartitionCache::new())?)?;
                let path = out.join("separability.txt");
                std::fs::write(
                    &path,
                    format!(
                        "mean_within={:e}\nmean_between={:e}\nbelow_median={}\n",
                        sep.mean_within, sep.mean_between, sep.below_median
                    ),
                )?;
                rec.output(&path);
                println!(
                    "raw raster distance: within {:.4} between {:.4} below-median fraction {:.3}",
                    sep.mean_within, sep.mean_between, sep.below_median
                );
                if !(sep.mean_within < sep.mean_between) {
                    eprintln!("error: cohort is not separable at the raw raster level; raise bump amplitude or lower scan noise");
                    code = 2;
                }
            }
            "synth"
        }
        Command::Flatten {
            mesh,
            features,
            half,
        } => {
            rec.input(&mesh)?;
            if let Some(f) = &features {
                rec.input(f)?;
            }
            let mut m = mesh_with_features(&mesh, features.as_ref())?;
            if let Some(h) = half {
                let split = split_sphere(&m)?;
                m = if h == Half::Pos { split.pos } else { split.neg };
                let obj = out.join("half.obj");
                write_obj(&m, create(&obj)?)?;
                rec.output(&obj);
                if !m.features().is_empty() {
                    let fp = out.join("half_features.csv");
                    write_features(&m, create(&fp)?)?;
                    rec.output(&fp);
                }
            }
            let t = flatten_half(&m, cfg.flatten.tol, cfg.flatten.max_iter)?;
            let map = out.join("planar_map.csv");
            write_planar_map(&t.map, create(&map)?)?;
            let mu = out.join("beltrami.csv");
            write_beltrami(&t.mu, create(&mu)?)?;
            let report = out.join("distortion.txt");
            let history: Vec<String> = t.std_history.iter().map(|v| format!("{v:e}")).collect();
            std::fs::write(
                &report,
                format!(
                    "{}converged={}\niterations={}\nstd_history={}\n",
                    t.report.to_key_value(),
                    t.converged,
                    t.iterations,
                    history.join(",")
                ),
            )?;
            for p in [&map, &mu, &report] {
                rec.output(p);
            }
            println!(
                "std|mu| {:.4} after {} iterations, {} flipped faces, converged {}",
                t.report.mu_std, t.iterations, t.report.flipped_faces, t.converged
            );
            "flatten"
        }
        Command::Rasterize {
            mesh,
            features,
            map,
        } => {
            rec.input(&mesh)?;
            if let Some(f) = &features {
                rec.input(f)?;
            }
            rec.input(&map)?;
            let m = mesh_with_features(&mesh, features.as_ref())?;
            let pm = read_planar_map(BufReader::new(File::open(&map)?))?;
            let img = rasterize(&pm, &m, cfg.flatten.height, cfg.flatten.width)?;
            let path = out.join("image.fimg");
            img.save(&path)?;
            rec.output(&path);
            println!(
                "{}x{}x{} image, coverage {:.4}",
                img.channels(),
                img.height(),
                img.width(),
                img.coverage()
            );
            "rasterize"
        }
        Command::Augment { image } => {
            rec.input(&image)?;
            let img = FeatureImage::load(&image)?;
            let set = PartitionSet::new(std::array::from_fn(|_| img.clone()))?;
            let (a, b) = augment_pair(&set, &cfg.augment, derive_seed(cfg.seed, "augment"));
            for (name, v) in [("view1.fimg", &a), ("view2.fimg", &b)] {
                let path = out.join(name);
                v.images[0].save(&path)?;
                rec.output(&path);
            }
            "augment"
        }
        Command::Train { manifest } => {
            rec.cohort_input(&manifest)?;
            let (cohort, _) = raster_cohort(&manifest, &cfg)?;
            let trained = train_model(&cohort, &cfg.model, &cfg.train_config())?;
            let (stem, stats) = checkpoint(out);
            trained.model.save(&stem)?;
            trained.stats.save(&stats)?;
            let hist = out.join("history.csv");
            trained.history.write_csv(create(&hist)?)?;
            for p in [
                stem.with_extension("pset"),
                stem.with_extension("toml"),
                stats,
                hist,
            ] {
                rec.output(&p);
            }
            if let Some(last) = trained.history.epochs.last() {
                println!(
                    "trained; last epoch ({} {}) mean loss {:.6}",
                    last.phase, last.epoch, last.mean_loss
                );
            }
            "train"
        }
        Command::Eval { manifest, model } => {
            rec.cohort_input(&manifest)?;
            let (cohort, ids) = raster_cohort(&manifest, &cfg)?;
            match model {
                Some(dir) => {
                    let (stem, stats_path) = checkpoint(&dir);
                    for p in [
                        stem.with_extension("pset"),
                        stem.with_extension("toml"),
                        stats_path.clone(),
                    ] {
                        rec.input(&p)?;
                    }
                    let model = Model::load(&stem)?;
                    let stats = ChannelStats::load(&stats_path)?;
                    let mut pairs = cohort.pairs.clone();
                    for p in pairs.iter_mut().flatten() {
                        stats.apply_set(p)?;
                    }
                    let fp = out.join("fingerprints.csv");
                    let mut w = create(&fp)?;
                    writeln!(w, "subject_id,scan_index,fingerprint")?;
                    for (id, pair) in ids.iter().zip(&pairs) {
                        for (k, s) in pair.iter().enumerate() {
                            let f: Vec<String> = model
                                .fingerprint(s)?
                                .iter()
                                .map(|v| format!("{v:?}"))
                                .collect();
                            writeln!(w, "{id},{k},{}", f.join(" "))?;
                        }
                    }
                    w.flush()?;
                    let sim = identify(&model, &pairs, Readout::of(&model))?;
                    let sp = out.join("similarity.csv");
                    sim.write_csv(create(&sp)?)?;
                    let (t1, t5) = (topk_accuracy(&sim, 1)?, topk_accuracy(&sim, 5)?);
                    let tp = out.join("topk.txt");
                    std::fs::write(
                        &tp,
                        format!("subjects={}\ntop1={t1:?}\ntop5={t5:?}\n", pairs.len()),
                    )?;
                    for p in [&fp, &sp, &tp] {
                        rec.output(p);
                    }
                    println!("{} subjects: top1={t1:.4} top5={t5:.4}", pairs.len());
                }
                None => {
                    let metrics =
                        cross_validate(&cohort, &cfg.model, &cfg.train_config(), &cfg.eval.plan())?;
                    let path = out.join("metrics.csv");
                    metrics.write_csv(create(&path)?)?;
                    rec.output(&path);
                    let (t1, t5) = metrics.mean();
                    println!("{} folds: top1={t1:.4} top5={t5:.4}", metrics.folds.len());
                }
            }
            "eval"
        }
        Command::Ablate { manifest } => {
            rec.cohort_input(&manifest)?;
            let (cohort, _) = raster_cohort(&manifest, &cfg)?;
            let table = ablation_suite(&cohort, &cfg.model, &cfg.train_config(), &cfg.eval.plan())?;
            let path = out.join("ablation.csv");
            write_table(&table, &path)?;
            rec.output(&path);
            "ablate"
        }
        Command::Channels { manifest } => {
            rec.cohort_input(&manifest)?;
            let (cohort, _) = raster_cohort(&manifest, &cfg)?;
            let table =
                channel_contribution(&cohort, &cfg.model, &cfg.train_config(), &cfg.eval.plan())?;
            let path = out.join("channels.csv");
            write_table(&table, &path)?;
            rec.output(&path);
            "channels"
        }
        Command::Saliency {
            manifest,
            model,
            subject,
        } => {
            rec.cohort_input(&manifest)?;
            let (stem, stats_path) = checkpoint(&model);
            for p in [
                stem.with_extension("pset"),
                stem.with_extension("toml"),
                stats_path.clone(),
            ] {
                rec.input(&p)?;
            }
            let model = Model::load(&stem)?;
            let stats = ChannelStats::load(&stats_path)?;
            let subjects = load_subject_meshes(&manifest)?;
            let scans = &subjects
                .iter()
                .find(|(id, _)| *id == subject)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "subject {subject} is not in {}",
                        manifest.display()
                    ))
                })?
                .1;
            if scans.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "subject {subject} has a single scan; saliency needs two"
                )));
            }
            let cache = PartitionCache::new();
            let mut sets = Vec::new();
            for (l, r) in &scans[..2] {
                let mut s = cache.build(l, r, &cfg.flatten)?;
                stats.apply_set(&mut s)?;
                sets.push(s);
            }
            let report = occlusion_saliency(&model, &sets[0], &sets[1], cfg.eval.saliency_patch)?;
            let path = out.join("saliency.csv");
            report.write_csv(create(&path)?)?;
            rec.output(&path);
            println!("baseline distance {:.6}", report.baseline);
            for (p, w) in report.partition_weights.iter().enumerate() {
                let peak = report.maps[p]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                println!("partition {p}: mean channel weight {w:.4}, peak saliency {peak:.6}");
            }
            "saliency"
        }
        Command::Gradcheck { seeds } => {
            let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
            for seed in 0..seeds {
                let errs = operator_suite(seed, GRADCHECK_EPS)?
                    .into_iter()
                    .chain(loss_gradcheck_suite(seed, GRADCHECK_EPS)?);
                for (op, e) in errs {
                    let w = worst.entry(op).or_insert(0.0);
                    *w = w.max(e);
                }
            }
            let path = out.join("gradcheck.csv");
            let mut w = create(&path)?;
            writeln!(w, "operator,max_rel_error")?;
            for (op, e) in &worst {
                let ok = *e < GRADCHECK_TOLERANCE;
                println!("{op:<28} {e:.3e} {}", if ok { "ok" } else { "FAIL" });
                writeln!(w, "{op},{e:e}")?;
                if !ok {
                    code = 2;
                }
            }
            w.flush()?;
            rec.output(&path);
            "gradcheck"
        }
    };
    rec.finish(out, name, &cfg)?;
    Ok(code)
}
