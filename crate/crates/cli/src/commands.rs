use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use voxmat::featlift::{lift_features, load_cameras, FeatureMap, VoxelFeatures};
use voxmat::fieldpred::{predict_field, train_head, AnnotatedVoxelSet, HeadHyperparams, PredictorHead};
use voxmat::matvae::{self, Hyperparams, KlEstimator, MatVae};
use voxmat::metrics::{self, field_reports, report_rows, LogBase, Property};
use voxmat::mtd::{self, MaterialRangeDb, MaterialTriplet};
use voxmat::transfer::{self, load_material_sidecar, write_material_sidecar, MERGE_TOL};
use voxmat::voxelizer::{self, SegmentedMesh, SolidVoxelization};

use crate::args::*;
use crate::Usage;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Mtd(c) => mtd(c),
        Command::Matvae(c) => matvae(c),
        Command::Voxelize(c) => voxelize(c),
        Command::Lift(a) => lift(a),
        Command::Field(c) => field(c),
        Command::Metrics(c) => metrics(c),
        Command::Elasticity(c) => elasticity(c),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn sink(out: &OutFile) -> Result<Box<dyn Write>> {
    Ok(match &out.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("cannot create {}", p.display()))?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn write_json(out: &OutFile, value: &impl Serialize) -> Result<()> {
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_rows<T: Serialize>(out: &OutFile, rows: &[T], format: Format) -> Result<()> {
    match format {
        Format::Json => write_json(out, &rows),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(sink(out)?);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

fn write_triplets(out: &OutFile, triplets: &[MaterialTriplet]) -> Result<()> {
    let mut w = sink(out)?;
    mtd::write_triplets_csv(&mut w, triplets)?;
    w.flush()?;
    Ok(())
}

fn load_triplets(path: &Path) -> Result<Vec<MaterialTriplet>> {
    mtd::load_triplets(path).with_context(|| format!("reading triplets from {}", path.display()))
}

fn ranges(path: &Option<PathBuf>) -> Result<MaterialRangeDb> {
    match path {
        Some(p) => MaterialRangeDb::load(p).with_context(|| format!("reading ranges from {}", p.display())),
        None => Ok(MaterialRangeDb::reference()),
    }
}

fn load_vae(path: &Path) -> Result<MatVae> {
    MatVae::load(path).with_context(|| format!("reading model {}", path.display()))
}

fn mtd(cmd: MtdCmd) -> Result<()> {
    match cmd {
        MtdCmd::Sample { ranges: r, total, seed, out } => {
            let db = ranges(&r)?;
            write_triplets(&out, &mtd::sample_triplets(&db, total, seed)?)
        }
        MtdCmd::Dedupe { input, out } => {
            let all = load_triplets(&input)?;
            let kept = mtd::dedupe(&all);
            log::info!("kept {} of {} triplets", kept.len(), all.len());
            write_triplets(&out, &kept)
        }
        MtdCmd::Validate { input, ranges: r, format, out } => {
            #[derive(Serialize)]
            struct Row {
                index: usize,
                e_err: f64,
                nu_err: f64,
                rho_err: f64,
                range: String,
                valid: bool,
            }
            let db = ranges(&r)?;
            let rows: Vec<Row> = load_triplets(&input)?
                .iter()
                .enumerate()
                .map(|(index, t)| {
                    let v = mtd::validity_error(t, &db);
                    Row { index, e_err: v.e_err, nu_err: v.nu_err, rho_err: v.rho_err, range: db.ranges()[v.range].name.clone(), valid: v.is_zero() }
                })
                .collect();
            let valid = rows.iter().filter(|r| r.valid).count();
            log::info!("{valid} of {} triplets lie inside a range", rows.len());
            write_rows(&out, &rows, format)
        }
    }
}

fn hyperparams(seed: u64, f: &TrainFlags) -> Hyperparams {
    let d = Hyperparams::default();
    Hyperparams {
        epochs: f.epochs.unwrap_or(d.epochs),
        batch_size: f.batch_size.unwrap_or(d.batch_size),
        lr: f.lr.unwrap_or(d.lr),
        lr_final: f.lr_final.unwrap_or(d.lr_final),
        weight_decay: f.weight_decay.unwrap_or(d.weight_decay),
        grad_clip: f.grad_clip.unwrap_or(d.grad_clip),
        kl_anneal_epochs: f.kl_anneal_epochs.unwrap_or(d.kl_anneal_epochs),
        hidden: f.hidden.unwrap_or(d.hidden),
        blocks: f.blocks.unwrap_or(d.blocks),
        dropout: f.dropout.unwrap_or(d.dropout),
        estimator: match f.estimator {
            Some(Estimator::Mws) => KlEstimator::MinibatchWeighted,
            Some(Estimator::Stratified) => KlEstimator::Stratified,
            None => d.estimator,
        },
        seed,
        ..d
    }
}

fn read_latents(path: &Path) -> Result<Vec<[f64; 2]>> {
    #[derive(serde::Deserialize)]
    struct Row {
        z0: f64,
        z1: f64,
    }
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading latents from {}", path.display()))?;
    r.deserialize::<Row>().map(|row| row.map(|r| [r.z0, r.z1]).map_err(Into::into)).collect()
}

fn matvae(cmd: MatvaeCmd) -> Result<()> {
    match cmd {
        MatvaeCmd::Train { input, seed, out, history, train } => {
            let hyper = hyperparams(seed, &train);
            let data = load_triplets(&input)?;
            let (model, stats) = matvae::train(&data, &hyper)?;
            model.save(&out).with_context(|| format!("writing {}", out.display()))?;
            if let Some(h) = history {
                let mut w = csv::Writer::from_writer(create(&h)?);
                w.write_record(["epoch", "lr", "total", "recon", "mi", "tc", "dim_kl0", "dim_kl1"])?;
                for s in &stats {
                    let l = &s.loss;
                    w.write_record(
                        [s.epoch as f64, s.lr, l.total, l.recon, l.mi, l.tc, l.dim_kl[0], l.dim_kl[1]].map(|v| v.to_string()),
                    )?;
                }
                w.flush()?;
            }
            Ok(())
        }
        MatvaeCmd::Encode { model, input, out } => {
            let m = load_vae(&model)?;
            let z = m.encode_batch(&load_triplets(&input)?)?;
            let mut w = csv::Writer::from_writer(sink(&out)?);
            w.write_record(["z0", "z1"])?;
            for c in z {
                w.write_record([c[0].to_string(), c[1].to_string()])?;
            }
            w.flush()?;
            Ok(())
        }
        MatvaeCmd::Decode { model, input, out } => {
            let m = load_vae(&model)?;
            write_triplets(&out, &m.decode_batch(&read_latents(&input)?)?)
        }
        MatvaeCmd::Interp { model, from, to, steps, naive, out } => {
            if steps < 2 {
                return Err(usage("--steps must be at least 2"));
            }
            let points = if naive {
                (0..steps).map(|k| matvae::naive_interpolate(&from, &to, k as f64 / (steps - 1) as f64)).collect::<Result<Vec<_>, _>>()?
            } else {
                let path = model.ok_or_else(|| usage("--model is required without --naive"))?;
                load_vae(&path)?.interpolate(&from, &to, steps)?
            };
            let mut w = csv::Writer::from_writer(sink(&out)?);
            w.write_record(["t", "e_pa", "nu", "rho_kgm3"])?;
            for (k, p) in points.iter().enumerate() {
                let t = k as f64 / (steps - 1) as f64;
                w.write_record([t, p.e, p.nu, p.rho].map(|v| v.to_string()))?;
            }
            w.flush()?;
            Ok(())
        }
        MatvaeCmd::Sample { model, count, seed, out } => write_triplets(&out, &load_vae(&model)?.sample_prior(count, seed)?),
        MatvaeCmd::ReconstructReport { model, input, ranges: r, format, out } => {
            let m = load_vae(&model)?;
            let db = ranges(&r)?;
            let data = load_triplets(&input)?;
            if data.is_empty() {
                anyhow::bail!("{} holds no triplets", input.display());
            }
            let z = m.encode_batch(&data)?;
            let recon = m.decoder_forward(&z)?;
            let mut mse = [0.0f64; 3];
            for (t, y) in data.iter().zip(&recon) {
                let x = m.normalizer.normalize(t);
                for d in 0..3 {
                    mse[d] += (x[d] - y[d]).powi(2) / data.len() as f64;
                }
            }
            let decoded: Vec<MaterialTriplet> = recon.iter().map(|y| m.to_triplet(*y)).collect();
            let valid = decoded.iter().filter(|t| mtd::validity_error(t, &db).is_zero()).count() as f64 / data.len() as f64;
            #[derive(Serialize)]
            struct Row {
                quantity: &'static str,
                value: f64,
            }
            let rows = [
                Row { quantity: "count", value: data.len() as f64 },
                Row { quantity: "mse_e", value: mse[0] },
                Row { quantity: "mse_nu", value: mse[1] },
                Row { quantity: "mse_rho", value: mse[2] },
                Row { quantity: "valid_fraction", value: valid },
            ];
            match format {
                Format::Json => write_json(
                    &out,
                    &json!({"count": data.len(), "mse": {"e": mse[0], "nu": mse[1], "rho": mse[2]}, "valid_fraction": valid}),
                ),
                Format::Csv => write_rows(&out, &rows, Format::Csv),
            }
        }
    }
}

fn voxelize(cmd: VoxelizeCmd) -> Result<()> {
    match cmd {
        VoxelizeCmd::Mesh { input, r, k_seg, k_all, seed, out } => {
            let seed = match (seed, k_seg.is_some() || k_all.is_some()) {
                (Some(s), _) => s,
                (None, false) => 0,
                (None, true) => return Err(usage("--seed is required with --k-seg or --k-all")),
            };
            let mesh = SegmentedMesh::load_obj(&input).with_context(|| format!("reading {}", input.display()))?;
            let vox = voxelizer::voxelize_segmented(&mesh, r, k_seg, k_all, seed)?;
            log::info!("{} voxels in {} segments", vox.len(), vox.labels.len());
            vox.save(&out).with_context(|| format!("writing {}", out.display()))?;
            Ok(())
        }
        VoxelizeCmd::Splats { input, r, views, out } => {
            let splats = voxelizer::load_splats(&input).with_context(|| format!("reading {}", input.display()))?;
            let vox = voxelizer::voxelize_splats(&splats, r, views)?;
            log::info!("{} voxels", vox.len());
            vox.save(&out).with_context(|| format!("writing {}", out.display()))?;
            Ok(())
        }
    }
}

fn load_voxels(path: &Path) -> Result<SolidVoxelization> {
    SolidVoxelization::load(path).with_context(|| format!("reading voxels from {}", path.display()))
}

fn lift(a: LiftArgs) -> Result<()> {
    let vox = load_voxels(&a.voxels)?;
    let cams = load_cameras(&a.cameras).with_context(|| format!("reading cameras from {}", a.cameras.display()))?;
    if cams.len() != a.maps.len() {
        return Err(usage(format!("{} cameras but {} feature maps", cams.len(), a.maps.len())));
    }
    let views = cams
        .into_iter()
        .zip(&a.maps)
        .map(|(c, p)| Ok((c, FeatureMap::load(p).with_context(|| format!("reading {}", p.display()))?)))
        .collect::<Result<Vec<_>>>()?;
    let features = lift_features(&vox.centers, &views)?;
    let hidden = features.visible.iter().filter(|v| !**v).count();
    if hidden > 0 {
        log::warn!("{hidden} voxels are outside every view and get zero features");
    }
    let mut w = sink(&a.out)?;
    features.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn load_features(path: &Path) -> Result<VoxelFeatures> {
    VoxelFeatures::read_csv(File::open(path).with_context(|| format!("opening {}", path.display()))?)
        .with_context(|| format!("reading features from {}", path.display()))
}

fn field(cmd: FieldCmd) -> Result<()> {
    match cmd {
        FieldCmd::Train { inputs, materials, vae, seed, out, history, epochs, batch_size, lr, lr_final, hidden, subsample_cap } => {
            let data = AnnotatedVoxelSet::load(&inputs.voxels, &inputs.features, &materials)?;
            let model = load_vae(&vae)?;
            let d = HeadHyperparams::default();
            let hyper = HeadHyperparams {
                epochs: epochs.unwrap_or(d.epochs),
                batch_size: batch_size.unwrap_or(d.batch_size),
                lr: lr.unwrap_or(d.lr),
                lr_final: lr_final.unwrap_or(d.lr_final),
                hidden: hidden.unwrap_or(d.hidden),
                subsample_cap: subsample_cap.unwrap_or(d.subsample_cap),
                seed,
                ..d
            };
            let (head, losses) = train_head(&data, &model, &hyper)?;
            head.save(&out).with_context(|| format!("writing {}", out.display()))?;
            if let Some(h) = history {
                let mut w = csv::Writer::from_writer(create(&h)?);
                w.write_record(["epoch", "loss"])?;
                for (e, l) in losses.iter().enumerate() {
                    w.write_record([e.to_string(), l.to_string()])?;
                }
                w.flush()?;
            }
            Ok(())
        }
        FieldCmd::Predict { inputs, head, vae, merge, out } => {
            let vox = load_voxels(&inputs.voxels)?;
            let features = load_features(&inputs.features)?;
            let head = PredictorHead::load(&head).with_context(|| format!("reading head {}", head.display()))?;
            let mut f = predict_field(&head, &load_vae(&vae)?, &vox, &features)?;
            if merge {
                f = transfer::merge_tolerances(&f, MERGE_TOL);
            }
            let mut w = sink(&out)?;
            write_material_sidecar(&mut w, &f.materials)?;
            w.flush()?;
            Ok(())
        }
    }
}

fn load_materials(path: &Path) -> Result<Vec<MaterialTriplet>> {
    load_material_sidecar(path).with_context(|| format!("reading materials from {}", path.display()))
}

fn metrics(cmd: MetricsCmd) -> Result<()> {
    match cmd {
        MetricsCmd::Field { pred, gt, log_base, format, out } => {
            if pred.len() != gt.len() {
                return Err(usage(format!("{} --pred files but {} --gt files", pred.len(), gt.len())));
            }
            let objects = pred
                .iter()
                .zip(&gt)
                .map(|(p, g)| Ok((load_materials(p)?, load_materials(g)?)))
                .collect::<Result<Vec<_>>>()?;
            let base = match log_base {
                Base::E => LogBase::Natural,
                Base::Ten => LogBase::Ten,
            };
            write_rows(&out, &report_rows(&field_reports(&objects, base)?), format)
        }
        MetricsCmd::Mass { materials, volume, format, out } => {
            let rho: Vec<f64> = load_materials(&materials)?.iter().map(|t| t.rho).collect();
            let mass = metrics::mass_estimate(&rho, volume)?;
            #[derive(Serialize)]
            struct Row {
                mass_kg: f64,
                voxels: usize,
                volume_m3: f64,
            }
            let row = Row { mass_kg: mass, voxels: rho.len(), volume_m3: volume };
            match format {
                Format::Json => write_json(&out, &row),
                Format::Csv => write_rows(&out, &[row], Format::Csv),
            }
        }
        MetricsCmd::Dist { a, b, property, bins, log, format, out } => {
            let (ta, tb) = (load_triplets(&a)?, load_triplets(&b)?);
            let props: Vec<Property> = if property.is_empty() {
                Property::ALL.to_vec()
            } else {
                property
                    .iter()
                    .map(|p| match p {
                        Prop::E => Property::E,
                        Prop::Nu => Property::Nu,
                        Prop::Rho => Property::Rho,
                    })
                    .collect()
            };
            #[derive(Serialize)]
            struct Row {
                property: &'static str,
                metric: &'static str,
                value: f64,
            }
            let mut rows = Vec::new();
            for p in props {
                let values = |ts: &[MaterialTriplet]| -> Vec<f64> {
                    ts.iter().map(|t| if log && p != Property::Nu { p.of(t).log10() } else { p.of(t) }).collect()
                };
                let (va, vb) = (values(&ta), values(&tb));
                rows.push(Row { property: p.name(), metric: "w1", value: metrics::wasserstein_1d(&va, &vb, 1)? });
                rows.push(Row { property: p.name(), metric: "w2", value: metrics::wasserstein_1d(&va, &vb, 2)? });
                rows.push(Row { property: p.name(), metric: "kl", value: metrics::kl_histogram(&va, &vb, bins)? });
            }
            write_rows(&out, &rows, format)
        }
    }
}

fn elasticity(cmd: ElasticityCmd) -> Result<()> {
    let ElasticityCmd::Eval { e, nu, f, model, out } = cmd;
    let f: transfer::Mat3 = match f {
        Some(v) if v.len() == 9 => std::array::from_fn(|i| std::array::from_fn(|j| v[3 * i + j])),
        Some(v) => return Err(usage(format!("--f needs 9 values, got {}", v.len()))),
        None => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };
    let (lambda, mu) = transfer::lame(e, nu)?;
    let models = if model.is_empty() { vec![Model::Corotational, Model::NeoHookean] } else { model };
    let mut results = Vec::new();
    for m in models {
        let (name, (w, tau)) = match m {
            Model::Corotational => ("corotational", transfer::corotational(&f, lambda, mu)?),
            Model::NeoHookean => ("neo_hookean", transfer::neo_hookean(&f, lambda, mu)?),
        };
        results.push(json!({"model": name, "energy_density": w, "kirchhoff_stress": tau}));
    }
    write_json(&out, &json!({"lambda": lambda, "mu": mu, "f": f, "results": results}))
}
