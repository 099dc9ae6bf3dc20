use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use pointcaps::dataio::{
    derive_seed, generate_dataset, save_checkpoint, Checkpoint, CloudFormat, Family,
};
use pointcaps::gradcheck::run_suite;
use pointcaps::latent::{
    accuracy, classify as predict_class, flatten_latent, interpolate_part, match_by_cosine,
    match_part_capsules, train_linear_classifier, MatchMode,
};
use pointcaps::losses::seg_metrics;
use pointcaps::partseg::{
    gt_capsule_labels, mode_filter, one_hot, segment_points, train_partnet as fit_partnet,
    transfer_labels, PartSample,
};
use pointcaps::trainer::{checkpoint_of, eval_ae, train_ae};
use pointcaps::{
    CapsuleSelection, Error, PartNet, PartNetConfig, PointCapsNet, PointCloud, Reconstruction,
    Result, RunConfig,
};

use crate::data::{
    load_dir, load_model, load_partnet, numbered, output_format, partnet_meta, prepare, read_any,
    require, widen, write_output,
};
use crate::{
    ClassifyArgs, EvalArgs, GenDataArgs, PartArgs, ReconstructArgs, SegmentArgs, TrainArgs,
    TrainPartnetArgs,
};

const TRAIN_DATA_STREAM: u64 = 1;
const HELD_OUT_STREAM: u64 = 2;

fn labeled_output(recon: &Reconstruction, category: Option<usize>) -> Result<PointCloud> {
    let cloud = PointCloud::with_labels(recon.points.clone(), recon.attribution.clone())?;
    Ok(match category {
        Some(c) => cloud.with_category(c),
        None => cloud,
    })
}

pub fn gen_data(cfg: &RunConfig, a: GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let dir = require("out", &a.out.or_else(|| cfg.paths.out.clone()))?.to_path_buf();
    let format: CloudFormat = a.format.parse()?;
    let d = &cfg.data;
    let families: Vec<Family> = d.families.clone();
    let n = cfg.model.encoder.n_points;
    let sets = [
        ("train", d.per_family, TRAIN_DATA_STREAM),
        ("held-out", d.held_out_per_family, HELD_OUT_STREAM),
    ];
    let mut written = Vec::new();
    for (name, count, stream) in sets {
        if count == 0 {
            continue;
        }
        let clouds =
            generate_dataset(&families, count, n, d.jitter, derive_seed(cfg.seed, stream))?;
        written.push((name, count, clouds));
    }
    for (name, count, clouds) in &written {
        let sub = dir.join(name);
        fs::create_dir_all(&sub)?;
        for (i, cloud) in clouds.iter().enumerate() {
            let family = families[i / count];
            let path = sub.join(format!("{i:03}-{}.{}", family.as_str(), format.as_str()));
            write_output(cloud, &path, format)?;
        }
        writeln!(
            out,
            "wrote set={name} shapes={} dir={}",
            clouds.len(),
            sub.display()
        )?;
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let input = require("in", &a.input.or_else(|| cfg.paths.data.clone()))?.to_path_buf();
    let dest = require("out", &a.out.or_else(|| cfg.paths.out.clone()))?.to_path_buf();
    let (mut net, start) = match &a.checkpoint {
        Some(path) => {
            let (net, ckpt) = load_model(path)?;
            let epoch = ckpt
                .meta
                .get("epoch")
                .and_then(|e| e.parse().ok())
                .unwrap_or(0);
            (net, epoch)
        }
        None => (PointCapsNet::<f32>::new(cfg.model.clone(), cfg.seed)?, 0),
    };
    let (_, clouds) = load_dir(&input, net.config.encoder.n_points, cfg.seed)?;
    let mut log: Box<dyn Write> = match &cfg.paths.log {
        Some(path) => Box::new(File::create(path)?),
        None => Box::new(std::io::sink()),
    };
    let mut tee = Tee {
        a: out,
        b: log.as_mut(),
    };
    let report = train_ae(&clouds, &cfg.train, &mut net, start, &mut tee)?;
    let epochs = start.max(cfg.train.epochs);
    if let Some(dir) = dest.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&checkpoint_of(&net, epochs, cfg.seed), &dest)?;
    let last = report
        .epoch_loss
        .last()
        .map_or("none".to_string(), |l| format!("{l:.6}"));
    writeln!(
        out,
        "trained epochs={epochs} loss={last} checkpoint={}",
        dest.display()
    )?;
    Ok(())
}

struct Tee<'a> {
    a: &'a mut dyn Write,
    b: &'a mut dyn Write,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.a.write_all(buf)?;
        self.b.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.a.flush()?;
        self.b.flush()
    }
}

pub fn eval(cfg: &RunConfig, a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let input = require("in", &a.input.or_else(|| cfg.paths.data.clone()))?.to_path_buf();
    let ckpt = require(
        "checkpoint",
        &a.checkpoint.or_else(|| cfg.paths.checkpoint.clone()),
    )?
    .to_path_buf();
    let (net, _) = load_model(&ckpt)?;
    let (_, clouds) = load_dir(&input, net.config.encoder.n_points, cfg.seed)?;
    let r = eval_ae(&clouds, &net, cfg.train.eval_grid_seed)?;
    let line = format!(
        "chamfer={:.6} chamfer_e3={:.3} mean_spread={:.6} shapes={}\n",
        r.chamfer,
        r.chamfer_e3,
        r.mean_spread,
        clouds.len()
    );
    out.write_all(line.as_bytes())?;
    if let Some(path) = a.out {
        fs::write(path, line)?;
    }
    Ok(())
}

struct Single {
    net: PointCapsNet<f32>,
    cloud: PointCloud,
    out: std::path::PathBuf,
    format: CloudFormat,
}

fn single(cfg: &RunConfig, a: ReconstructArgs) -> Result<Single> {
    let input = require("in", &a.input.or_else(|| cfg.paths.data.clone()))?.to_path_buf();
    let ckpt = require(
        "checkpoint",
        &a.checkpoint.or_else(|| cfg.paths.checkpoint.clone()),
    )?
    .to_path_buf();
    let out = require("out", &a.out.or_else(|| cfg.paths.out.clone()))?.to_path_buf();
    let format = output_format(&a.format, &out)?;
    let (net, _) = load_model(&ckpt)?;
    let cloud = prepare(&read_any(&input)?, net.config.encoder.n_points, cfg.seed, 0)?;
    Ok(Single {
        net,
        cloud,
        out,
        format,
    })
}

pub fn reconstruct(cfg: &RunConfig, a: ReconstructArgs, out: &mut dyn Write) -> Result<()> {
    let s = single(cfg, a)?;
    let grid = s.net.grid(s.net.config.decoder.grid_seed);
    let recon = s.net.reconstruct(&s.cloud, &grid)?;
    write_output(&labeled_output(&recon, s.cloud.category)?, &s.out, s.format)?;
    writeln!(
        out,
        "reconstructed points={} capsules={} out={}",
        recon.len(),
        recon.capsule_count(),
        s.out.display()
    )?;
    Ok(())
}

pub fn segment(cfg: &RunConfig, a: SegmentArgs, out: &mut dyn Write) -> Result<()> {
    let partnet = load_partnet(&a.partnet)?;
    let s = single(cfg, a.io)?;
    let category = s.cloud.category.unwrap_or(0);
    let onehot = one_hot(category, partnet.config.category_count)?;
    let grid = s.net.grid(s.net.config.decoder.grid_seed);
    let latent = s.net.encode(&s.cloud)?;
    let mut seg = segment_points(&s.net, &partnet, &latent, &onehot, &grid)?;
    if cfg.filter_k > 1 {
        seg = mode_filter(&seg, cfg.filter_k)?;
    }
    seg = seg.with_category(category);
    write_output(&seg, &s.out, s.format)?;
    let mut line = format!("segmented points={} out={}", seg.len(), s.out.display());
    if let Ok(gt) = s.cloud.labels() {
        let pred = transfer_labels(&s.cloud.points, &seg)?;
        let parts = partnet
            .config
            .part_count
            .max(gt.iter().max().map_or(0, |m| m + 1));
        let m = seg_metrics(&pred, gt, parts)?;
        line.push_str(&format!(
            " accuracy={:.6} mean_iou={:.6}",
            m.accuracy, m.mean_iou
        ));
    }
    writeln!(out, "{line}")?;
    Ok(())
}

pub fn train_partnet(cfg: &RunConfig, a: TrainPartnetArgs, out: &mut dyn Write) -> Result<()> {
    let input = require("in", &a.input.or_else(|| cfg.paths.data.clone()))?.to_path_buf();
    let ckpt = require(
        "checkpoint",
        &a.checkpoint.or_else(|| cfg.paths.checkpoint.clone()),
    )?
    .to_path_buf();
    let dest = require("out", &a.out.or_else(|| cfg.paths.out.clone()))?.to_path_buf();
    let (ae, _) = load_model(&ckpt)?;
    let (_, clouds) = load_dir(&input, ae.config.encoder.n_points, cfg.seed)?;
    let grid = ae.grid(ae.config.decoder.grid_seed);
    let mut samples = Vec::with_capacity(clouds.len());
    for cloud in &clouds {
        let latent = ae.encode(cloud)?;
        let labeling = gt_capsule_labels(&ae, &latent, &grid, cloud)?;
        samples.push(PartSample {
            latent: widen(&latent)?,
            category: cloud.category.unwrap_or(0),
            labeling,
        });
    }
    let config = PartNetConfig {
        category_count: samples.iter().map(|s| s.category + 1).max().unwrap_or(1),
        part_count: samples
            .iter()
            .map(|s| s.labeling.part_count)
            .max()
            .unwrap_or(1),
        ..cfg.partnet.clone()
    };
    let mut net = PartNet::new(config, ae.config.routing.latent_dim)?;
    let report = fit_partnet(&samples, &mut net)?;
    if let Some(dir) = dest.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(
        &Checkpoint::from_store(&net.store, partnet_meta(&net)),
        &dest,
    )?;
    let final_accuracy = samples
        .iter()
        .map(|s| {
            let pred = net.predict(&s.latent, &one_hot(s.category, net.config.category_count)?)?;
            Ok(pred
                .iter()
                .zip(&s.labeling.labels)
                .filter(|(p, l)| p == l)
                .count())
        })
        .sum::<Result<usize>>()? as f64
        / samples
            .iter()
            .map(|s| s.labeling.labels.len())
            .sum::<usize>() as f64;
    let loss = report
        .epoch_loss
        .last()
        .map_or("none".to_string(), |l| format!("{l:.6}"));
    writeln!(
        out,
        "partnet epochs={} loss={loss} capsule_accuracy={final_accuracy:.6} out={}",
        net.config.epochs,
        dest.display()
    )?;
    Ok(())
}

pub fn interpolate(cfg: &RunConfig, a: PartArgs, ts: &[f64], out: &mut dyn Write) -> Result<()> {
    if let Some(&bad) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Config(format!("--t {bad} is outside [0, 1]")));
    }
    let ckpt = require(
        "checkpoint",
        &a.checkpoint.or_else(|| cfg.paths.checkpoint.clone()),
    )?
    .to_path_buf();
    let dest = require("out", &a.out.or_else(|| cfg.paths.out.clone()))?.to_path_buf();
    let format = output_format(&a.format, &dest)?;
    let (net, _) = load_model(&ckpt)?;
    let n = net.config.encoder.n_points;
    let src = prepare(&read_any(&a.input[0])?, n, cfg.seed, 0)?;
    let tgt = prepare(&read_any(&a.input[1])?, n, cfg.seed, 1)?;
    let grid = net.grid(net.config.decoder.grid_seed);
    let (ls, lt) = (net.encode(&src)?, net.encode(&tgt)?);
    let sel = match (&a.capsules, a.part) {
        (Some(list), _) => match cfg.latent_match {
            MatchMode::Labels => CapsuleSelection::new(list.clone())?,
            MatchMode::Cosine => match_by_cosine(&ls, &lt, list)?,
        },
        (None, Some(part)) => {
            let la = gt_capsule_labels(&net, &ls, &grid, &src)?;
            match cfg.latent_match {
                MatchMode::Labels => {
                    match_part_capsules(&la, &gt_capsule_labels(&net, &lt, &grid, &tgt)?, part)?
                }
                MatchMode::Cosine => match_by_cosine(&ls, &lt, &la.capsules_of(part))?,
            }
        }
        (None, None) => return Err(Error::Config("`--part` or `--capsules` is required".into())),
    };
    let sel = sel.with_ids(
        a.input[0].display().to_string(),
        a.input[1].display().to_string(),
    );
    let mut outputs = Vec::with_capacity(ts.len());
    for &t in ts {
        let mixed = interpolate_part(&ls, &lt, &sel, t)?;
        outputs.push(labeled_output(&net.decode(&mixed, &grid)?, src.category)?);
    }
    for (i, (cloud, t)) in outputs.iter().zip(ts).enumerate() {
        let path = numbered(&dest, i, ts.len());
        write_output(cloud, &path, format)?;
        writeln!(out, "t={t} capsules={} out={}", sel.len(), path.display())?;
    }
    Ok(())
}

type Features = (Vec<String>, Vec<Vec<f64>>, Vec<usize>);

pub fn classify(cfg: &RunConfig, a: ClassifyArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = require(
        "checkpoint",
        &a.checkpoint.or_else(|| cfg.paths.checkpoint.clone()),
    )?
    .to_path_buf();
    let (net, _) = load_model(&ckpt)?;
    let n = net.config.encoder.n_points;
    let features = |dir: &Path| -> Result<Features> {
        let (files, clouds) = load_dir(dir, n, cfg.seed)?;
        let mut xs = Vec::with_capacity(clouds.len());
        let mut ys = Vec::with_capacity(clouds.len());
        for (file, cloud) in files.iter().zip(&clouds) {
            let category = cloud
                .category
                .ok_or_else(|| Error::Label(format!("{} carries no category", file.display())))?;
            xs.push(flatten_latent(&net.encode(cloud)?));
            ys.push(category);
        }
        Ok((
            files
                .iter()
                .map(|f| {
                    f.file_name()
                        .unwrap_or_default()
                        .to_string_lossy()
                        .into_owned()
                })
                .collect(),
            xs,
            ys,
        ))
    };
    let (_, train_x, train_y) = features(&a.input[0])?;
    let (names, test_x, test_y) = features(&a.input[1])?;
    let clf = train_linear_classifier(&train_x, &train_y, &cfg.classifier)?;
    let mut counts = BTreeMap::new();
    for &y in &train_y {
        *counts.entry(y).or_insert(0usize) += 1;
    }
    let majority = counts
        .iter()
        .max_by_key(|&(c, k)| (*k, std::cmp::Reverse(*c)))
        .map(|(&c, _)| c)
        .unwrap_or(0);
    let baseline = test_y.iter().filter(|&&y| y == majority).count() as f64 / test_y.len() as f64;
    let acc = accuracy(&clf, &test_x, &test_y)?;
    let train_acc = accuracy(&clf, &train_x, &train_y)?;
    writeln!(
        out,
        "accuracy={acc:.6} baseline={baseline:.6} train_accuracy={train_acc:.6} classes={} test_shapes={}",
        clf.class_count(),
        test_y.len()
    )?;
    if let Some(path) = a.out {
        let mut text = String::new();
        for ((name, x), y) in names.iter().zip(&test_x).zip(&test_y) {
            text.push_str(&format!(
                "{name} predicted={} actual={y}\n",
                predict_class(&clf, x)?
            ));
        }
        fs::write(path, text)?;
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let results = run_suite(cfg.seed)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "pass" } else { "fail" };
        writeln!(
            out,
            "gradcheck op={} coordinates={} max_rel_error={:.3e} {status}",
            r.name, r.coordinates, r.max_rel_error
        )?;
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    writeln!(
        out,
        "gradcheck cases={} failed={}",
        results.len(),
        failed.len()
    )?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradientMismatch(failed.join(",")))
    }
}
