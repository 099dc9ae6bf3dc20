use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pointcaps::dataio::config::model_from_meta;
use pointcaps::dataio::{
    derive_seed, load_checkpoint, normalize, read_cloud, resample, write_cloud, Checkpoint,
    CloudFormat,
};
use pointcaps::latent::flatten_latent;
use pointcaps::{
    Error, LatentCapsules, PartNet, PartNetConfig, PointCapsNet, PointCloud, Result, Tensor,
};

const PREPARE_STREAM: u64 = 3 << 40;

pub fn require<'a>(flag: &str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("`--{flag}` is required")))
}

/// Cloud files of `dir`, sorted by name.
pub fn list_clouds(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && CloudFormat::from_path(&path).is_ok() {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(files)
}

pub fn read_any(path: &Path) -> Result<PointCloud> {
    read_cloud(path, CloudFormat::from_path(path)?)
}

/// Resamples to `n` points when the size differs, then normalizes.
pub fn prepare(cloud: &PointCloud, n: usize, seed: u64, index: usize) -> Result<PointCloud> {
    if cloud.len() == n {
        normalize(cloud)
    } else {
        normalize(&resample(
            cloud,
            n,
            derive_seed(seed, PREPARE_STREAM | index as u64),
        )?)
    }
}

pub fn load_dir(dir: &Path, n: usize, seed: u64) -> Result<(Vec<PathBuf>, Vec<PointCloud>)> {
    let files = list_clouds(dir)?;
    let clouds = files
        .iter()
        .enumerate()
        .map(|(i, f)| prepare(&read_any(f)?, n, seed, i))
        .collect::<Result<_>>()?;
    Ok((files, clouds))
}

pub fn load_model(path: &Path) -> Result<(PointCapsNet<f32>, Checkpoint)> {
    let ckpt = load_checkpoint(path)?;
    let config = model_from_meta(&ckpt.meta)?;
    let blank = PointCapsNet::<f32>::new(config.clone(), 0)?;
    let store = ckpt.restore_into(&blank.store)?;
    Ok((PointCapsNet::from_parts(config, store)?, ckpt))
}

fn meta_value<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    meta.get(key)
        .ok_or_else(|| Error::Truncated(format!("missing `{key}`")))?
        .parse()
        .map_err(|_| Error::Truncated(format!("bad `{key}`")))
}

pub fn partnet_meta(net: &PartNet) -> BTreeMap<String, String> {
    let c = &net.config;
    let widths: Vec<String> = c.hidden_widths.iter().map(usize::to_string).collect();
    BTreeMap::from([
        (
            "partnet.category_count".to_string(),
            c.category_count.to_string(),
        ),
        ("partnet.part_count".to_string(), c.part_count.to_string()),
        ("partnet.hidden_widths".to_string(), widths.join(",")),
        ("partnet.latent_dim".to_string(), net.latent_dim.to_string()),
    ])
}

pub fn load_partnet(path: &Path) -> Result<PartNet> {
    let ckpt = load_checkpoint(path)?;
    let m = &ckpt.meta;
    let widths: String = meta_value(m, "partnet.hidden_widths")?;
    let hidden_widths = if widths.is_empty() {
        Vec::new()
    } else {
        widths
            .split(',')
            .map(|w| {
                w.parse()
                    .map_err(|_| Error::Truncated("bad hidden width".into()))
            })
            .collect::<Result<_>>()?
    };
    let config = PartNetConfig {
        category_count: meta_value(m, "partnet.category_count")?,
        part_count: meta_value(m, "partnet.part_count")?,
        hidden_widths,
        ..PartNetConfig::default()
    };
    let mut net = PartNet::new(config, meta_value(m, "partnet.latent_dim")?)?;
    net.store = ckpt.restore_into(&net.store)?;
    Ok(net)
}

pub fn widen(latent: &LatentCapsules<f32>) -> Result<LatentCapsules<f64>> {
    Ok(LatentCapsules {
        capsules: Tensor::new(vec![latent.count(), latent.dim()], flatten_latent(latent))?,
    })
}

pub fn output_format(format: &Option<String>, out: &Path) -> Result<CloudFormat> {
    match format {
        Some(f) => f.parse(),
        None => CloudFormat::from_path(out),
    }
}

pub fn write_output(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_cloud(cloud, path, format)
}

/// `out` for a single output, otherwise `out` with `-NNN` before the extension.
pub fn numbered(out: &Path, index: usize, total: usize) -> PathBuf {
    if total == 1 {
        return out.to_path_buf();
    }
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}-{index:03}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{index:03}"),
    };
    out.with_file_name(name)
}
