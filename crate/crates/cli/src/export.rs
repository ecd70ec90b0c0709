//! Attribution map export as 8-bit PGM images.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use impactx_core::data::LabeledDataset;
use impactx_core::explainer::{partition_shap, FusedScores, Masker};
use impactx_core::model::ImpactxModel;
use impactx_core::trainer::csv_writer;
use impactx_core::{Error, Result};

/// Min-max scales to 0..=255; a constant (or non-finite) map becomes
/// mid-gray.
pub fn to_gray8(values: &[f32]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    if !(span > 0.0 && span.is_finite()) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - lo) / span * 255.0).round() as u8)
        .collect()
}

/// Binary PGM (`P5`) with an optional comment line.
pub fn write_pgm(
    path: &Path,
    width: usize,
    height: usize,
    pixels: &[u8],
    comment: &str,
) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Data(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut f =
        fs::File::create(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut bytes = Vec::with_capacity(pixels.len() + 64);
    bytes.extend_from_slice(b"P5\n");
    if !comment.is_empty() {
        bytes.extend_from_slice(format!("# {comment}\n").as_bytes());
    }
    bytes.extend_from_slice(format!("{width} {height}\n255\n").as_bytes());
    bytes.extend_from_slice(pixels);
    f.write_all(&bytes)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Reads back a `P5` file written by [`write_pgm`]: (width, height, pixels).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let bad = || Error::Data(format!("{} is not a binary PGM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(bad)?
            + pos;
        let line = std::str::from_utf8(&bytes[pos..end]).map_err(|_| bad())?;
        if !line.starts_with('#') {
            fields.extend(line.split_whitespace().map(str::to_string));
        }
        pos = end + 1;
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let pixels = bytes[pos..].to_vec();
    if pixels.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, pixels))
}

/// Writes, for the first `n` samples of `data`, the channel-averaged input,
/// the decoder map and optionally an external attribution map of the
/// fused classifier, plus `legend.csv` with the prediction and its score.
/// Returns the image paths.
pub fn export_maps(
    model: &ImpactxModel,
    data: &LabeledDataset,
    n: usize,
    external: Option<(&Masker, usize)>,
    out: &Path,
    meta: &[(&str, String)],
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
    let subset = data.take(n)?;
    let [c, h, w] = subset.image_shape();
    let comment: Vec<String> = meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let comment = comment.join(" ");
    let legend_path = out.join("legend.csv");
    let mut legend = csv_writer(&legend_path, meta)?;
    legend.write_record(["sample_id", "label", "prediction", "score", "files"])?;
    let mut written = Vec::new();
    for i in 0..subset.len() {
        let id = subset.ids()[i];
        let x = subset.image(i);
        let batch = x.clone().reshape(vec![1, c, h, w])?;
        let pred = model.predict_impactx(&batch)?;
        let class = pred.classes[0];
        let score = pred.probs.data()[class];

        let plane = h * w;
        let gray: Vec<f32> = (0..plane)
            .map(|p| (0..c).map(|ch| x.data()[ch * plane + p]).sum::<f32>() / c as f32)
            .collect();
        let mut images = vec![("input", gray), ("decoder", pred.maps.data().to_vec())];
        if let Some((masker, budget)) = external {
            let e = partition_shap(&FusedScores(model), &x, class, masker, budget, id)?;
            images.push(("shap", e.map.values.into_data()));
        }
        let mut names = Vec::new();
        for (kind, values) in images {
            let name = format!("sample_{id:05}_{kind}.pgm");
            let path = out.join(&name);
            write_pgm(&path, w, h, &to_gray8(&values), &comment)?;
            names.push(name);
            written.push(path);
        }
        legend.write_record([
            id.to_string(),
            subset.labels()[i].to_string(),
            class.to_string(),
            score.to_string(),
            names.join(";"),
        ])?;
    }
    legend
        .flush()
        .map_err(|e| Error::Data(format!("{}: {e}", legend_path.display())))?;
    Ok(written)
}
