//! On-disk formats: dataset directories (`mvds-v1`), model files
//! (`mvmodel-v1`), trajectory and fit-label tables, JSON reports and a
//! content-hashed file manifest.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{FitLabel, ProbeFrame};
use crate::distribution::{AugmentationInfo, BackgroundPatch, Dataset, DistParams, Sample, SamplingMode};
use crate::error::{Error, Result};
use crate::network::Model;

pub const DATASET_SCHEMA: &str = "mvds-v1";
pub const MODEL_SCHEMA: &str = "mvmodel-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SampleFormat {
    #[default]
    Csv,
    Bin,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    schema: String,
    n: usize,
    seed: u64,
    mode: SamplingMode,
    format: SampleFormat,
    params: DistParams,
    #[serde(default)]
    augmentation: Option<AugmentationInfo>,
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

fn join_floats(v: &[f64]) -> String {
    let mut s = String::with_capacity(v.len() * 20);
    for (j, x) in v.iter().enumerate() {
        if j > 0 {
            s.push(' ');
        }
        s.push_str(&x.to_string());
    }
    s
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Malformed(format!("bad number {t:?}: {e}"))))
        .collect()
}

/// Writes `params.json` plus `samples.csv` or `samples.bin` into `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset, format: SampleFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let header = DatasetHeader {
        schema: DATASET_SCHEMA.into(),
        n: dataset.len(),
        seed: dataset.seed,
        mode: dataset.mode,
        format,
        params: dataset.params.clone(),
        augmentation: dataset.augmented_from.clone(),
    };
    let hp = dir.join("params.json");
    write_json(&hp, &header)?;
    let sp = match format {
        SampleFormat::Csv => {
            let p = dir.join("samples.csv");
            write_samples_csv(&p, dataset)?;
            p
        }
        SampleFormat::Bin => {
            let p = dir.join("samples.bin");
            write_samples_bin(&p, dataset)?;
            p
        }
    };
    Ok(vec![hp, sp])
}

fn write_samples_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample", "patch", "kind", "k", "alpha", "y", "spurious", "payload"])?;
    let slot = ds.params.spurious.as_ref().map(|s| s.slot);
    for (i, s) in ds.samples.iter().enumerate() {
        let (i, y) = (i.to_string(), s.y.to_string());
        w.write_record([&i, &s.p_star.to_string(), "feature", &s.k_star.to_string(), "0", &y, "0", ""])?;
        w.write_record([&i, &s.p_xi.to_string(), "noise", "0", "0", &y, "0", &join_floats(&s.xi)])?;
        for (j, b) in s.background.iter().enumerate() {
            let sp = if s.has_spurious && slot == Some(j) { "1" } else { "0" };
            let payload = b.zeta.as_deref().map(join_floats).unwrap_or_default();
            w.write_record([&i, &b.patch.to_string(), "background", &b.k.to_string(), &b.alpha.to_string(), &y, sp, &payload])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize) -> Result<&'a str> {
    rec.get(idx).ok_or_else(|| Error::Malformed(format!("missing column {idx}")))
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Malformed(format!("bad field {s:?}")))
}

fn read_samples_csv(path: &Path, n: usize, d: usize) -> Result<Vec<Sample>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: Vec<Sample> = Vec::with_capacity(n);
    for rec in r.records() {
        let rec = rec?;
        let i: usize = num(field(&rec, 0)?)?;
        let patch: usize = num(field(&rec, 1)?)?;
        let kind = field(&rec, 2)?;
        let k: usize = num(field(&rec, 3)?)?;
        let alpha: f64 = num(field(&rec, 4)?)?;
        let y: i8 = num(field(&rec, 5)?)?;
        let spurious = field(&rec, 6)? == "1";
        let payload = parse_floats(field(&rec, 7)?)?;
        if i == out.len() {
            out.push(Sample { y, k_star: 0, p_star: 0, p_xi: 0, xi: vec![], background: vec![], has_spurious: false });
        } else if i + 1 != out.len() {
            return Err(Error::Malformed(format!("sample {i} out of order")));
        }
        let s = out.last_mut().expect("pushed above");
        match kind {
            "feature" => {
                s.k_star = k;
                s.p_star = patch;
            }
            "noise" => {
                if payload.len() != d {
                    return Err(Error::DimensionMismatch { expected: d, got: payload.len() });
                }
                s.p_xi = patch;
                s.xi = payload;
            }
            "background" => {
                let zeta = if payload.is_empty() { None } else { Some(payload) };
                s.has_spurious |= spurious;
                s.background.push(BackgroundPatch { patch, alpha, k, zeta });
            }
            other => return Err(Error::Malformed(format!("unknown patch kind {other:?}"))),
        }
    }
    if out.len() != n {
        return Err(Error::Malformed(format!("expected {n} samples, found {}", out.len())));
    }
    Ok(out)
}

struct ByteWriter<W: Write>(W);

impl<W: Write> ByteWriter<W> {
    fn u32(&mut self, v: usize) -> Result<()> {
        Ok(self.0.write_all(&(v as u32).to_le_bytes())?)
    }
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.0.write_all(&[v])?)
    }
    fn f64s(&mut self, v: &[f64]) -> Result<()> {
        for x in v {
            self.0.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }
}

struct ByteReader<R: Read>(R);

impl<R: Read> ByteReader<R> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take::<4>()?) as usize)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn f64s(&mut self, len: usize) -> Result<Vec<f64>> {
        (0..len).map(|_| Ok(f64::from_le_bytes(self.take::<8>()?))).collect()
    }
}

fn write_samples_bin(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = ByteWriter(BufWriter::new(File::create(path)?));
    w.0.write_all(DATASET_SCHEMA.as_bytes())?;
    w.u32(ds.len())?;
    w.u32(ds.params.d)?;
    for s in &ds.samples {
        w.u8(s.y as u8)?;
        w.u32(s.k_star)?;
        w.u32(s.p_star)?;
        w.u32(s.p_xi)?;
        w.u8(u8::from(s.has_spurious))?;
        w.f64s(&s.xi)?;
        w.u32(s.background.len())?;
        for b in &s.background {
            w.u32(b.patch)?;
            w.f64s(&[b.alpha])?;
            w.u32(b.k)?;
            match &b.zeta {
                Some(z) => {
                    w.u8(1)?;
                    w.f64s(z)?;
                }
                None => w.u8(0)?,
            }
        }
    }
    w.0.flush()?;
    Ok(())
}

fn read_samples_bin(path: &Path, n: usize, d: usize) -> Result<Vec<Sample>> {
    let mut r = ByteReader(BufReader::new(File::open(path)?));
    let magic = r.take::<7>()?;
    if magic != DATASET_SCHEMA.as_bytes() {
        return Err(Error::Schema { expected: DATASET_SCHEMA.into(), found: String::from_utf8_lossy(&magic).into() });
    }
    let (nn, dd) = (r.u32()?, r.u32()?);
    if nn != n || dd != d {
        return Err(Error::Malformed(format!("header says n={nn}, d={dd}; params say n={n}, d={d}")));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let y = r.u8()? as i8;
        let k_star = r.u32()?;
        let p_star = r.u32()?;
        let p_xi = r.u32()?;
        let has_spurious = r.u8()? == 1;
        let xi = r.f64s(d)?;
        let nb = r.u32()?;
        let mut background = Vec::with_capacity(nb);
        for _ in 0..nb {
            let patch = r.u32()?;
            let alpha = r.f64s(1)?[0];
            let k = r.u32()?;
            let zeta = if r.u8()? == 1 { Some(r.f64s(d)?) } else { None };
            background.push(BackgroundPatch { patch, alpha, k, zeta });
        }
        out.push(Sample { y, k_star, p_star, p_xi, xi, background, has_spurious });
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let header: DatasetHeader = read_json(&dir.join("params.json"))?;
    if header.schema != DATASET_SCHEMA {
        return Err(Error::Schema { expected: DATASET_SCHEMA.into(), found: header.schema });
    }
    let d = header.params.d;
    let samples = match header.format {
        SampleFormat::Csv => read_samples_csv(&dir.join("samples.csv"), header.n, d)?,
        SampleFormat::Bin => read_samples_bin(&dir.join("samples.bin"), header.n, d)?,
    };
    Ok(Dataset {
        samples,
        params: header.params,
        seed: header.seed,
        mode: header.mode,
        augmented_from: header.augmentation,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    schema: String,
    #[serde(rename = "C")]
    channels: usize,
    d: usize,
    q: u32,
}

/// One JSON header line followed by `C * d` little-endian `f64` weights.
pub fn write_model(path: &Path, model: &Model) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = ModelHeader { schema: MODEL_SCHEMA.into(), channels: model.channels, d: model.d, q: model.q };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for x in &model.weights {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: ModelHeader = serde_json::from_str(line.trim_end())?;
    if header.schema != MODEL_SCHEMA {
        return Err(Error::Schema { expected: MODEL_SCHEMA.into(), found: header.schema });
    }
    let weights = ByteReader(r).f64s(header.channels * header.d)?;
    Ok(Model { channels: header.channels, d: header.d, q: header.q, weights })
}

/// `t, loss, min_margin`, then `feat_k{k}_c{c}` and `noise_{i}` columns.
pub fn write_trajectory_csv(path: &Path, frames: &[ProbeFrame]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let Some(first) = frames.first() else {
        w.write_record(["t", "loss", "min_margin"])?;
        w.flush()?;
        return Ok(());
    };
    let mut head = vec!["t".to_string(), "loss".into(), "min_margin".into()];
    for (k, row) in first.feat_corr.iter().enumerate() {
        head.extend((0..row.len()).map(|c| format!("feat_k{k}_c{c}")));
    }
    head.extend((0..first.noise_corr.len()).map(|i| format!("noise_{i}")));
    w.write_record(&head)?;
    for f in frames {
        let mut rec = vec![f.t.to_string(), f.loss.to_string(), f.min_margin.to_string()];
        rec.extend(f.feat_corr.iter().flatten().map(|v| v.to_string()));
        rec.extend(f.noise_corr.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_fit_labels_csv(path: &Path, labels: &[FitLabel]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample", "k_star", "tag", "feature_corr", "noise_corr"])?;
    for l in labels {
        let tag = serde_json::to_value(l.tag)?;
        w.write_record([
            l.index.to_string(),
            l.k_star.to_string(),
            tag.as_str().unwrap_or_default().to_string(),
            l.feature_corr.to_string(),
            l.noise_corr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `x, y, y_lo, y_hi` rows for one plotted series.
pub fn write_plot_csv(path: &Path, rows: &[[f64; 4]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "y_lo", "y_hi"])?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Hashes every listed file; paths are recorded relative to `root`.
pub fn build_manifest(root: &Path, files: &[PathBuf]) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let bytes = fs::read(f)?;
        let rel = f.strip_prefix(root).unwrap_or(f).to_string_lossy().replace('\\', "/");
        out.push(ManifestEntry { path: rel, bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) });
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::augment_dataset;
    use crate::distribution::{generate_dataset, SpuriousConfig};
    use crate::network::init_weights;

    fn sample_params() -> DistParams {
        let mut p = DistParams::two_patch(12, vec![0.5, 0.3, 0.2], 1.3);
        p.num_patches = 4;
        p.alpha = 0.25;
        p.sigma_zeta = 0.1;
        let mut u = vec![0.0; 12];
        u[7] = 1.0;
        p.spurious = Some(SpuriousConfig { u, rho_u_pos: 0.8, rho_u_neg: 0.2, slot: 1 });
        p
    }

    #[test]
    fn dataset_round_trips_in_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let ds = augment_dataset(&generate_dataset(&sample_params(), 5, SamplingMode::Iid, 9).unwrap()).unwrap();
        for (sub, fmt) in [("csv", SampleFormat::Csv), ("bin", SampleFormat::Bin)] {
            let path = dir.path().join(sub);
            write_dataset(&path, &ds, fmt).unwrap();
            assert_eq!(read_dataset(&path).unwrap(), ds);
        }
    }

    #[test]
    fn model_round_trips_and_checks_schema() {
        let dir = tempfile::tempdir().unwrap();
        let m = init_weights(3, 10, 3, 0.2, 1);
        let p = dir.path().join("model.bin");
        write_model(&p, &m).unwrap();
        assert_eq!(read_model(&p).unwrap(), m);
        let bad = dir.path().join("bad.bin");
        fs::write(&bad, b"{\"schema\":\"other\",\"C\":1,\"d\":1,\"q\":3}\n").unwrap();
        assert!(matches!(read_model(&bad), Err(Error::Schema { .. })));
    }

    #[test]
    fn manifest_hashes_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.txt");
        fs::write(&f, b"abc").unwrap();
        let m1 = build_manifest(dir.path(), std::slice::from_ref(&f)).unwrap();
        let m2 = build_manifest(dir.path(), &[f]).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1[0].sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(m1[0].path, "a.txt");
    }
}
