//! Model persistence.
//!
//! A single-model bundle is `CHMB`, a u32 version, a u8 family tag, then a
//! sequence of blocks, each a u64 word count followed by that many
//! little-endian 8-byte words (f64 payloads, or u64 for integer metadata).
//! A parallel bundle is a plain-text manifest naming one member file per group.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::forecasting::AnyModel;
use crate::gated_rnn::{CellKind, GatedRnnModel};
use crate::linalg::CsrMatrix;
use crate::parallel::{decompose, ParallelModel};
use crate::reservoir::{ReservoirModel, ReservoirParams};
use crate::{Error, Real, Result};

pub const BUNDLE_MAGIC: [u8; 4] = *b"CHMB";
pub const BUNDLE_VERSION: u32 = 1;
const MANIFEST_HEADER: &str = "chaoscast-parallel-bundle";

const TAG_RC: u8 = 0;
const TAG_GRU: u8 = 1;
const TAG_LSTM: u8 = 2;

/// Anything that can be saved: one model or a parallel ensemble.
#[derive(Debug, Clone, PartialEq)]
pub enum Bundle<T> {
    Single(AnyModel<T>),
    Parallel(ParallelModel<AnyModel<T>>),
}

impl<T: Real> Bundle<T> {
    pub fn memory_bytes(&self) -> usize {
        match self {
            Bundle::Single(m) => m.memory_bytes(),
            Bundle::Parallel(p) => p.memory_bytes(),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Bundle::Single(m) => m.family(),
            Bundle::Parallel(p) => p.members.first().map_or("rc", AnyModel::family),
        }
    }
}

fn words(w: &mut impl Write, xs: &[u64]) -> Result<()> {
    w.write_all(&(xs.len() as u64).to_le_bytes())?;
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn floats<T: Real>(w: &mut impl Write, xs: &[T]) -> Result<()> {
    w.write_all(&(xs.len() as u64).to_le_bytes())?;
    for x in xs {
        w.write_all(&x.as_f64().to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("missing {what}")),
        _ => Error::Io(e),
    })?;
    Ok(u64::from_le_bytes(b))
}

fn read_words(r: &mut impl Read, what: &str, expected: Option<usize>) -> Result<Vec<u64>> {
    let n = read_u64(r, what)? as usize;
    if let Some(e) = expected {
        if n != e {
            return Err(Error::Inconsistent(format!("{what}: expected {e} entries, header says {n}")));
        }
    }
    // Cap the pre-allocation so a corrupt length cannot exhaust memory.
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        out.push(read_u64(r, what)?);
    }
    Ok(out)
}

fn read_floats<T: Real>(r: &mut impl Read, what: &str, expected: usize) -> Result<Vec<T>> {
    Ok(read_words(r, what, Some(expected))?
        .into_iter()
        .map(|b| T::lit(f64::from_bits(b)))
        .collect())
}

fn read_matrix<T: Real>(r: &mut impl Read, what: &str, rows: usize, cols: usize) -> Result<DMatrix<T>> {
    Ok(DMatrix::from_vec(rows, cols, read_floats(r, what, rows * cols)?))
}

pub fn write_model<T: Real>(model: &AnyModel<T>, w: &mut impl Write) -> Result<()> {
    w.write_all(&BUNDLE_MAGIC)?;
    w.write_all(&BUNDLE_VERSION.to_le_bytes())?;
    match model {
        AnyModel::Reservoir(m) => {
            w.write_all(&[TAG_RC])?;
            let p = &m.params;
            words(
                w,
                &[
                    p.hidden as u64,
                    p.input_dim as u64,
                    p.output_dim as u64,
                    p.degree.to_bits(),
                    p.radius.to_bits(),
                    p.input_scaling.to_bits(),
                    p.regularization.to_bits(),
                    p.noise_level.to_bits(),
                    p.warmup as u64,
                    p.batch_size as u64,
                    p.seed,
                    m.trained as u64,
                    m.w_hh.nnz() as u64,
                ],
            )?;
            floats(w, m.w_in.as_slice())?;
            words(w, &m.w_hh.row_ptr().iter().map(|&v| v as u64).collect::<Vec<_>>())?;
            words(w, &m.w_hh.col_idx().iter().map(|&v| v as u64).collect::<Vec<_>>())?;
            floats(w, m.w_hh.values())?;
            floats(w, m.w_out.as_slice())?;
        }
        AnyModel::Rnn(m) => {
            w.write_all(&[match m.kind {
                CellKind::Gru => TAG_GRU,
                CellKind::Lstm => TAG_LSTM,
            }])?;
            words(
                w,
                &[
                    m.input_dim() as u64,
                    m.hidden_dim() as u64,
                    m.output_dim() as u64,
                    m.layer_count() as u64,
                ],
            )?;
            for b in m.blocks() {
                floats(w, b.as_slice())?;
            }
        }
    }
    Ok(())
}

pub fn read_model<T: Real>(r: &mut impl Read) -> Result<AnyModel<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Truncated("missing magic".into()))?;
    if magic != BUNDLE_MAGIC {
        return Err(Error::BadMagic {
            expected: BUNDLE_MAGIC,
            found: magic,
        });
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)
        .map_err(|_| Error::Truncated("missing version".into()))?;
    let version = u32::from_le_bytes(b4);
    if version != BUNDLE_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: BUNDLE_VERSION,
        });
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)
        .map_err(|_| Error::Truncated("missing family tag".into()))?;
    match tag[0] {
        TAG_RC => {
            let m = read_words(r, "reservoir header", Some(13))?;
            let f = f64::from_bits;
            let params = ReservoirParams {
                hidden: m[0] as usize,
                input_dim: m[1] as usize,
                output_dim: m[2] as usize,
                degree: f(m[3]),
                radius: f(m[4]),
                input_scaling: f(m[5]),
                regularization: f(m[6]),
                noise_level: f(m[7]),
                warmup: m[8] as usize,
                batch_size: m[9] as usize,
                seed: m[10],
            };
            let (d_h, nnz) = (params.hidden, m[12] as usize);
            let w_in = read_matrix(r, "input weights", d_h, params.input_dim)?;
            let row_ptr = read_words(r, "row pointers", Some(d_h + 1))?;
            let col_idx = read_words(r, "column indices", Some(nnz))?;
            let values = read_floats(r, "recurrent weights", nnz)?;
            let w_hh = CsrMatrix::from_parts(
                d_h,
                d_h,
                row_ptr.into_iter().map(|v| v as usize).collect(),
                col_idx.into_iter().map(|v| v as usize).collect(),
                values,
            )?;
            let w_out = read_matrix(r, "readout", params.output_dim, d_h)?;
            Ok(AnyModel::Reservoir(ReservoirModel {
                w_in,
                w_hh,
                w_out,
                params,
                trained: m[11] != 0,
            }))
        }
        TAG_GRU | TAG_LSTM => {
            let kind = if tag[0] == TAG_GRU { CellKind::Gru } else { CellKind::Lstm };
            let m = read_words(r, "rnn header", Some(4))?;
            let [d_in, d_h, d_out, layers] = [m[0], m[1], m[2], m[3]].map(|v| v as usize);
            if d_in == 0 || d_h == 0 || d_out == 0 || layers == 0 || layers > 1024 {
                return Err(Error::Inconsistent(format!(
                    "rnn header {d_in}/{d_h}/{d_out}/{layers} is not a valid shape"
                )));
            }
            let mut model = GatedRnnModel::<T>::new(kind, d_in, d_h, d_out, layers, 0)?;
            for b in model.blocks_mut() {
                let (rows, cols) = b.shape();
                *b = read_matrix(r, "rnn weights", rows, cols)?;
            }
            Ok(AnyModel::Rnn(model))
        }
        other => Err(Error::Inconsistent(format!("unknown model family tag {other}"))),
    }
}

fn member_path(manifest: &Path, group: usize) -> PathBuf {
    let stem = manifest
        .file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    manifest.with_file_name(format!("{stem}.g{group:04}.chmb"))
}

/// Writes the bundle; a parallel bundle also writes its member files next to
/// `path`. Returns every file written.
pub fn save_bundle<T: Real>(bundle: &Bundle<T>, path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    match bundle {
        Bundle::Single(m) => {
            let mut w = BufWriter::new(std::fs::File::create(path)?);
            write_model(m, &mut w)?;
            w.flush()?;
            Ok(vec![path.to_path_buf()])
        }
        Bundle::Parallel(p) => {
            let d = &p.decomposition;
            let mut text = format!(
                "{MANIFEST_HEADER} {BUNDLE_VERSION}\ndim = {}\ngroup_size = {}\ninteraction = {}\n",
                d.dim, d.group_size, d.interaction
            );
            let mut written = Vec::new();
            for (g, m) in p.members.iter().enumerate() {
                let mp = member_path(path, g);
                let mut w = BufWriter::new(std::fs::File::create(&mp)?);
                write_model(m, &mut w)?;
                w.flush()?;
                let name = mp.file_name().expect("member path has a file name");
                text.push_str(&format!("member = {}\n", name.to_string_lossy()));
                written.push(mp);
            }
            std::fs::write(path, text)?;
            written.insert(0, path.to_path_buf());
            Ok(written)
        }
    }
}

pub fn load_bundle<T: Real>(path: impl AsRef<Path>) -> Result<Bundle<T>> {
    let path = path.as_ref();
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let head = r.fill_buf()?;
    if !head.starts_with(MANIFEST_HEADER.as_bytes()) {
        return Ok(Bundle::Single(read_model(&mut r)?));
    }
    let mut text = String::new();
    r.read_to_string(&mut text)
        .map_err(|e| Error::Inconsistent(format!("manifest is not text: {e}")))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let version: u32 = header[MANIFEST_HEADER.len()..]
        .trim()
        .parse()
        .map_err(|_| Error::Inconsistent(format!("bad manifest header {header:?}")))?;
    if version != BUNDLE_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: BUNDLE_VERSION,
        });
    }
    let (mut dim, mut g, mut i) = (None, None, None);
    let mut members = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Inconsistent(format!("bad manifest line {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        let num = || {
            v.parse::<usize>()
                .map_err(|_| Error::Inconsistent(format!("bad manifest value {line:?}")))
        };
        match k {
            "dim" => dim = Some(num()?),
            "group_size" => g = Some(num()?),
            "interaction" => i = Some(num()?),
            "member" => members.push(v.to_string()),
            _ => return Err(Error::Inconsistent(format!("unknown manifest key {k:?}"))),
        }
    }
    let (Some(dim), Some(g), Some(i)) = (dim, g, i) else {
        return Err(Error::Truncated("manifest lacks dim, group_size or interaction".into()));
    };
    let decomp = decompose(dim, g, i).map_err(|e| Error::Inconsistent(e.to_string()))?;
    if members.len() != decomp.group_count() {
        return Err(Error::Inconsistent(format!(
            "manifest names {} members for {} groups",
            members.len(),
            decomp.group_count()
        )));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let models = members
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mut r = BufReader::new(std::fs::File::open(dir.join(name))?);
            read_model(&mut r).map_err(|e| e.in_group(k))
        })
        .collect::<Result<Vec<_>>>()?;
    ParallelModel::new(decomp, models)
        .map(Bundle::Parallel)
        .map_err(|e| Error::Inconsistent(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecasting::{iterative_forecast, Surrogate};
    use crate::reservoir::build_reservoir;

    fn rc() -> AnyModel<f64> {
        let mut m = build_reservoir::<f64>(&ReservoirParams {
            hidden: 20,
            input_dim: 3,
            output_dim: 3,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        m.w_out = DMatrix::from_fn(3, 20, |i, j| ((i * 7 + j) % 5) as f64 * 0.01 - 0.02);
        AnyModel::Reservoir(m)
    }

    fn bytes(m: &AnyModel<f64>) -> Vec<u8> {
        let mut v = Vec::new();
        write_model(m, &mut v).unwrap();
        v
    }

    fn forecast(m: &AnyModel<f64>) -> Vec<f64> {
        let mut s = m.initial_state();
        iterative_forecast(m, &mut s, &[0.1, -0.2, 0.3], 30, 1e9).unwrap().predictions
    }

    #[test]
    fn round_trip_every_family() {
        let models = vec![
            rc(),
            AnyModel::Rnn(GatedRnnModel::new(CellKind::Gru, 3, 6, 3, 2, 1).unwrap()),
            AnyModel::Rnn(GatedRnnModel::new(CellKind::Lstm, 3, 5, 3, 1, 2).unwrap()),
        ];
        for m in models {
            let back: AnyModel<f64> = read_model(&mut bytes(&m).as_slice()).unwrap();
            assert_eq!(back, m);
            assert_eq!(forecast(&back), forecast(&m));
        }
    }

    #[test]
    fn distinct_diagnostics() {
        let good = bytes(&rc());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(read_model::<f64>(&mut bad.as_slice()), Err(Error::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            read_model::<f64>(&mut bad.as_slice()),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
        let cut = &good[..good.len() - 5];
        assert!(matches!(read_model::<f64>(&mut &cut[..]), Err(Error::Truncated(_))));
        // Header word count of the input block bumped by one.
        let mut bad = good.clone();
        let at = 4 + 4 + 1 + 8 + 13 * 8;
        bad[at] += 1;
        assert!(matches!(read_model::<f64>(&mut bad.as_slice()), Err(Error::Inconsistent(_))));
    }

    #[test]
    fn parallel_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let members: Vec<AnyModel<f64>> = (0..2)
            .map(|g| AnyModel::Rnn(GatedRnnModel::new(CellKind::Gru, 4, 3, 2, 1, g).unwrap()))
            .collect();
        let p = ParallelModel::new(decompose(4, 2, 1).unwrap(), members).unwrap();
        let path = dir.path().join("pm.txt");
        let files = save_bundle(&Bundle::Parallel(p.clone()), &path).unwrap();
        assert_eq!(files.len(), 3);
        assert!(files.iter().all(|f| f.exists()));
        assert_eq!(load_bundle::<f64>(&path).unwrap(), Bundle::Parallel(p));

        std::fs::remove_file(&files[2]).unwrap();
        assert!(load_bundle::<f64>(&path).is_err());
    }
}
