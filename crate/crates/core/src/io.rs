//! Binary ensemble, model and noise files (little-endian), and CSV ingestion.
//!
//! Every file starts with a four-byte magic and a `u32` format version.
//! Readers refuse versions newer than the one they were built with.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;

use crate::config::ModelConfig;
use crate::error::{Result, SctError};
use crate::estimation::MarginalFields;
use crate::geometry::{LocationSet, MaximinOrdering, Metric};
use crate::marginal::DistributionFamily;
use crate::model::{FittedModel, MarginalLayer, Preprocessing, Timings};
use crate::onion::KnotGrid;
use crate::transport::{TmHyper, TmPosterior, TransportStructure};

pub const ENSEMBLE_MAGIC: &[u8; 4] = b"SCTE";
pub const MODEL_MAGIC: &[u8; 4] = b"SCTM";
pub const NOISE_MAGIC: &[u8; 4] = b"SCTN";
pub const ENSEMBLE_VERSION: u32 = 1;
pub const MODEL_VERSION: u32 = 1;
pub const NOISE_VERSION: u32 = 1;

/// Replicated spatial fields: `data` is `N x L`, one replicate per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub locations: LocationSet,
    pub data: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(locations: LocationSet, data: DMatrix<f64>) -> Result<Self> {
        if data.ncols() != locations.len() {
            return Err(SctError::validation(format!(
                "payload has {} columns but {} locations",
                data.ncols(),
                locations.len()
            )));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            let (r, i) = (k % data.nrows(), k / data.nrows());
            return Err(SctError::validation(format!("non-finite value at replicate {r}, location {i}")));
        }
        Ok(Ensemble { locations, data })
    }

    pub fn replicates(&self) -> usize {
        self.data.nrows()
    }

    /// Sub-ensemble holding the given replicate rows.
    pub fn select(&self, rows: &[usize]) -> Ensemble {
        Ensemble { locations: self.locations.clone(), data: self.data.select_rows(rows) }
    }
}

struct Decoder<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Decoder<R> {
    fn new(inner: R) -> Self {
        Decoder { inner, offset: 0 }
    }

    fn fail(&self, message: impl Into<String>) -> SctError {
        SctError::Format { offset: self.offset, message: message.into() }
    }

    fn wrap<T>(&mut self, width: u64, what: &str, r: std::io::Result<T>) -> Result<T> {
        match r {
            Ok(v) => {
                self.offset += width;
                Ok(v)
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(self.fail(format!("truncated while reading {what}"))),
            Err(e) => Err(SctError::Io(e)),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let r = self.inner.read_u8();
        self.wrap(1, what, r)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let r = self.inner.read_u32::<LittleEndian>();
        self.wrap(4, what, r)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let r = self.inner.read_u64::<LittleEndian>();
        self.wrap(8, what, r)
    }

    fn usize(&mut self, what: &str, limit: u64) -> Result<usize> {
        let at = self.offset;
        let v = self.u64(what)?;
        if v > limit {
            return Err(SctError::Format { offset: at, message: format!("{what} = {v} exceeds limit {limit}") });
        }
        Ok(v as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let r = self.inner.read_f64::<LittleEndian>();
        self.wrap(8, what, r)
    }

    fn finite(&mut self, what: &str) -> Result<f64> {
        let at = self.offset;
        let v = self.f64(what)?;
        if !v.is_finite() {
            return Err(SctError::Format { offset: at, message: format!("non-finite {what}") });
        }
        Ok(v)
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        let r = self.inner.read_exact(&mut buf);
        self.wrap(n as u64, what, r)?;
        Ok(buf)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.usize(what, 1 << 24)?;
        let at = self.offset;
        let b = self.bytes(n, what)?;
        String::from_utf8(b).map_err(|_| SctError::Format { offset: at, message: format!("{what} is not UTF-8") })
    }

    fn header(&mut self, magic: &[u8; 4], supported: u32) -> Result<u32> {
        let m = self.bytes(4, "magic")?;
        if m != magic {
            return Err(SctError::Format {
                offset: 0,
                message: format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&m), String::from_utf8_lossy(magic)),
            });
        }
        let at = self.offset;
        let v = self.u32("version")?;
        if v == 0 || v > supported {
            return Err(SctError::Format { offset: at, message: format!("unsupported format version {v} (reader supports up to {supported})") });
        }
        Ok(v)
    }

    fn matrix(&mut self, what: &str) -> Result<DMatrix<f64>> {
        let r = self.usize(what, 1 << 32)?;
        let c = self.usize(what, 1 << 32)?;
        let mut m = DMatrix::zeros(r, c);
        for j in 0..c {
            for i in 0..r {
                m[(i, j)] = self.finite(what)?;
            }
        }
        Ok(m)
    }

    fn locations(&mut self) -> Result<LocationSet> {
        let at = self.offset;
        let tag = self.u8("metric tag")?;
        let metric = Metric::from_tag(tag).ok_or(SctError::Format { offset: at, message: format!("unknown metric tag {tag}") })?;
        let l = self.usize("location count", 1 << 32)?;
        self.coordinates(l, metric)
    }

    fn coordinates(&mut self, l: usize, metric: Metric) -> Result<LocationSet> {
        let at = self.offset;
        let mut coords = Vec::with_capacity(l);
        for _ in 0..l {
            coords.push([self.finite("coordinate")?, self.finite("coordinate")?]);
        }
        LocationSet::new(coords, metric).map_err(|e| SctError::Format { offset: at, message: e.to_string() })
    }

    fn end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(self.fail("trailing bytes after payload")),
        }
    }
}

struct Encoder<W> {
    inner: W,
}

impl<W: Write> Encoder<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.inner.write_u8(v)?)
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.inner.write_u32::<LittleEndian>(v)?)
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.inner.write_u64::<LittleEndian>(v)?)
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.inner.write_f64::<LittleEndian>(v)?)
    }

    fn string(&mut self, s: &str) -> Result<()> {
        self.u64(s.len() as u64)?;
        Ok(self.inner.write_all(s.as_bytes())?)
    }

    fn matrix(&mut self, m: &DMatrix<f64>) -> Result<()> {
        self.u64(m.nrows() as u64)?;
        self.u64(m.ncols() as u64)?;
        m.iter().try_for_each(|&v| self.f64(v))
    }

    fn coordinates(&mut self, locs: &LocationSet) -> Result<()> {
        locs.coords().iter().try_for_each(|c| {
            self.f64(c[0])?;
            self.f64(c[1])
        })
    }

    fn locations(&mut self, locs: &LocationSet) -> Result<()> {
        self.u8(locs.metric().tag())?;
        self.u64(locs.len() as u64)?;
        self.coordinates(locs)
    }
}

/// Writes an ensemble file: header, coordinate table, then the row-major payload.
pub fn write_ensemble<W: Write>(w: W, e: &Ensemble) -> Result<()> {
    let mut enc = Encoder { inner: w };
    enc.inner.write_all(ENSEMBLE_MAGIC)?;
    enc.u32(ENSEMBLE_VERSION)?;
    enc.u64(e.locations.len() as u64)?;
    enc.u64(e.data.nrows() as u64)?;
    enc.u8(e.locations.metric().tag())?;
    enc.coordinates(&e.locations)?;
    for r in 0..e.data.nrows() {
        for i in 0..e.data.ncols() {
            enc.f64(e.data[(r, i)])?;
        }
    }
    Ok(enc.inner.flush()?)
}

pub fn read_ensemble<R: Read>(r: R) -> Result<Ensemble> {
    let mut dec = Decoder::new(r);
    dec.header(ENSEMBLE_MAGIC, ENSEMBLE_VERSION)?;
    let l = dec.usize("L", 1 << 32)?;
    let n = dec.usize("N", 1 << 32)?;
    let at = dec.offset;
    let tag = dec.u8("metric tag")?;
    let metric = Metric::from_tag(tag).ok_or(SctError::Format { offset: at, message: format!("unknown metric tag {tag}") })?;
    let locations = dec.coordinates(l, metric)?;
    let mut data = DMatrix::zeros(n, l);
    for r in 0..n {
        for i in 0..l {
            let at = dec.offset;
            let v = dec.f64("payload")?;
            if !v.is_finite() {
                return Err(SctError::Format { offset: at, message: format!("non-finite value at replicate {r}, location {i}") });
            }
            data[(r, i)] = v;
        }
    }
    dec.end()?;
    Ensemble::new(locations, data)
}

/// Reference noise for common-noise sampling: header, `N`, `L`, row-major payload.
pub fn write_noise<W: Write>(w: W, noise: &DMatrix<f64>) -> Result<()> {
    let mut enc = Encoder { inner: w };
    enc.inner.write_all(NOISE_MAGIC)?;
    enc.u32(NOISE_VERSION)?;
    enc.u64(noise.nrows() as u64)?;
    enc.u64(noise.ncols() as u64)?;
    for r in 0..noise.nrows() {
        for i in 0..noise.ncols() {
            enc.f64(noise[(r, i)])?;
        }
    }
    Ok(enc.inner.flush()?)
}

pub fn read_noise<R: Read>(r: R) -> Result<DMatrix<f64>> {
    let mut dec = Decoder::new(r);
    dec.header(NOISE_MAGIC, NOISE_VERSION)?;
    let n = dec.usize("N", 1 << 32)?;
    let l = dec.usize("L", 1 << 32)?;
    let mut out = DMatrix::zeros(n, l);
    for r in 0..n {
        for i in 0..l {
            out[(r, i)] = dec.finite("noise value")?;
        }
    }
    dec.end()?;
    Ok(out)
}

fn family_tag(f: DistributionFamily) -> u8 {
    match f {
        DistributionFamily::Gaussian => 0,
        DistributionFamily::SkewT3 => 1,
    }
}

/// Serializes a fitted model. The transport posterior is stored through its
/// inputs (structure, hyperparameters, training pseudo-data) and rebuilt on load.
pub fn write_model<W: Write>(w: W, m: &FittedModel) -> Result<()> {
    let mut enc = Encoder { inner: w };
    enc.inner.write_all(MODEL_MAGIC)?;
    enc.u32(MODEL_VERSION)?;
    enc.string(&m.config.to_toml())?;
    enc.string(&m.fingerprint)?;
    enc.locations(&m.locations)?;
    enc.f64(m.preprocessing.mean)?;
    enc.f64(m.preprocessing.sd)?;
    enc.f64(m.timings.stage1)?;
    enc.f64(m.timings.stage2)?;

    let layer = &m.marginal;
    enc.u8(layer.uses_g() as u8)?;
    if layer.uses_g() {
        let f = layer.fields();
        enc.u8(family_tag(layer.family()))?;
        enc.matrix(&f.zeta_raw)?;
        enc.u64(f.shared_raw.len() as u64)?;
        f.shared_raw.iter().try_for_each(|&v| enc.f64(v))?;
        enc.u64(f.zeta_hyper.len() as u64)?;
        f.zeta_hyper.iter().try_for_each(|&(t, l)| {
            enc.f64(t)?;
            enc.f64(l)
        })?;
        match (&f.beta, layer.knots(), f.beta_hyper) {
            (Some(beta), Some(k), Some((t, l))) => {
                enc.u8(1)?;
                enc.f64(k.a())?;
                enc.f64(k.b())?;
                enc.u64(k.free_params() as u64)?;
                enc.u64(layer.table_size().unwrap_or(2) as u64)?;
                enc.f64(t)?;
                enc.f64(l)?;
                enc.matrix(beta)?;
            }
            _ => enc.u8(0)?,
        }
    }

    let tm = &m.transport;
    let st = tm.structure();
    enc.u64(st.len() as u64)?;
    st.ordering().order.iter().try_for_each(|&i| enc.u64(i as u64))?;
    st.ordering().min_dists.iter().try_for_each(|&d| enc.f64(d))?;
    for pos in 0..st.len() {
        let c = st.neighbors(pos);
        enc.u64(c.len() as u64)?;
        c.iter().try_for_each(|&p| enc.u64(p as u64))?;
    }
    tm.hyper().theta.iter().try_for_each(|&v| enc.f64(v))?;
    enc.f64(tm.g())?;
    enc.matrix(tm.training_data())?;
    Ok(enc.inner.flush()?)
}

pub fn read_model<R: Read>(r: R) -> Result<FittedModel> {
    let mut dec = Decoder::new(r);
    dec.header(MODEL_MAGIC, MODEL_VERSION)?;
    let at = dec.offset;
    let config_text = dec.string("config")?;
    let config = ModelConfig::from_toml(&config_text).map_err(|e| SctError::Format { offset: at, message: e.to_string() })?;
    let fingerprint = dec.string("fingerprint")?;
    let locations = dec.locations()?;
    let l = locations.len();
    let preprocessing = Preprocessing { mean: dec.finite("mean")?, sd: dec.finite("sd")? };
    let timings = Timings { stage1: dec.f64("timing")?, stage2: dec.f64("timing")? };

    let at = dec.offset;
    let marginal = if dec.u8("layer flag")? == 1 {
        let tag_at = dec.offset;
        let family = match dec.u8("family tag")? {
            0 => DistributionFamily::Gaussian,
            1 => DistributionFamily::SkewT3,
            t => return Err(SctError::Format { offset: tag_at, message: format!("unknown family tag {t}") }),
        };
        let zeta_raw = dec.matrix("zeta field")?;
        let ns = dec.usize("shared count", 16)?;
        let shared_raw = (0..ns).map(|_| dec.finite("shared parameter")).collect::<Result<Vec<_>>>()?;
        let nh = dec.usize("hyper count", 16)?;
        let zeta_hyper = (0..nh).map(|_| Ok((dec.finite("tau2")?, dec.finite("ell")?))).collect::<Result<Vec<_>>>()?;
        let (beta, knots, beta_hyper, table_size) = if dec.u8("spline flag")? == 1 {
            let kat = dec.offset;
            let (a, b) = (dec.finite("a")?, dec.finite("b")?);
            let d = dec.usize("D", 1 << 20)?;
            let knots = KnotGrid::new(a, b, d).map_err(|e| SctError::Format { offset: kat, message: e.to_string() })?;
            let table = dec.usize("table size", 1 << 28)?;
            let hyper = (dec.finite("tau2")?, dec.finite("ell")?);
            (Some(dec.matrix("beta")?), Some(knots), Some(hyper), table)
        } else {
            (None, None, None, config.table_size)
        };
        let fields = MarginalFields { zeta_raw, shared_raw, beta, zeta_hyper, beta_hyper };
        MarginalLayer::new(family, fields, knots, table_size).map_err(|e| SctError::Format { offset: at, message: e.to_string() })?
    } else {
        MarginalLayer::identity(l)
    };

    let at = dec.offset;
    let n = dec.usize("map length", 1 << 32)?;
    if n != l {
        return Err(SctError::Format { offset: at, message: format!("map has {n} locations, model has {l}") });
    }
    let order = (0..n).map(|_| dec.usize("order entry", n as u64)).collect::<Result<Vec<_>>>()?;
    let min_dists = (1..n).map(|_| dec.f64("maximin distance")).collect::<Result<Vec<_>>>()?;
    let mut neighbors = Vec::with_capacity(n);
    for _ in 0..n {
        let k = dec.usize("conditioning size", n as u64)?;
        neighbors.push((0..k).map(|_| dec.usize("neighbor", n as u64)).collect::<Result<Vec<_>>>()?);
    }
    let mut theta = [0.0; 6];
    for t in theta.iter_mut() {
        *t = dec.finite("theta")?;
    }
    let g = dec.finite("g")?;
    let train = dec.matrix("training pseudo-data")?;
    dec.end()?;
    let rebuild = || -> Result<TmPosterior> {
        let ordering = MaximinOrdering::from_parts(order, min_dists)?;
        let structure = TransportStructure::from_parts(ordering, neighbors)?;
        TmPosterior::new(train, structure, TmHyper::new(theta), g)
    };
    let transport = rebuild().map_err(|e| SctError::Format { offset: at, message: e.to_string() })?;
    Ok(FittedModel { config, fingerprint, locations, preprocessing, marginal, transport, timings })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

pub fn save_ensemble(path: impl AsRef<Path>, e: &Ensemble) -> Result<()> {
    write_ensemble(create(path.as_ref())?, e)
}

pub fn load_ensemble(path: impl AsRef<Path>) -> Result<Ensemble> {
    read_ensemble(open(path.as_ref())?)
}

pub fn save_model(path: impl AsRef<Path>, m: &FittedModel) -> Result<()> {
    write_model(create(path.as_ref())?, m)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FittedModel> {
    read_model(open(path.as_ref())?)
}

pub fn save_noise(path: impl AsRef<Path>, noise: &DMatrix<f64>) -> Result<()> {
    write_noise(create(path.as_ref())?, noise)
}

pub fn load_noise(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    read_noise(open(path.as_ref())?)
}

/// Reads a `lon, lat, rep1, rep2, ...` CSV into an ensemble on the sphere.
///
/// Rows at latitude +-90 are collapsed into one location per pole, whose
/// value is the mean over the collapsed rows.
pub fn ingest_csv<R: Read>(r: R) -> Result<Ensemble> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
    let headers = reader.headers().map_err(csv_error)?.clone();
    if headers.len() < 3 {
        return Err(SctError::validation("CSV needs lon, lat and at least one replicate column"));
    }
    let n = headers.len() - 2;
    let mut coords: Vec<[f64; 2]> = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut pole_slot: [Option<usize>; 2] = [None, None];
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let row = line + 2;
        if rec.len() != headers.len() {
            return Err(SctError::validation(format!("row {row}: expected {} fields, found {}", headers.len(), rec.len())));
        }
        let cell = |j: usize| -> Result<f64> {
            let v: f64 = rec[j].parse().map_err(|_| {
                SctError::validation(format!("row {row}, column {} ({}): cannot parse {:?}", j + 1, &headers[j], &rec[j]))
            })?;
            Ok(v)
        };
        let (lon, lat) = (cell(0)?, cell(1)?);
        let values = (2..rec.len()).map(cell).collect::<Result<Vec<_>>>()?;
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(SctError::validation(format!(
                "row {row}, column {} ({}): missing or non-finite value at lon {lon}, lat {lat}",
                j + 3,
                &headers[j + 2]
            )));
        }
        let pole = if lat == 90.0 { Some(0) } else if lat == -90.0 { Some(1) } else { None };
        match pole.map(|p| (p, pole_slot[p])) {
            Some((_, Some(slot))) => {
                for (acc, v) in columns[slot].iter_mut().zip(&values) {
                    *acc += v;
                }
                counts[slot] += 1;
            }
            other => {
                if let Some((p, None)) = other {
                    pole_slot[p] = Some(coords.len());
                }
                let lon = if pole.is_some() { 0.0 } else { lon };
                coords.push([lon, lat]);
                columns.push(values);
                counts.push(1);
            }
        }
    }
    if coords.is_empty() {
        return Err(SctError::validation("CSV has no data rows"));
    }
    let locations = LocationSet::new(coords, Metric::ChordalSphere)?;
    let data = DMatrix::from_fn(n, columns.len(), |r, i| columns[i][r] / counts[i] as f64);
    Ensemble::new(locations, data)
}

pub fn ingest_csv_path(path: impl AsRef<Path>) -> Result<Ensemble> {
    ingest_csv(open(path.as_ref())?)
}

fn csv_error(e: csv::Error) -> SctError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SctError::Io(io),
        other => SctError::validation(format!("CSV: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_csv() {
        let text = "lon,lat,r1,r2\n0,0,1.0,2.0\n10,0,3.0,4.0\n20,5,5.0,6.0\n";
        let e = ingest_csv(text.as_bytes()).unwrap();
        assert_eq!(e.locations.len(), 3);
        assert_eq!(e.replicates(), 2);
        assert_eq!(e.data[(1, 2)], 6.0);
    }

    #[test]
    fn nan_cell_names_coordinates() {
        let text = "lon,lat,r1\n0,0,1.0\n15,30,NaN\n";
        let err = ingest_csv(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("lon 15") && err.contains("lat 30"), "{err}");
    }

    #[test]
    fn poles_collapse() {
        let mut text = String::from("lon,lat,r1\n");
        for lon in [0, 90, 180, 270] {
            text.push_str(&format!("{lon},90,1.0\n{lon},0,2.0\n{lon},-90,{lon}\n"));
        }
        let e = ingest_csv(text.as_bytes()).unwrap();
        assert_eq!(e.locations.len(), 4 + 2);
        assert_eq!(e.data[(0, 2)], (0.0 + 90.0 + 180.0 + 270.0) / 4.0);
    }

    #[test]
    fn duplicate_rows_rejected() {
        let text = "lon,lat,r1\n0,10,1.0\n0,10,1.0\n";
        assert!(ingest_csv(text.as_bytes()).unwrap_err().to_string().contains("[0, 1]"));
    }

    #[test]
    fn ensemble_round_trip_and_truncation() {
        let locs = LocationSet::planar_grid(3, 2);
        let e = Ensemble::new(locs, DMatrix::from_fn(4, 6, |r, i| r as f64 - 0.5 * i as f64)).unwrap();
        let mut buf = Vec::new();
        write_ensemble(&mut buf, &e).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 8 + 8 + 1 + 6 * 16 + 4 * 6 * 8);
        assert_eq!(read_ensemble(buf.as_slice()).unwrap(), e);
        match read_ensemble(&buf[..buf.len() - 3]) {
            Err(SctError::Format { offset, .. }) => assert_eq!(offset, (buf.len() - 8) as u64),
            other => panic!("{other:?}"),
        }
        let mut newer = buf.clone();
        newer[4] = 9;
        assert!(read_ensemble(newer.as_slice()).unwrap_err().to_string().contains("version 9"));
    }

    #[test]
    fn noise_round_trip() {
        let z = DMatrix::from_fn(2, 3, |r, c| (r * 3 + c) as f64 * 0.1);
        let mut buf = Vec::new();
        write_noise(&mut buf, &z).unwrap();
        assert_eq!(read_noise(buf.as_slice()).unwrap(), z);
    }
}
