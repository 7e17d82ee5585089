//! Dataset file layout (all integers little-endian):
//!
//! ```text
//! "NFVS"  u32 version
//! u64 record_count  u64 demo_count
//! u32 width  u32 height  u32 channels  u32 n  u32 f  f64 period
//! per demo block:
//!   u32 demo_id  u8 phase  u8 split  u8 success  u64 scene_seed  u32 records
//!   u8[h·w·c] reference image  f32[f/2] target depths
//!   per record: u32 k  f32[n] q  f32[n] q̇  f32[6·n] J_r (row-major)  u8[h·w·c] image
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{Dataset, DatasetHeader, Demo, DemoMeta, Phase, SampleRecord, Split};
use crate::control::DepthVector;
use crate::error::{Error, Result};
use crate::sim::ImageU8;

pub const MAGIC: &[u8; 4] = b"NFVS";
pub const FORMAT_VERSION: u32 = 1;

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.inner.write_all(b)
    }
    fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.bytes(&[v])
    }
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f32s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) -> std::io::Result<()> {
        for v in vs {
            self.bytes(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated dataset: {e}")))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.exact::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.exact()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.exact()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.exact()?))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f32::from_le_bytes(self.exact()?) as f64)).collect()
    }
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated dataset: {e}")))?;
        Ok(b)
    }
}

fn encode<W: Write>(ds: &Dataset, w: &mut Writer<W>) -> std::io::Result<()> {
    let h = &ds.header;
    w.bytes(MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u64(ds.record_count() as u64)?;
    w.u64(ds.demos.len() as u64)?;
    for v in [h.width, h.height, h.channels, h.n, h.f] {
        w.u32(v as u32)?;
    }
    w.f64(h.period)?;
    for demo in &ds.demos {
        let m = &demo.meta;
        w.u32(m.demo_id)?;
        w.u8(m.phase as u8)?;
        w.u8(m.split as u8)?;
        w.u8(m.success as u8)?;
        w.u64(m.scene_seed)?;
        w.u32(demo.records.len() as u32)?;
        w.bytes(&m.reference.data)?;
        w.f32s(m.target_depths.as_slice())?;
        for r in &demo.records {
            w.u32(r.k)?;
            w.f32s(r.q.iter())?;
            w.f32s(r.qdot.iter())?;
            for row in 0..6 {
                w.f32s(r.jr.row(row).iter())?;
            }
            w.bytes(&r.image.data)?;
        }
    }
    Ok(())
}

/// Writes the dataset; the same dataset always yields the same bytes.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = Writer {
        inner: BufWriter::new(file),
    };
    encode(ds, &mut w)
        .and_then(|_| w.inner.flush())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn decode<R: Read>(r: &mut Reader<R>) -> Result<Dataset> {
    if &r.exact::<4>()? != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let record_count = r.u64()? as usize;
    let demo_count = r.u64()? as usize;
    let header = DatasetHeader {
        width: r.u32()? as usize,
        height: r.u32()? as usize,
        channels: r.u32()? as usize,
        n: r.u32()? as usize,
        f: r.u32()? as usize,
        period: r.f64()?,
    };
    let (h, w, c, n) = (header.height, header.width, header.channels, header.n);
    let pixels = h * w * c;
    let image = |data: Vec<u8>| ImageU8 {
        height: h,
        width: w,
        channels: c,
        data,
    };
    let mut demos = Vec::with_capacity(demo_count);
    for _ in 0..demo_count {
        let demo_id = r.u32()?;
        let phase = Phase::from_u8(r.u8()?)?;
        let split = Split::from_u8(r.u8()?)?;
        let success = r.u8()? != 0;
        let scene_seed = r.u64()?;
        let count = r.u32()? as usize;
        let reference = image(r.bytes(pixels)?);
        let target_depths = DepthVector::from_slice(&r.f32s(header.f / 2)?)?;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let k = r.u32()?;
            let q = DVector::from_vec(r.f32s(n)?);
            let qdot = DVector::from_vec(r.f32s(n)?);
            let jr = DMatrix::from_row_slice(6, n, &r.f32s(6 * n)?);
            records.push(SampleRecord {
                k,
                q,
                qdot,
                jr,
                image: image(r.bytes(pixels)?),
            });
        }
        demos.push(Demo {
            meta: DemoMeta {
                demo_id,
                phase,
                scene_seed,
                success,
                split,
                reference,
                target_depths,
            },
            records,
        });
    }
    let ds = Dataset {
        header,
        demos,
        discarded: Vec::new(),
    };
    if ds.record_count() != record_count {
        return Err(Error::Format(format!(
            "header announces {record_count} records, found {}",
            ds.record_count()
        )));
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing).map_err(|e| Error::io("reading dataset", e))? != 0 {
        return Err(Error::Format("trailing bytes after last demo".into()));
    }
    Ok(ds)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    decode(&mut Reader {
        inner: BufReader::new(file),
    })
}
