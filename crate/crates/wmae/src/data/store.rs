//! On-disk dataset store.
//!
//! Layout inside a store directory:
//! - `meta.json` — UTF-8 JSON [`GridMeta`]
//! - `data.f32`  — little-endian f32, `[sample][channel][lat][lon]`, no header
//! - `stats.json`, `clim.f32` — written by their ops; `clim.f32` is
//!   `[channel][lat][lon]`

use super::{ChannelStats, Climatology, GridMeta, GridSample};
use crate::error::{Result, WmaeError};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const META_FILE: &str = "meta.json";
pub const DATA_FILE: &str = "data.f32";
pub const STATS_FILE: &str = "stats.json";
pub const CLIM_FILE: &str = "clim.f32";

/// Read-only random access to samples without loading the whole set.
pub struct DiskStore {
    meta: GridMeta,
    data: File,
    dir: PathBuf,
}

impl DiskStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<DiskStore> {
        let dir = dir.as_ref().to_path_buf();
        let meta_path = dir.join(META_FILE);
        let mut meta_str = String::new();
        File::open(&meta_path)
            .and_then(|mut f| f.read_to_string(&mut meta_str))
            .map_err(|e| WmaeError::io(meta_path.display().to_string(), e))?;
        let meta: GridMeta = serde_json::from_str(&meta_str)
            .map_err(|e| WmaeError::json(meta_path.display().to_string(), e))?;
        meta.validate()?;

        let data_path = dir.join(DATA_FILE);
        let data = File::open(&data_path)
            .map_err(|e| WmaeError::io(data_path.display().to_string(), e))?;
        let expected = (meta.sample_count * meta.values_per_sample() * 4) as u64;
        let actual = data
            .metadata()
            .map_err(|e| WmaeError::io(data_path.display().to_string(), e))?
            .len();
        if actual != expected {
            return Err(WmaeError::Format(format!(
                "{} is {actual} bytes, expected {expected} \
                 ({} samples x {} values x 4 bytes)",
                data_path.display(),
                meta.sample_count,
                meta.values_per_sample()
            )));
        }
        Ok(DiskStore { meta, data, dir })
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn sample(&self, k: usize) -> Result<GridSample> {
        if k >= self.meta.sample_count {
            return Err(WmaeError::Usage(format!(
                "sample index {k} out of range ({} samples)",
                self.meta.sample_count
            )));
        }
        let n = self.meta.values_per_sample();
        let mut bytes = vec![0u8; n * 4];
        let offset = (k * n * 4) as u64;
        read_at(&self.data, &mut bytes, offset)
            .map_err(|e| WmaeError::io(self.dir.join(DATA_FILE).display().to_string(), e))?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(GridSample::new(self.meta.c, self.meta.h, self.meta.w, values, k))
    }

    pub fn write_stats(&self, stats: &ChannelStats) -> Result<PathBuf> {
        let path = self.dir.join(STATS_FILE);
        let json = serde_json::to_string_pretty(stats)
            .map_err(|e| WmaeError::json(STATS_FILE.to_string(), e))?;
        std::fs::write(&path, json).map_err(|e| WmaeError::io(path.display().to_string(), e))?;
        Ok(path)
    }

    pub fn read_stats(&self) -> Result<ChannelStats> {
        let path = self.dir.join(STATS_FILE);
        let s = std::fs::read_to_string(&path)
            .map_err(|e| WmaeError::io(path.display().to_string(), e))?;
        serde_json::from_str(&s).map_err(|e| WmaeError::json(path.display().to_string(), e))
    }

    pub fn write_climatology(&self, clim: &Climatology) -> Result<PathBuf> {
        let path = self.dir.join(CLIM_FILE);
        let mut bytes = Vec::with_capacity(clim.values.len() * 4);
        for &v in &clim.values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::write(&path, bytes).map_err(|e| WmaeError::io(path.display().to_string(), e))?;
        Ok(path)
    }

    pub fn read_climatology(&self) -> Result<Climatology> {
        let path = self.dir.join(CLIM_FILE);
        let bytes =
            std::fs::read(&path).map_err(|e| WmaeError::io(path.display().to_string(), e))?;
        let expected = self.meta.values_per_sample() * 4;
        if bytes.len() != expected {
            return Err(WmaeError::Format(format!(
                "{} is {} bytes, expected {expected}",
                path.display(),
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok(Climatology { c: self.meta.c, h: self.meta.h, w: self.meta.w, values })
    }
}

#[cfg(unix)]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(not(unix))]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::io::{Seek, SeekFrom};
    let mut f = file.try_clone()?;
    f.seek(SeekFrom::Start(offset))?;
    f.read_exact(buf)
}

/// Streams samples into a new store directory.
pub struct StoreWriter {
    meta: GridMeta,
    writer: BufWriter<File>,
    dir: PathBuf,
    written: usize,
}

impl StoreWriter {
    pub fn create(dir: impl AsRef<Path>, meta: GridMeta) -> Result<StoreWriter> {
        meta.validate()?;
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| WmaeError::io(dir.display().to_string(), e))?;
        let meta_path = dir.join(META_FILE);
        let json = serde_json::to_string_pretty(&meta)
            .map_err(|e| WmaeError::json(META_FILE.to_string(), e))?;
        std::fs::write(&meta_path, json)
            .map_err(|e| WmaeError::io(meta_path.display().to_string(), e))?;
        let data_path = dir.join(DATA_FILE);
        let file = File::create(&data_path)
            .map_err(|e| WmaeError::io(data_path.display().to_string(), e))?;
        Ok(StoreWriter { meta, writer: BufWriter::new(file), dir, written: 0 })
    }

    pub fn append(&mut self, values: &[f32]) -> Result<()> {
        if values.len() != self.meta.values_per_sample() {
            return Err(WmaeError::Format(format!(
                "sample has {} values, store expects {}",
                values.len(),
                self.meta.values_per_sample()
            )));
        }
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for &v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.writer
            .write_all(&bytes)
            .map_err(|e| WmaeError::io(self.dir.join(DATA_FILE).display().to_string(), e))?;
        self.written += 1;
        Ok(())
    }

    /// Flush and verify the declared sample count was written.
    pub fn finish(mut self) -> Result<DiskStore> {
        self.writer
            .flush()
            .map_err(|e| WmaeError::io(self.dir.join(DATA_FILE).display().to_string(), e))?;
        if self.written != self.meta.sample_count {
            return Err(WmaeError::Format(format!(
                "wrote {} samples, meta declares {}",
                self.written, self.meta.sample_count
            )));
        }
        DiskStore::open(&self.dir)
    }
}
