//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "UC2I"  u32 version
//! u64 num_users  u64 num_items  u64 dim  u64 layers  u64 user_targets  u64 item_targets
//! u64 seed  u64 best_epoch  f64 best_score  u64 epochs_run
//! per target set: f64 temperature  u64 steps  f64 lr
//! f64 embeddings[(num_users + num_items) * dim]
//! f64 user_targets[user_targets * dim]  f64 item_targets[item_targets * dim]
//! u32 crc32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::backbone::EmbeddingTable;
use crate::error::{Error, Result};
use crate::intents::TargetSet;

pub const MAGIC: &[u8; 4] = b"UC2I";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub num_users: usize,
    pub num_items: usize,
    pub dim: usize,
    pub layers: usize,
    pub seed: u64,
    pub best_epoch: u64,
    pub best_score: f64,
    pub epochs_run: u64,
    /// `num_users + num_items` rows of `dim` values.
    pub embeddings: Array2<f64>,
    pub user_targets: TargetSet,
    pub item_targets: TargetSet,
}

impl Checkpoint {
    pub fn embedding_table(&self) -> Result<EmbeddingTable> {
        EmbeddingTable::from_array(self.num_users, self.num_items, self.embeddings.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [
            self.num_users,
            self.num_items,
            self.dim,
            self.layers,
            self.user_targets.len(),
            self.item_targets.len(),
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.best_epoch.to_le_bytes());
        out.extend_from_slice(&self.best_score.to_le_bytes());
        out.extend_from_slice(&self.epochs_run.to_le_bytes());
        for ts in [&self.user_targets, &self.item_targets] {
            out.extend_from_slice(&ts.temperature.to_le_bytes());
            out.extend_from_slice(&(ts.steps as u64).to_le_bytes());
            out.extend_from_slice(&ts.lr.to_le_bytes());
        }
        for m in [
            &self.embeddings,
            &self.user_targets.targets,
            &self.item_targets.targets,
        ] {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing UC2I magic".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        if bytes.len() < 12 {
            return Err(Error::Format("truncated header".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));

        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.usize()?;
        }
        let [num_users, num_items, dim, layers, cu, ci] = dims;
        let seed = r.u64()?;
        let best_epoch = r.u64()?;
        let best_score = r.f64()?;
        let epochs_run = r.u64()?;
        let mut meta = [(0.0, 0usize, 0.0); 2];
        for m in &mut meta {
            *m = (r.f64()?, r.usize()?, r.f64()?);
        }

        let payload = |rows: Option<usize>| rows?.checked_mul(dim)?.checked_mul(8);
        let expected = [num_users.checked_add(num_items), Some(cu), Some(ci)]
            .into_iter()
            .try_fold(r.pos + 4, |acc, rows| payload(rows)?.checked_add(acc));
        if expected != Some(bytes.len()) {
            return Err(Error::Format(format!(
                "size {} does not match the header ({} bytes expected)",
                bytes.len(),
                expected.map_or("overflowing".to_owned(), |n| n.to_string())
            )));
        }
        let actual = crc32fast::hash(body);
        if actual != stored {
            return Err(Error::Format(format!(
                "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }

        let embeddings = r.matrix(num_users + num_items, dim)?;
        let user = r.matrix(cu, dim)?;
        let item = r.matrix(ci, dim)?;
        let target_set = |targets, (temperature, steps, lr)| TargetSet {
            targets,
            temperature,
            steps,
            lr,
        };
        Ok(Checkpoint {
            num_users,
            num_items,
            dim,
            layers,
            seed,
            best_epoch,
            best_score,
            epochs_run,
            embeddings,
            user_targets: target_set(user, meta[0]),
            item_targets: target_set(item, meta[1]),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format("truncated file".into()))?;
        self.pos = end;
        Ok(chunk.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.take().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.take().map(u64::from_le_bytes)
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .map_err(|_| Error::Format(format!("dimension {v} does not fit in memory")))
    }

    fn f64(&mut self) -> Result<f64> {
        self.take().map(f64::from_le_bytes)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))
    }
}
