//! Little-endian binary files for feature maps, task sets and policy
//! libraries, plus the JSON form of feature maps.
//!
//! Feature map: `u64 n_states, u64 d`, then `n_states * d` f64 row-major.
//! Task set: `u64 provenance, u64 n, u64 d`, then `n * d` f64.
//! Library: `u64 entries, u64 n_states, u64 n_actions, u64 d`, 32-byte
//! feature and MDP fingerprints, then per entry `z` (d f64), the policy
//! (n_states u64) and the successor table (per action, n_states x d f64
//! row-major).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::engine::{LibraryEntry, PolicyLibrary};
use crate::error::{Error, Result};
use crate::mdp::{DeterministicPolicy, FeatureMap, SuccessorFeatureTable};
use crate::tasks::{Provenance, TaskVector, TaskVectorSet};

// guards against absurd headers before allocating
const MAX_ELEMENTS: u64 = 1 << 32;

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Row-major dump of a column-major matrix.
    fn matrix(&mut self, m: &DMatrix<f64>) {
        for r in 0..m.nrows() {
            self.f64s(m.row(r).iter());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("file truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        if v > MAX_ELEMENTS {
            return Err(Error::Format(format!("{what} = {v} is implausibly large")));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let data = self.f64s(rows.checked_mul(cols).ok_or_else(|| Error::Format("matrix too large".into()))?)?;
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    }

    fn fingerprint(&mut self) -> Result<[u8; 32]> {
        Ok(self.take(32)?.try_into().expect("32 bytes"))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn feature_map_to_bytes(f: &FeatureMap) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.usize(f.n_states());
    w.usize(f.dim());
    w.matrix(f.matrix());
    w.0
}

pub fn feature_map_from_bytes(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = Reader::new(bytes);
    let n = r.count("n_states")?;
    let d = r.count("d")?;
    let m = r.matrix(n, d)?;
    r.finish()?;
    FeatureMap::new(m)
}

#[derive(Serialize, Deserialize)]
struct FeatureMapDocument {
    n_states: usize,
    d: usize,
    phi: Vec<Vec<f64>>,
}

pub fn feature_map_to_json(f: &FeatureMap) -> Result<String> {
    let doc = FeatureMapDocument {
        n_states: f.n_states(),
        d: f.dim(),
        phi: f.matrix().row_iter().map(|r| r.iter().copied().collect()).collect(),
    };
    Ok(serde_json::to_string(&doc)?)
}

pub fn feature_map_from_json(text: &str) -> Result<FeatureMap> {
    let doc: FeatureMapDocument = serde_json::from_str(text)?;
    if doc.phi.len() != doc.n_states || doc.phi.iter().any(|r| r.len() != doc.d) {
        return Err(Error::Format("feature map rows disagree with the header".into()));
    }
    FeatureMap::new(DMatrix::from_fn(doc.n_states, doc.d, |i, j| doc.phi[i][j]))
}

pub fn task_set_to_bytes(set: &TaskVectorSet) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u64(set.provenance().code());
    w.usize(set.len());
    w.usize(set.dim());
    for z in set.iter() {
        w.f64s(z.iter());
    }
    w.0
}

pub fn task_set_from_bytes(bytes: &[u8]) -> Result<TaskVectorSet> {
    let mut r = Reader::new(bytes);
    let provenance = Provenance::from_code(r.u64()?)?;
    let n = r.count("n")?;
    let d = r.count("d")?;
    let vectors = (0..n)
        .map(|_| TaskVector::new(DVector::from_vec(r.f64s(d)?)))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    TaskVectorSet::new(vectors, provenance)
}

pub fn library_to_bytes(lib: &PolicyLibrary) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.usize(lib.len());
    w.usize(lib.n_states());
    w.usize(lib.n_actions());
    w.usize(lib.dim());
    w.0.extend_from_slice(&lib.features_fingerprint);
    w.0.extend_from_slice(&lib.mdp_fingerprint);
    for e in lib.entries() {
        w.f64s(e.z.vector().iter());
        for &a in e.policy.actions() {
            w.usize(a);
        }
        for a in 0..lib.n_actions() {
            w.matrix(e.sf.action_matrix(a));
        }
    }
    w.0
}

pub fn library_from_bytes(bytes: &[u8]) -> Result<PolicyLibrary> {
    let mut r = Reader::new(bytes);
    let k = r.count("entries")?;
    let n = r.count("n_states")?;
    let m = r.count("n_actions")?;
    let d = r.count("d")?;
    let features_fp = r.fingerprint()?;
    let mdp_fp = r.fingerprint()?;
    let mut entries = Vec::with_capacity(k.min(1 << 16));
    for _ in 0..k {
        let z = TaskVector::new(DVector::from_vec(r.f64s(d)?))?;
        let actions = (0..n)
            .map(|_| r.count("action"))
            .collect::<Result<Vec<_>>>()?;
        let policy = DeterministicPolicy::new(actions, m)?;
        let per_action = (0..m).map(|_| r.matrix(n, d)).collect::<Result<Vec<_>>>()?;
        entries.push(LibraryEntry {
            z,
            policy,
            sf: SuccessorFeatureTable::from_per_action(per_action)?,
        });
    }
    r.finish()?;
    PolicyLibrary::new(entries, features_fp, mdp_fp)
}

/// Write `bytes` to `path` through a sibling temporary file and a rename,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.partial", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::train_policy_library;
    use crate::mdp::random_mdp;
    use crate::tasks::sample_uniform_sphere;

    fn phi() -> FeatureMap {
        FeatureMap::new(DMatrix::from_fn(5, 3, |i, j| (i * 3 + j) as f64 * 0.37 - 1.1)).unwrap()
    }

    #[test]
    fn feature_map_round_trips() {
        let f = phi();
        let bytes = feature_map_to_bytes(&f);
        assert_eq!(bytes.len(), 16 + 15 * 8);
        assert_eq!(&bytes[0..8], &5u64.to_le_bytes());
        // row-major: second value is phi[0][1]
        assert_eq!(&bytes[24..32], &f.matrix()[(0, 1)].to_le_bytes());
        assert_eq!(feature_map_from_bytes(&bytes).unwrap(), f);
        assert_eq!(feature_map_from_json(&feature_map_to_json(&f).unwrap()).unwrap(), f);
        assert!(feature_map_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(feature_map_from_bytes(&extra).is_err());
    }

    #[test]
    fn task_set_round_trips() {
        let s = sample_uniform_sphere(4, 7, 2).unwrap();
        let bytes = task_set_to_bytes(&s);
        assert_eq!(task_set_from_bytes(&bytes).unwrap(), s);
        let mut bad = bytes.clone();
        bad[0] = 42;
        assert!(task_set_from_bytes(&bad).is_err());
    }

    #[test]
    fn library_round_trips() {
        let mdp = random_mdp(5, 2, 0.9, 1);
        let f = phi();
        let tasks = sample_uniform_sphere(3, 4, 1).unwrap();
        let lib = train_policy_library(&mdp, &f, &tasks, 1e-10).unwrap();
        let bytes = library_to_bytes(&lib);
        assert_eq!(library_from_bytes(&bytes).unwrap(), lib);
        assert!(library_from_bytes(&bytes[..100]).is_err());
    }

    #[test]
    fn atomic_write_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/out.bin");
        write_atomic(&p, b"abc").unwrap();
        assert_eq!(read_file(&p).unwrap(), b"abc");
        assert!(read_file(&dir.path().join("missing")).is_err());
    }
}
