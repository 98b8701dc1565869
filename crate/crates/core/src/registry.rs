// SPDX-License-Identifier: MIT OR Apache-2.0

//! Persistent pool of opt-out speakers.
//!
//! Directory layout:
//!
//! ```text
//! <dir>/index.json            {"version": u64, "records": {speaker_id: file}}
//! <dir>/records/<file>.trec   one binary record per speaker
//! <dir>/.lock                 held exclusively while mutating
//! ```
//!
//! Mutations write the new record file first, then replace `index.json` by
//! rename. The index is the commit point: record files it does not name are
//! orphans from an interrupted write and are ignored (and reported) on load.
//!
//! Record file layout (little-endian):
//!
//! ```text
//! magic "TRSR" | u16 version | u32 meta_len | meta JSON
//! | u32 d | d × f32 fingerprint | pooled steering tape (TRUS format)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TrusError};
use crate::grid::Cell;
use crate::prototype::IdPrototype;
use crate::selection::{compute_profile, select_mask, InterventionMask, ProfileSummary};
use crate::steering::{compute_steering_grid, SteeringGrid};
use crate::tape::{read_tape, write_tape, ActivationTape};
use crate::tensor::{cosine_sim, l2_normalize, ChannelVector};

pub const RECORD_MAGIC: [u8; 4] = *b"TRSR";
pub const RECORD_VERSION: u16 = 1;

/// Minimum fingerprint cosine for a reference to match a record.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.97;

const INDEX_FILE: &str = "index.json";
const RECORDS_DIR: &str = "records";
const LOCK_FILE: &str = ".lock";

/// Everything needed to steer one opt-out speaker at serving time.
#[derive(Debug, Clone, PartialEq)]
pub struct OptOutRecord {
    pub speaker_id: String,
    /// Unit-norm pooled activation at the last layer, last flow step.
    pub fingerprint: ChannelVector,
    pub steering: SteeringGrid,
    pub mask: InterventionMask,
    pub profile: ProfileSummary,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    /// SHA-256 of the encoded reference tape.
    pub reference_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordMeta {
    speaker_id: String,
    alpha: f64,
    presence: String,
    mask_cells: Vec<Cell>,
    selected_layers: Vec<usize>,
    profile: ProfileSummary,
    created_at: u64,
    reference_digest: String,
}

/// Pooled activation at (L, 1), unit-normalized.
pub fn fingerprint(tape: &ActivationTape) -> Result<ChannelVector> {
    let shape = tape.shape();
    let pooled = tape.pooled_cell(Cell::new(shape.layers, 1))?;
    l2_normalize(&pooled)
}

pub fn tape_digest(tape: &ActivationTape) -> Result<String> {
    let mut bytes = Vec::with_capacity(tape.header().tape_bytes() as usize);
    write_tape(tape, &mut bytes)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl OptOutRecord {
    /// Profile, mask, directions and fingerprint from one reference tape.
    pub fn build(
        speaker_id: &str,
        reference: &ActivationTape,
        proto: &IdPrototype,
        k: f64,
        alpha: f64,
    ) -> Result<Self> {
        let profile = compute_profile(reference, proto, k)?;
        let steering = compute_steering_grid(reference, proto, alpha)?;
        let mut mask = select_mask(&profile);
        mask.retain(|c| steering.direction(c).is_some());
        Ok(Self {
            speaker_id: speaker_id.to_owned(),
            fingerprint: fingerprint(reference)?,
            steering,
            mask,
            profile: profile.summary(),
            created_at: now_millis(),
            reference_digest: tape_digest(reference)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.fingerprint.len()
    }

    pub fn encode<W: Write>(&self, sink: &mut W) -> Result<()> {
        let meta = RecordMeta {
            speaker_id: self.speaker_id.clone(),
            alpha: self.steering.alpha(),
            presence: self.steering.presence_bitmap(),
            mask_cells: self.mask.cells().iter().copied().collect(),
            selected_layers: self.mask.selected_layers().iter().copied().collect(),
            profile: self.profile,
            created_at: self.created_at,
            reference_digest: self.reference_digest.clone(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut head = Vec::with_capacity(14 + json.len() + 4 * self.fingerprint.len());
        head.extend_from_slice(&RECORD_MAGIC);
        head.extend_from_slice(&RECORD_VERSION.to_le_bytes());
        head.extend_from_slice(&(json.len() as u32).to_le_bytes());
        head.extend_from_slice(&json);
        head.extend_from_slice(&(self.fingerprint.len() as u32).to_le_bytes());
        for v in self.fingerprint.iter() {
            head.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&head).map_err(TrusError::SinkFailure)?;
        let tape = self.steering.to_tape(&self.speaker_id, self.channels())?;
        write_tape(&tape, sink)?;
        Ok(())
    }

    pub fn decode<R: Read>(src: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(src, &mut magic)?;
        if magic != RECORD_MAGIC {
            return Err(TrusError::BadMagic(magic));
        }
        let mut b2 = [0u8; 2];
        read_exact(src, &mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != RECORD_VERSION {
            return Err(TrusError::VersionUnsupported(version));
        }
        let meta_len = read_u32(src)? as usize;
        let mut json = vec![0u8; meta_len];
        read_exact(src, &mut json)?;
        let meta: RecordMeta = serde_json::from_slice(&json)?;
        let d = read_u32(src)? as usize;
        let mut fp = vec![0u8; d * 4];
        read_exact(src, &mut fp)?;
        let fingerprint = ChannelVector::new(
            fp.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
        let tape = read_tape(src)?;
        if tape.channels() != d {
            return Err(TrusError::Validation(format!(
                "fingerprint has {d} channels, steering tape has {}",
                tape.channels()
            )));
        }
        let steering = SteeringGrid::from_tape(&tape, &meta.presence, meta.alpha)?;
        let mask = InterventionMask::new(
            meta.mask_cells.into_iter().collect(),
            meta.selected_layers.into_iter().collect(),
        )?;
        if let Some(c) = mask.cells().iter().find(|c| steering.direction(**c).is_none()) {
            return Err(TrusError::Validation(format!("masked cell {c} has no direction")));
        }
        Ok(Self {
            speaker_id: meta.speaker_id,
            fingerprint,
            steering,
            mask,
            profile: meta.profile,
            created_at: meta.created_at,
            reference_digest: meta.reference_digest,
        })
    }
}

fn read_exact<R: Read>(src: &mut R, buf: &mut [u8]) -> Result<()> {
    src.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TrusError::TruncatedPayload("record ended early".into()),
        _ => TrusError::Io(e),
    })
}

fn read_u32<R: Read>(src: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(src, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Index {
    version: u64,
    records: BTreeMap<String, String>,
}

/// Outcome of [`RegistryStore::register_optout`].
#[derive(Debug, Clone, PartialEq)]
pub enum Registration {
    Created(OptOutRecord),
    /// Same speaker, same reference tape: nothing changed.
    Existing(OptOutRecord),
}

impl Registration {
    pub fn record(&self) -> &OptOutRecord {
        match self {
            Registration::Created(r) | Registration::Existing(r) => r,
        }
    }
}

/// In-memory opt-out set with fingerprint matching.
#[derive(Debug, Clone, PartialEq)]
pub struct OptOutPool {
    records: BTreeMap<String, OptOutRecord>,
    match_threshold: f64,
}

impl Default for OptOutPool {
    fn default() -> Self {
        Self::new(DEFAULT_MATCH_THRESHOLD)
    }
}

impl OptOutPool {
    pub fn new(match_threshold: f64) -> Self {
        Self {
            records: BTreeMap::new(),
            match_threshold,
        }
    }

    pub fn match_threshold(&self) -> f64 {
        self.match_threshold
    }

    pub fn set_match_threshold(&mut self, threshold: f64) {
        self.match_threshold = threshold;
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn speaker_ids(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn lookup(&self, speaker_id: &str) -> Option<&OptOutRecord> {
        self.records.get(speaker_id)
    }

    pub fn records(&self) -> impl Iterator<Item = &OptOutRecord> {
        self.records.values()
    }

    /// Replaces any record with the same id.
    pub fn insert(&mut self, record: OptOutRecord) {
        self.records.insert(record.speaker_id.clone(), record);
    }

    pub fn remove(&mut self, speaker_id: &str) -> Option<OptOutRecord> {
        self.records.remove(speaker_id)
    }

    /// Record with the most similar fingerprint, if it clears the threshold.
    /// Ties go to the lexicographically smallest id.
    pub fn match_reference(&self, reference: &ActivationTape) -> Option<&OptOutRecord> {
        let fp = fingerprint(reference).ok()?;
        self.match_fingerprint(&fp)
    }

    pub fn match_fingerprint(&self, fp: &[f32]) -> Option<&OptOutRecord> {
        let mut best: Option<(&OptOutRecord, f64)> = None;
        for record in self.records.values() {
            let Ok(sim) = cosine_sim(fp, &record.fingerprint) else {
                continue;
            };
            if best.is_none_or(|(_, s)| sim > s) {
                best = Some((record, sim));
            }
        }
        best.filter(|(_, s)| *s >= self.match_threshold).map(|(r, _)| r)
    }
}

/// On-disk opt-out pool.
#[derive(Debug)]
pub struct RegistryStore {
    dir: PathBuf,
    version: u64,
    files: BTreeMap<String, String>,
    pool: OptOutPool,
    orphans: Vec<PathBuf>,
}

impl RegistryStore {
    /// Opens `dir`, creating an empty registry if it has no index yet.
    pub fn open_or_create(dir: &Path) -> Result<Self> {
        let mut store = Self::empty(dir);
        store.mutate(|s| {
            if s.dir.join(INDEX_FILE).exists() {
                Ok(())
            } else {
                s.commit_index()
            }
        })?;
        Ok(store)
    }

    /// Opens an existing registry; errors if the index is missing.
    pub fn open(dir: &Path) -> Result<Self> {
        let index = dir.join(INDEX_FILE);
        if !index.exists() {
            return Err(TrusError::MissingMetadata(index));
        }
        let mut store = Self::empty(dir);
        store.reload()?;
        Ok(store)
    }

    fn empty(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            version: 0,
            files: BTreeMap::new(),
            pool: OptOutPool::default(),
            orphans: Vec::new(),
        }
    }

    pub fn with_match_threshold(mut self, threshold: f64) -> Self {
        self.pool.set_match_threshold(threshold);
        self
    }

    pub fn set_match_threshold(&mut self, threshold: f64) {
        self.pool.set_match_threshold(threshold);
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Increases on every committed mutation.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn pool(&self) -> &OptOutPool {
        &self.pool
    }

    pub fn len(&self) -> usize {
        self.pool.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pool.is_empty()
    }

    pub fn lookup(&self, speaker_id: &str) -> Option<&OptOutRecord> {
        self.pool.lookup(speaker_id)
    }

    pub fn match_reference(&self, reference: &ActivationTape) -> Option<&OptOutRecord> {
        self.pool.match_reference(reference)
    }

    /// Record files present on disk but absent from the committed index.
    pub fn orphans(&self) -> &[PathBuf] {
        &self.orphans
    }

    /// Re-reads the committed index and every record it names.
    pub fn reload(&mut self) -> Result<()> {
        let index_path = self.dir.join(INDEX_FILE);
        let index: Index = if index_path.exists() {
            serde_json::from_slice(&fs::read(&index_path)?)?
        } else {
            Index::default()
        };
        let mut records = OptOutPool::new(self.pool.match_threshold());
        for (id, file) in &index.records {
            let path = self.dir.join(RECORDS_DIR).join(file);
            let record = OptOutRecord::decode(&mut BufReader::new(File::open(&path)?))?;
            if &record.speaker_id != id {
                return Err(TrusError::Validation(format!(
                    "index maps '{id}' to a record for '{}'",
                    record.speaker_id
                )));
            }
            records.insert(record);
        }
        let referenced: BTreeSet<&String> = index.records.values().collect();
        let mut orphans = Vec::new();
        let records_dir = self.dir.join(RECORDS_DIR);
        if records_dir.is_dir() {
            for entry in fs::read_dir(&records_dir)? {
                let entry = entry?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if !referenced.contains(&name) {
                    orphans.push(entry.path());
                }
            }
        }
        orphans.sort();
        self.version = index.version;
        self.files = index.records;
        self.pool = records;
        self.orphans = orphans;
        Ok(())
    }

    /// Runs `f` under the exclusive writer lock against fresh on-disk state.
    fn mutate<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        fs::create_dir_all(self.dir.join(RECORDS_DIR))?;
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.dir.join(LOCK_FILE))?;
        lock.lock()?;
        let result = self.reload().and_then(|()| f(self));
        lock.unlock()?;
        result
    }

    fn commit_index(&self) -> Result<()> {
        let index = Index {
            version: self.version,
            records: self.files.clone(),
        };
        let tmp = self.dir.join(format!("{INDEX_FILE}.tmp"));
        {
            let mut f = File::create(&tmp).map_err(TrusError::SinkFailure)?;
            f.write_all(&serde_json::to_vec_pretty(&index)?)
                .map_err(TrusError::SinkFailure)?;
            f.sync_all().map_err(TrusError::SinkFailure)?;
        }
        fs::rename(&tmp, self.dir.join(INDEX_FILE)).map_err(TrusError::SinkFailure)?;
        Ok(())
    }

    fn record_file_name(speaker_id: &str, version: u64) -> String {
        let h = Sha256::digest(speaker_id.as_bytes());
        format!("{}-{version:010}.trec", hex(&h[..8]))
    }

    /// Adds a prebuilt record; used by [`RegistryStore::register_optout`].
    pub fn insert(&mut self, record: OptOutRecord) -> Result<Registration> {
        self.mutate(|store| {
            if let Some(existing) = store.pool.lookup(&record.speaker_id) {
                return if existing.reference_digest == record.reference_digest {
                    Ok(Registration::Existing(existing.clone()))
                } else {
                    Err(TrusError::DuplicateSpeaker(record.speaker_id.clone()))
                };
            }
            let version = store.version + 1;
            let name = Self::record_file_name(&record.speaker_id, version);
            let path = store.dir.join(RECORDS_DIR).join(&name);
            {
                let mut f = File::create(&path).map_err(TrusError::SinkFailure)?;
                let mut buf = Vec::new();
                record.encode(&mut buf)?;
                f.write_all(&buf).map_err(TrusError::SinkFailure)?;
                f.sync_all().map_err(TrusError::SinkFailure)?;
            }
            store.files.insert(record.speaker_id.clone(), name);
            store.version = version;
            store.commit_index()?;
            store.pool.insert(record.clone());
            Ok(Registration::Created(record))
        })
    }

    /// Builds and persists a record for `speaker_id` from its reference tape.
    ///
    /// Registering the same id with a byte-identical tape returns the stored
    /// record and leaves the registry untouched.
    pub fn register_optout(
        &mut self,
        speaker_id: &str,
        reference: &ActivationTape,
        proto: &IdPrototype,
        k: f64,
        alpha: f64,
    ) -> Result<Registration> {
        proto.check_compatible(reference)?;
        if let Some(existing) = self.pool.lookup(speaker_id) {
            let digest = tape_digest(reference)?;
            if existing.reference_digest != digest {
                return Err(TrusError::DuplicateSpeaker(speaker_id.to_owned()));
            }
        }
        let record = OptOutRecord::build(speaker_id, reference, proto, k, alpha)?;
        self.insert(record)
    }

    /// Deletes the record; returns whether one existed.
    pub fn remove_optout(&mut self, speaker_id: &str) -> Result<bool> {
        self.mutate(|store| {
            let Some(file) = store.files.remove(speaker_id) else {
                return Ok(false);
            };
            store.version += 1;
            store.commit_index()?;
            store.pool.remove(speaker_id);
            // index already committed; a leftover file is only an orphan
            let _ = fs::remove_file(store.dir.join(RECORDS_DIR).join(file));
            Ok(true)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{CellGrid, GridShape};
    use crate::prototype::build_prototype;

    fn tape(id: &str, f: impl Fn(Cell) -> Vec<f32>) -> ActivationTape {
        ActivationTape::from_pooled(
            id,
            CellGrid::from_fn(GridShape::new(2, 3), |c| ChannelVector::new(f(c))),
        )
        .unwrap()
    }

    fn proto() -> IdPrototype {
        let a = tape("r1", |c| vec![1.0, 0.0, 0.2 * c.step as f32]);
        let b = tape("r2", |c| vec![0.0, 1.0, 0.1 * c.layer as f32]);
        build_prototype([&a, &b]).unwrap()
    }

    #[test]
    fn register_lookup_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = RegistryStore::open_or_create(dir.path()).unwrap();
        let p = proto();
        let opt = tape("o", |c| vec![2.0, -1.0, c.step as f32 - c.layer as f32]);
        let rec = reg.register_optout("o", &opt, &p, 1.0, 1.2).unwrap();
        assert!(matches!(rec, Registration::Created(_)));
        assert_eq!(reg.version(), 1);
        assert_eq!(reg.lookup("o"), Some(rec.record()));
        assert!(rec
            .record()
            .mask
            .cells()
            .iter()
            .all(|c| rec.record().steering.direction(*c).is_some()));

        let again = reg.register_optout("o", &opt, &p, 1.0, 1.2).unwrap();
        assert!(matches!(again, Registration::Existing(_)));
        assert_eq!(again.record(), rec.record());
        assert_eq!(reg.version(), 1);

        let other = tape("o", |_| vec![5.0, 5.0, 5.0]);
        assert!(matches!(
            reg.register_optout("o", &other, &p, 1.0, 1.2),
            Err(TrusError::DuplicateSpeaker(_))
        ));

        let reopened = RegistryStore::open(dir.path()).unwrap();
        assert_eq!(reopened.lookup("o"), Some(rec.record()));
        assert!(reopened.orphans().is_empty());
    }

    #[test]
    fn prototype_twin_gets_empty_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = RegistryStore::open_or_create(dir.path()).unwrap();
        let a = tape("a", |c| vec![1.0, c.layer as f32, c.step as f32]);
        let p = build_prototype([&a]).unwrap();
        let r = reg.register_optout("a", &a, &p, 1.0, 1.2).unwrap();
        assert!(r.record().mask.is_empty());
        assert_eq!(r.record().steering.present_count(), 0);
    }

    #[test]
    fn remove_then_match_is_none() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = RegistryStore::open_or_create(dir.path()).unwrap();
        let p = proto();
        let opt = tape("o", |c| vec![2.0, -1.0, c.step as f32]);
        reg.register_optout("o", &opt, &p, 1.0, 1.2).unwrap();
        assert_eq!(reg.match_reference(&opt).unwrap().speaker_id, "o");
        assert!(reg.remove_optout("o").unwrap());
        assert!(!reg.remove_optout("o").unwrap());
        assert!(reg.match_reference(&opt).is_none());
        assert_eq!(reg.version(), 2);
    }

    #[test]
    fn orthogonal_fingerprint_does_not_match() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = RegistryStore::open_or_create(dir.path()).unwrap();
        let p = proto();
        let opt = tape("o", |_| vec![1.0, 0.0, 0.0]);
        reg.register_optout("o", &opt, &p, 1.0, 1.2).unwrap();
        let probe = tape("q", |_| vec![0.0, 1.0, 0.0]);
        assert!(reg.match_reference(&probe).is_none());
    }

    #[test]
    fn orphan_files_are_reported_and_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = RegistryStore::open_or_create(dir.path()).unwrap();
        let p = proto();
        reg.register_optout("o", &tape("o", |_| vec![3.0, 1.0, 0.0]), &p, 1.0, 1.2)
            .unwrap();
        // simulate a crash after the record write but before the index swap
        let stray = dir.path().join(RECORDS_DIR).join("deadbeef-0000000002.trec");
        fs::write(&stray, b"partial").unwrap();
        let reopened = RegistryStore::open(dir.path()).unwrap();
        assert_eq!(reopened.orphans(), &[stray]);
        assert_eq!(reopened.len(), 1);
    }

    #[test]
    fn missing_index_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            RegistryStore::open(&dir.path().join("nope")),
            Err(TrusError::MissingMetadata(_))
        ));
    }

    #[test]
    fn created_registry_reopens_empty() {
        let dir = tempfile::tempdir().unwrap();
        RegistryStore::open_or_create(dir.path()).unwrap();
        let reg = RegistryStore::open(dir.path()).unwrap();
        assert!(reg.is_empty());
        assert_eq!(reg.version(), 0);
    }
}
