//! Append-only block storage keyed by block id (1-based).

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::codec::Canonical;
use crate::ledger::Block;

pub trait BlockStore {
    /// Number of stored blocks; ids run from 1 to `len()`.
    fn len(&self) -> u64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Raw canonical bytes of block `id`.
    fn get_raw(&self, id: u64) -> io::Result<Option<Vec<u8>>>;

    /// Stores raw bytes for block `id`, which must be an existing id or the
    /// next one.
    fn put_raw(&mut self, id: u64, bytes: &[u8]) -> io::Result<()>;

    fn get(&self, id: u64) -> io::Result<Option<Block>> {
        match self.get_raw(id)? {
            None => Ok(None),
            Some(b) => Block::decode(&b)
                .map(Some)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("block {id}: {e}"))),
        }
    }

    fn put(&mut self, block: &Block) -> io::Result<()> {
        self.put_raw(block.header.id, &block.encode())
    }
}

fn check_slot(id: u64, len: u64) -> io::Result<()> {
    if id == 0 || id > len + 1 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("block id {id} is not in 1..={}", len + 1),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct MemBlockStore {
    blocks: Vec<Vec<u8>>,
}

impl MemBlockStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl BlockStore for MemBlockStore {
    fn len(&self) -> u64 {
        self.blocks.len() as u64
    }

    fn get_raw(&self, id: u64) -> io::Result<Option<Vec<u8>>> {
        Ok(id.checked_sub(1).and_then(|i| self.blocks.get(i as usize)).cloned())
    }

    fn put_raw(&mut self, id: u64, bytes: &[u8]) -> io::Result<()> {
        check_slot(id, self.len())?;
        if id > self.len() {
            self.blocks.push(bytes.to_vec());
        } else {
            self.blocks[id as usize - 1] = bytes.to_vec();
        }
        Ok(())
    }
}

/// One file per block named by the zero-padded id. Writes go to a temporary
/// file that is synced and then renamed over the target.
#[derive(Debug)]
pub struct DirBlockStore {
    dir: PathBuf,
    len: u64,
}

impl DirBlockStore {
    /// Opens `dir`, creating it if needed, and counts the contiguous blocks
    /// already present.
    pub fn open(dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut store = DirBlockStore { dir, len: 0 };
        while store.path(store.len + 1).exists() {
            store.len += 1;
        }
        Ok(store)
    }

    fn path(&self, id: u64) -> PathBuf {
        self.dir.join(format!("{id:020}.blk"))
    }
}

impl BlockStore for DirBlockStore {
    fn len(&self) -> u64 {
        self.len
    }

    fn get_raw(&self, id: u64) -> io::Result<Option<Vec<u8>>> {
        if id == 0 || id > self.len {
            return Ok(None);
        }
        fs::read(self.path(id)).map(Some)
    }

    fn put_raw(&mut self, id: u64, bytes: &[u8]) -> io::Result<()> {
        check_slot(id, self.len)?;
        let tmp = self.dir.join(format!("{id:020}.tmp"));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, self.path(id))?;
        self.len = self.len.max(id);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::Digest;
    use crate::ledger::Header;

    fn block(id: u64) -> Block {
        Block {
            header: Header { id, txs_root: Digest::ZERO, rcp_root: Digest::ZERO, st_root: Digest::new([id as u8; 32]) },
            txs: vec![],
            receipts: vec![],
        }
    }

    fn exercise(store: &mut dyn BlockStore) {
        assert!(store.is_empty());
        assert!(store.put(&block(2)).is_err());
        store.put(&block(1)).unwrap();
        store.put(&block(2)).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.get(2).unwrap(), Some(block(2)));
        assert_eq!(store.get(3).unwrap(), None);
        assert_eq!(store.get(0).unwrap(), None);
        let mut raw = store.get_raw(1).unwrap().unwrap();
        raw.push(0);
        store.put_raw(1, &raw).unwrap();
        assert_eq!(store.get(1).unwrap_err().kind(), io::ErrorKind::InvalidData);
    }

    #[test]
    fn memory_store() {
        exercise(&mut MemBlockStore::new());
    }

    #[test]
    fn directory_store_persists() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = DirBlockStore::open(dir.path()).unwrap();
        exercise(&mut s);
        let names: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert!(names.contains(&"00000000000000000002.blk".to_string()));
        assert!(names.iter().all(|n| n.ends_with(".blk")));
        let reopened = DirBlockStore::open(dir.path()).unwrap();
        assert_eq!(reopened.len(), 2);
        assert_eq!(reopened.get(2).unwrap(), Some(block(2)));
    }
}
