//! Content-addressed image storage.
//!
//! Layout: `<root>/<first 2 hex>/<blob_id>.<ext>`. Writes go through a
//! temporary file and a rename, so concurrent puts of the same bytes are
//! idempotent and readers never see partial files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use super::image;
use super::types::{ImageRef, MediaType};
use crate::hashing::sha256_hex;

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("bytes are not a decodable {0:?} image")]
    UndecodableImage(MediaType),
    #[error("blob {0} not found")]
    MissingBlob(String),
    #[error("storage failure at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug)]
pub struct BlobStore {
    root: PathBuf,
    tmp_counter: AtomicU64,
}

impl BlobStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, BlobError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|source| BlobError::Storage {
            path: root.clone(),
            source,
        })?;
        Ok(BlobStore {
            root,
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, blob_id: &str, media_type: MediaType) -> PathBuf {
        self.root
            .join(&blob_id[..2])
            .join(format!("{blob_id}.{}", media_type.extension()))
    }

    /// Stores `bytes` under their SHA-256 and returns the reference.
    pub fn put(&self, bytes: &[u8], media_type: MediaType) -> Result<ImageRef, BlobError> {
        let (width, height) =
            image::dimensions(bytes, media_type).ok_or(BlobError::UndecodableImage(media_type))?;
        let blob_id = sha256_hex(bytes);
        let path = self.path_for(&blob_id, media_type);
        if !path.exists() {
            let storage = |source| BlobError::Storage {
                path: path.clone(),
                source,
            };
            let dir = path.parent().expect("blob path has a parent");
            fs::create_dir_all(dir).map_err(storage)?;
            let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
            let tmp = dir.join(format!(".{blob_id}.{}.{n}.tmp", std::process::id()));
            let mut f = fs::File::create(&tmp).map_err(storage)?;
            f.write_all(bytes).map_err(storage)?;
            drop(f);
            fs::rename(&tmp, &path).map_err(storage)?;
        }
        Ok(ImageRef::new(blob_id, width, height, media_type)
            .expect("sha256 hex id and decoded dimensions are valid"))
    }

    pub fn get(&self, image: &ImageRef) -> Result<Vec<u8>, BlobError> {
        let path = self.path_for(&image.blob_id, image.media_type);
        fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => BlobError::MissingBlob(image.blob_id.clone()),
            _ => BlobError::Storage { path, source: e },
        })
    }

    /// Looks a blob up by id alone, trying each media type.
    pub fn find(&self, blob_id: &str) -> Option<(MediaType, PathBuf)> {
        if blob_id.len() != 64 || !blob_id.bytes().all(|b| b.is_ascii_hexdigit()) {
            return None;
        }
        [MediaType::Png, MediaType::Jpeg]
            .into_iter()
            .map(|m| (m, self.path_for(blob_id, m)))
            .find(|(_, p)| p.exists())
    }

    /// Rebuilds the full reference for a stored blob id.
    pub fn resolve(&self, blob_id: &str) -> Result<ImageRef, BlobError> {
        let (media_type, path) = self
            .find(blob_id)
            .ok_or_else(|| BlobError::MissingBlob(blob_id.to_string()))?;
        let bytes = fs::read(&path).map_err(|source| BlobError::Storage { path, source })?;
        let (width, height) =
            image::dimensions(&bytes, media_type).ok_or(BlobError::UndecodableImage(media_type))?;
        Ok(ImageRef::new(blob_id.to_string(), width, height, media_type)
            .expect("stored blob ids are valid"))
    }

    /// Stores bytes whose media type is sniffed from the magic number.
    pub fn put_sniffed(&self, bytes: &[u8]) -> Result<ImageRef, BlobError> {
        let media_type = if bytes.starts_with(b"\x89PNG") {
            MediaType::Png
        } else if bytes.starts_with(&[0xff, 0xd8]) {
            MediaType::Jpeg
        } else {
            return Err(BlobError::UndecodableImage(MediaType::Png));
        };
        self.put(bytes, media_type)
    }

    pub fn contains(&self, image: &ImageRef) -> bool {
        self.path_for(&image.blob_id, image.media_type).exists()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn png(seed: u8) -> Vec<u8> {
        let pixels: Vec<u8> = (0..64u32).map(|i| (i as u8).wrapping_mul(seed)).collect();
        image::encode_gray_png(8, 8, &pixels, &[])
    }

    #[test]
    fn same_bytes_same_id() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let a = store.put(&png(3), MediaType::Png).unwrap();
        let b = store.put(&png(3), MediaType::Png).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.width, a.height), (8, 8));
        assert_eq!(store.get(&a).unwrap(), png(3));
        let expected = dir
            .path()
            .join(&a.blob_id[..2])
            .join(format!("{}.png", a.blob_id));
        assert!(expected.exists());
    }

    #[test]
    fn one_byte_difference_changes_id() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let pixels_a = vec![0u8; 64];
        let mut pixels_b = pixels_a.clone();
        pixels_b[17] = 1;
        let bytes_a = image::encode_gray_png(8, 8, &pixels_a, &[]);
        let bytes_b = image::encode_gray_png(8, 8, &pixels_b, &[]);
        let a = store.put(&bytes_a, MediaType::Png).unwrap();
        let b = store.put(&bytes_b, MediaType::Png).unwrap();
        assert_ne!(a.blob_id, b.blob_id);
        assert_eq!(a.blob_id, sha256_hex(&bytes_a));
        assert_eq!(b.blob_id, sha256_hex(&bytes_b));
    }

    #[test]
    fn empty_and_garbage_are_undecodable() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        assert!(matches!(
            store.put(&[], MediaType::Png),
            Err(BlobError::UndecodableImage(_))
        ));
        assert!(matches!(
            store.put(b"hello", MediaType::Jpeg),
            Err(BlobError::UndecodableImage(_))
        ));
    }

    #[test]
    fn missing_blob() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let r = ImageRef::new("ab".repeat(32), 4, 4, MediaType::Png).unwrap();
        assert!(matches!(store.get(&r), Err(BlobError::MissingBlob(_))));
        assert!(store.find(&r.blob_id).is_none());
    }

    #[test]
    fn concurrent_identical_puts() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let bytes = png(7);
        let ids: Vec<String> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..8)
                .map(|_| s.spawn(|| store.put(&bytes, MediaType::Png).unwrap().blob_id))
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert!(ids.windows(2).all(|w| w[0] == w[1]));
        let files: Vec<_> = fs::read_dir(dir.path().join(&ids[0][..2]))
            .unwrap()
            .collect();
        assert_eq!(files.len(), 1);
    }
}
