//! Image bytes by reference: files under a root directory plus
//! content-addressed uploads held in memory.

use std::collections::HashMap;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::sync::RwLock;

use sha2::{Digest, Sha256};

const UPLOAD_PREFIX: &str = "upload:";

#[derive(Debug, Default)]
pub struct ImageLibrary {
    root: Option<PathBuf>,
    uploads: RwLock<HashMap<String, Vec<u8>>>,
}

impl ImageLibrary {
    pub fn new(root: Option<PathBuf>) -> Self {
        Self {
            root,
            uploads: RwLock::default(),
        }
    }

    /// Stores upload bytes and returns their reference, `upload:<sha256>`.
    pub fn put_upload(&self, bytes: Vec<u8>) -> String {
        let id = format!("{UPLOAD_PREFIX}{}", hex::encode(Sha256::digest(&bytes)));
        self.uploads
            .write()
            .expect("upload cache poisoned")
            .entry(id.clone())
            .or_insert(bytes);
        id
    }

    fn file_path(&self, image_ref: &str) -> Option<PathBuf> {
        let root = self.root.as_ref()?;
        let rel = Path::new(image_ref);
        // only plain relative paths below the root
        if rel
            .components()
            .any(|c| !matches!(c, Component::Normal(_)))
        {
            return None;
        }
        Some(root.join(rel))
    }

    pub fn get(&self, image_ref: &str) -> Option<Vec<u8>> {
        if image_ref.starts_with(UPLOAD_PREFIX) {
            return self
                .uploads
                .read()
                .expect("upload cache poisoned")
                .get(image_ref)
                .cloned();
        }
        fs::read(self.file_path(image_ref)?).ok()
    }
}

/// MIME type guessed from the reference's extension, or sniffed from bytes.
pub fn mime_type(image_ref: &str, bytes: &[u8]) -> &'static str {
    let ext = Path::new(image_ref)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("tif" | "tiff") => "image/tiff",
        _ if bytes.starts_with(b"\x89PNG") => "image/png",
        _ if bytes.starts_with(&[0xFF, 0xD8]) => "image/jpeg",
        _ => "application/octet-stream",
    }
}
