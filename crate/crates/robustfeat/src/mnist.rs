//! MNIST files on disk: download, checksum and IDX loading.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use md5::{Digest, Md5};
use robustfeat_core::data::RawSplit;

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

pub const MIRRORS: [&str; 3] = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
    "http://yann.lecun.com/exdb/mnist/",
];

/// Compressed file name and its MD5.
pub const FILES: [(&str, &str); 4] = [
    ("train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
    ("train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"),
    ("t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"),
    ("t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

pub fn md5_hex(bytes: &[u8]) -> String {
    hex::encode(Md5::digest(bytes))
}

/// Reads `<stem>` or `<stem>.gz` from `dir`, decompressing as needed.
fn read_idx(dir: &Path, stem: &str) -> Result<Vec<u8>> {
    let plain = dir.join(stem);
    if plain.exists() {
        return fs::read(&plain).map_err(Error::io(plain));
    }
    let gz = dir.join(format!("{stem}.gz"));
    let compressed = fs::read(&gz).map_err(Error::io(&gz))?;
    let mut out = Vec::new();
    GzDecoder::new(compressed.as_slice())
        .read_to_end(&mut out)
        .map_err(|e| Error::format(&gz, format!("gzip: {e}")))?;
    Ok(out)
}

pub fn load_split(dir: &Path, split: Split) -> Result<RawSplit> {
    let p = split.prefix();
    let images = read_idx(dir, &format!("{p}-images-idx3-ubyte"))?;
    let labels = read_idx(dir, &format!("{p}-labels-idx1-ubyte"))?;
    RawSplit::from_idx(&images, &labels).map_err(|e| Error::format(dir.join(p), e.to_string()))
}

/// Downloads any missing file into `dir`, trying each mirror in turn, and
/// verifies every file against its published MD5. Returns the paths.
pub fn fetch(dir: &Path, mirrors: &[String], force: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut out = Vec::new();
    for (name, md5) in FILES {
        let path = dir.join(name);
        if path.exists() && !force {
            verify(&path, name, md5)?;
            out.push(path);
            continue;
        }
        let mut last = None;
        for base in mirrors {
            let url = format!("{base}{name}");
            match download(&url) {
                Ok(bytes) if md5_hex(&bytes) == md5 => {
                    write_atomic(&path, &bytes)?;
                    last = None;
                    break;
                }
                Ok(bytes) => {
                    last = Some(Error::Checksum {
                        file: url,
                        expected: md5.into(),
                        actual: md5_hex(&bytes),
                    })
                }
                Err(e) => last = Some(e),
            }
        }
        if let Some(e) = last {
            return Err(e);
        }
        out.push(path);
    }
    Ok(out)
}

fn verify(path: &Path, name: &str, md5: &str) -> Result<()> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let actual = md5_hex(&bytes);
    if actual != md5 {
        return Err(Error::Checksum {
            file: name.into(),
            expected: md5.into(),
            actual,
        });
    }
    Ok(())
}

fn download(url: &str) -> Result<Vec<u8>> {
    let fail = |message: String| Error::Download {
        url: url.into(),
        message,
    };
    let resp = ureq::get(url)
        .timeout(std::time::Duration::from_secs(60))
        .call()
        .map_err(|e| fail(e.to_string()))?;
    let mut bytes = Vec::new();
    resp.into_reader()
        .take(64 << 20)
        .read_to_end(&mut bytes)
        .map_err(|e| fail(e.to_string()))?;
    Ok(bytes)
}
