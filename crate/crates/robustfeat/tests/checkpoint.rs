use std::path::Path;

use robustfeat::checkpoint::{Checkpoint, MAGIC};
use robustfeat::Error;
use robustfeat_core::data::{synthetic_digits, Dataset, NormMode, NormStats};
use robustfeat_core::loss::CenterRule;
use robustfeat_core::model::{Architecture, ArchitectureDescriptor, Model};
use robustfeat_core::{rng, CenterBank};
use rand::Rng as _;

fn sample(arch: Architecture, mode: NormMode) -> (Checkpoint, Dataset) {
    let model = Model::build(ArchitectureDescriptor::mnist(arch), 11).unwrap();
    let mut bank = CenterBank::new(10, model.feature_dim(), 0.25, 1.0).unwrap();
    bank.rule = CenterRule::Gradient;
    let mut r = rng::rng(3);
    for v in bank.centers.data_mut() {
        *v = r.gen_range(-2.0..2.0);
    }
    let raw = synthetic_digits(20, 4);
    let norm = NormStats::fit(&raw, mode).unwrap();
    let data = Dataset::from_raw(&raw, &norm, 10).unwrap();
    (
        Checkpoint {
            model,
            bank,
            norm: Some(norm),
        },
        data,
    )
}

#[test]
fn round_trip_preserves_everything() {
    for arch in Architecture::ALL {
        for mode in [NormMode::Global, NormMode::PerPixel] {
            let (ck, data) = sample(arch, mode);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
            assert_eq!(back.model.descriptor(), ck.model.descriptor());
            assert_eq!(back.model.params(), ck.model.params());
            assert_eq!(back.bank, ck.bank);
            assert_eq!(back.norm, ck.norm);
            let (x, _) = data.batch(&(0..data.len()).collect::<Vec<_>>());
            let a = ck.model.predict(&x).unwrap();
            let b = back.model.predict(&x).unwrap();
            assert_eq!(a.logits.data(), b.logits.data(), "{arch:?}");
            // Serialization is a pure function of the contents.
            assert_eq!(back.to_bytes(), bytes);
        }
    }
}

#[test]
fn save_and_load_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/model.ckpt");
    let (ck, _) = sample(Architecture::Lenet2d, NormMode::Global);
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.model.params(), ck.model.params());
    assert!(!path.with_extension("partial").exists());
}

#[test]
fn checkpoint_without_normalization() {
    let (mut ck, _) = sample(Architecture::Mlp200, NormMode::Global);
    ck.norm = None;
    let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("x")).unwrap();
    assert_eq!(back.norm, None);
}

fn expect_format(bytes: &[u8], needle: &str) {
    match Checkpoint::from_bytes(bytes, Path::new("bad.ckpt")) {
        Err(Error::Format { message, .. }) => assert!(message.contains(needle), "{message}"),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn corruption_is_detected() {
    let (ck, _) = sample(Architecture::Mlp200, NormMode::Global);
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..8], MAGIC);

    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x01;
    expect_format(&flipped, "checksum");

    expect_format(&bytes[..bytes.len() - 100], "checksum");
    expect_format(&bytes[..20], "magic");

    let mut magic = bytes.clone();
    magic[0] = b'X';
    expect_format(&magic, "magic");
}

#[test]
fn missing_file_is_a_missing_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let err = Checkpoint::load(&dir.path().join("nope.ckpt")).unwrap_err();
    assert!(matches!(err, Error::Missing(_)));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn wrong_shapes_are_rejected() {
    // Re-serialize a model whose parameters were swapped for other shapes:
    // decoding must fail rather than build a broken model.
    let (ck, _) = sample(Architecture::Mlp200, NormMode::Global);
    let mut bytes = ck.to_bytes();
    bytes.truncate(bytes.len() - 32);
    // the first tensor header: name length, name, ndim, dims
    let header = 8 + 4 + 1 + 12 + 4 + 4;
    let name_len = u16::from_le_bytes([bytes[header], bytes[header + 1]]) as usize;
    let dims_at = header + 2 + name_len + 1;
    let d0 = u32::from_le_bytes(bytes[dims_at..dims_at + 4].try_into().unwrap());
    let d1 = u32::from_le_bytes(bytes[dims_at + 4..dims_at + 8].try_into().unwrap());
    bytes[dims_at..dims_at + 4].copy_from_slice(&d1.to_le_bytes());
    bytes[dims_at + 4..dims_at + 8].copy_from_slice(&d0.to_le_bytes());
    use sha2::Digest;
    let digest = sha2::Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    assert!(Checkpoint::from_bytes(&bytes, Path::new("x")).is_err());
}
