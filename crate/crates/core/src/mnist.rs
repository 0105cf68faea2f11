//! IDX decoding and the class-indexed digit store.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const DIGIT_SIDE: usize = 28;
pub const DIGIT_PIXELS: usize = DIGIT_SIDE * DIGIT_SIDE;
pub const N_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxKind {
    Images,
    Labels,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<u32>,
}

/// Raw images as bytes, `rows x cols` each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageStack {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl ImageStack {
    pub fn len(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Intensities of image `i` mapped to `[0, 1]` by division by 255.
    pub fn normalized(&self, i: usize) -> Vec<f32> {
        self.image(i).iter().map(|&b| b as f32 / 255.0).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IdxData {
    Images(ImageStack),
    Labels(Vec<u8>),
}

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

fn maybe_gunzip(bytes: &[u8]) -> Result<std::borrow::Cow<'_, [u8]>> {
    if bytes.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("gzip stream: {e}")))?;
        Ok(out.into())
    } else {
        Ok(bytes.into())
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Length(format!("header truncated at byte {at}")))
}

pub fn parse_header(bytes: &[u8]) -> Result<IdxHeader> {
    let magic = be_u32(bytes, 0)?;
    let ndims = match magic {
        IMAGE_MAGIC => 3,
        LABEL_MAGIC => 1,
        other => return Err(Error::Format(format!("unknown IDX magic 0x{other:08x}"))),
    };
    let dims = (0..ndims).map(|i| be_u32(bytes, 4 + 4 * i)).collect::<Result<Vec<_>>>()?;
    Ok(IdxHeader { magic, dims })
}

/// Decodes an IDX file (optionally gzip-compressed).
pub fn parse_idx(bytes: &[u8], expected: IdxKind) -> Result<IdxData> {
    let bytes = maybe_gunzip(bytes)?;
    let header = parse_header(&bytes)?;
    let want = match expected {
        IdxKind::Images => IMAGE_MAGIC,
        IdxKind::Labels => LABEL_MAGIC,
    };
    if header.magic != want {
        return Err(Error::Format(format!(
            "expected magic 0x{want:08x} for {expected:?}, found 0x{:08x}",
            header.magic
        )));
    }
    let offset = 4 + 4 * header.dims.len();
    let count: usize = header.dims.iter().map(|&d| d as usize).product();
    let payload = &bytes[offset..];
    if payload.len() != count {
        return Err(Error::Length(format!(
            "header declares {count} bytes of payload, found {}",
            payload.len()
        )));
    }
    match expected {
        IdxKind::Images => Ok(IdxData::Images(ImageStack {
            rows: header.dims[1] as usize,
            cols: header.dims[2] as usize,
            pixels: payload.to_vec(),
        })),
        IdxKind::Labels => {
            if let Some((i, &bad)) = payload.iter().enumerate().find(|(_, &l)| l as usize >= N_CLASSES) {
                return Err(Error::Value(format!("label {bad} at position {i} outside 0..=9")));
            }
            Ok(IdxData::Labels(payload.to_vec()))
        }
    }
}

pub fn parse_images(bytes: &[u8]) -> Result<ImageStack> {
    match parse_idx(bytes, IdxKind::Images)? {
        IdxData::Images(s) => Ok(s),
        IdxData::Labels(_) => unreachable!(),
    }
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    match parse_idx(bytes, IdxKind::Labels)? {
        IdxData::Labels(l) => Ok(l),
        IdxData::Images(_) => unreachable!(),
    }
}

/// Serializes back to uncompressed IDX bytes.
pub fn encode_idx(data: &IdxData) -> Vec<u8> {
    let mut out = Vec::new();
    match data {
        IdxData::Images(s) => {
            out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
            for d in [s.len(), s.rows, s.cols] {
                out.extend_from_slice(&(d as u32).to_be_bytes());
            }
            out.extend_from_slice(&s.pixels);
        }
        IdxData::Labels(l) => {
            out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
            out.extend_from_slice(&(l.len() as u32).to_be_bytes());
            out.extend_from_slice(l);
        }
    }
    out
}

/// Reads a file, trying `<path>` and then `<path>.gz`.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            let mut gz = path.as_os_str().to_owned();
            gz.push(".gz");
            fs::read(&gz).map_err(|_| {
                Error::Io(std::io::Error::new(e.kind(), format!("{} (or .gz) not found", path.display())))
            })
        }
        Err(e) => Err(e.into()),
    }
}

/// Immutable per-class index over one split's 28x28 exemplars.
#[derive(Clone, Debug, PartialEq)]
pub struct DigitStore {
    split: Split,
    pixels: Vec<f32>,
    labels: Vec<u8>,
    by_class: Vec<Vec<usize>>,
}

impl DigitStore {
    /// Groups images by label. Every class must be present unless `strict`
    /// is false.
    pub fn build(images: &ImageStack, labels: &[u8], split: Split, strict: bool) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if images.rows != DIGIT_SIDE || images.cols != DIGIT_SIDE {
            return Err(Error::Dimension(format!(
                "digits must be 28x28, got {}x{}",
                images.rows, images.cols
            )));
        }
        let mut by_class = vec![Vec::new(); N_CLASSES];
        for (i, &l) in labels.iter().enumerate() {
            let c = l as usize;
            if c >= N_CLASSES {
                return Err(Error::Value(format!("label {l} at position {i} outside 0..=9")));
            }
            by_class[c].push(i);
        }
        if strict {
            if let Some(c) = by_class.iter().position(Vec::is_empty) {
                return Err(Error::Data(format!("class {c} has no exemplars")));
            }
        }
        let pixels = images.pixels.iter().map(|&b| b as f32 / 255.0).collect();
        Ok(DigitStore { split, pixels, labels: labels.to_vec(), by_class })
    }

    /// Loads `<prefix>-images-idx3-ubyte` and `<prefix>-labels-idx1-ubyte`
    /// (plain or `.gz`) from `dir`.
    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let p = split.file_prefix();
        let images = parse_images(&read_maybe_gz(&dir.join(format!("{p}-images-idx3-ubyte")))?)?;
        let labels = parse_labels(&read_maybe_gz(&dir.join(format!("{p}-labels-idx1-ubyte")))?)?;
        Self::build(&images, &labels, split, true)
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Original dataset indices of class `c`, ascending.
    pub fn class_indices(&self, c: usize) -> &[usize] {
        &self.by_class[c]
    }

    pub fn class_count(&self, c: usize) -> usize {
        self.by_class[c].len()
    }

    pub fn label(&self, index: usize) -> Option<u8> {
        self.labels.get(index).copied()
    }

    /// Normalized 28x28 pixels of the exemplar at original index `index`.
    pub fn exemplar(&self, index: usize) -> Result<&[f32]> {
        if index >= self.labels.len() {
            return Err(Error::Index(format!("exemplar {index} outside 0..{}", self.labels.len())));
        }
        Ok(&self.pixels[index * DIGIT_PIXELS..(index + 1) * DIGIT_PIXELS])
    }

    /// For each class, the exemplar with the smallest original index.
    pub fn first_instances(&self) -> Result<[usize; N_CLASSES]> {
        if self.split != Split::Train {
            return Err(Error::Usage("first instances are defined on the train split".into()));
        }
        let mut out = [0; N_CLASSES];
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = *self.by_class[c]
                .first()
                .ok_or_else(|| Error::Data(format!("class {c} has no exemplars")))?;
        }
        Ok(out)
    }
}

/// Both splits, shareable read-only across runs.
#[derive(Clone, Debug)]
pub struct Mnist {
    pub train: DigitStore,
    pub test: DigitStore,
}

impl Mnist {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Mnist { train: DigitStore::load(dir, Split::Train)?, test: DigitStore::load(dir, Split::Test)? })
    }

    pub fn store(&self, split: Split) -> &DigitStore {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stack(n: usize, fill: impl Fn(usize) -> u8) -> ImageStack {
        ImageStack { rows: 28, cols: 28, pixels: (0..n * DIGIT_PIXELS).map(fill).collect() }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let bytes = [0u8, 0, 0, 0, 0, 0, 0, 1, 5];
        assert!(matches!(parse_idx(&bytes, IdxKind::Labels), Err(Error::Format(_))));
        let labels = encode_idx(&IdxData::Labels(vec![1, 2]));
        assert!(matches!(parse_idx(&labels, IdxKind::Images), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_and_overlong_payloads() {
        let mut bytes = encode_idx(&IdxData::Images(stack(2, |i| i as u8)));
        bytes.pop();
        assert!(matches!(parse_idx(&bytes, IdxKind::Images), Err(Error::Length(_))));
        let mut bytes = encode_idx(&IdxData::Labels(vec![1, 2, 3]));
        bytes.push(0);
        assert!(matches!(parse_idx(&bytes, IdxKind::Labels), Err(Error::Length(_))));
        assert!(matches!(parse_idx(&[0, 0, 8], IdxKind::Labels), Err(Error::Length(_))));
    }

    #[test]
    fn label_out_of_range() {
        let bytes = encode_idx(&IdxData::Labels(vec![1, 10]));
        assert!(matches!(parse_idx(&bytes, IdxKind::Labels), Err(Error::Value(_))));
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let raw = encode_idx(&IdxData::Labels(vec![3, 1, 4, 1, 5]));
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&raw).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(parse_labels(&gz).unwrap(), vec![3, 1, 4, 1, 5]);
    }

    #[test]
    fn normalization_endpoints() {
        let s = stack(1, |i| if i == 0 { 255 } else { 0 });
        let store = DigitStore::build(&s, &[4], Split::Train, false).unwrap();
        let px = store.exemplar(0).unwrap();
        assert_eq!(px[0], 1.0);
        assert_eq!(px[1], 0.0);
    }

    #[test]
    fn build_groups_by_class() {
        let s = stack(3, |i| (i % 256) as u8);
        let store = DigitStore::build(&s, &[1, 1, 7], Split::Train, false).unwrap();
        assert_eq!(store.class_indices(1), &[0, 1]);
        assert_eq!(store.class_indices(7), &[2]);
        assert_eq!(store.class_count(0), 0);
        assert!(matches!(DigitStore::build(&s, &[1, 1, 7], Split::Train, true), Err(Error::Data(_))));
        let s2 = stack(2, |_| 0);
        assert!(matches!(DigitStore::build(&s2, &[1, 1, 7], Split::Train, false), Err(Error::Consistency(_))));
    }

    #[test]
    fn first_instances_rules() {
        let s = stack(3, |_| 0);
        let store = DigitStore::build(&s, &[3, 3, 0], Split::Train, false).unwrap();
        assert!(matches!(store.first_instances(), Err(Error::Data(_))));
        let labels: Vec<u8> = vec![3, 3, 0, 1, 2, 4, 5, 6, 7, 8, 9, 0];
        let s = stack(labels.len(), |_| 0);
        let store = DigitStore::build(&s, &labels, Split::Train, true).unwrap();
        let first = store.first_instances().unwrap();
        assert_eq!(first[3], 0);
        assert_eq!(first[0], 2);
        assert_eq!(first, store.first_instances().unwrap());
        for (c, &i) in first.iter().enumerate() {
            assert_eq!(store.label(i), Some(c as u8));
        }
        let test = DigitStore::build(&s, &labels, Split::Test, true).unwrap();
        assert!(matches!(test.first_instances(), Err(Error::Usage(_))));
    }

    proptest! {
        #[test]
        fn image_roundtrip_is_byte_exact(n in 1usize..4, seed in any::<u8>()) {
            let s = stack(n, |i| (i as u8).wrapping_mul(31).wrapping_add(seed));
            let bytes = encode_idx(&IdxData::Images(s.clone()));
            prop_assert_eq!(encode_idx(&parse_idx(&bytes, IdxKind::Images).unwrap()), bytes);
            prop_assert_eq!(parse_images(&encode_idx(&IdxData::Images(s.clone()))).unwrap(), s);
        }

        #[test]
        fn first_instances_independent_of_order(labels in proptest::collection::vec(0u8..10, 10..40)) {
            let mut labels = labels;
            labels.extend(0..10u8);
            let s = stack(labels.len(), |_| 0);
            let store = DigitStore::build(&s, &labels, Split::Train, true).unwrap();
            let first = store.first_instances().unwrap();
            for c in 0..10u8 {
                let linear = labels.iter().position(|&l| l == c).unwrap();
                prop_assert_eq!(first[c as usize], linear);
            }
        }
    }
}
