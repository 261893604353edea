//! On-disk datasets: a `manifest.json` plus two `.ten` files per sequence.
//!
//! Sequences are loaded lazily so training never holds more than a batch.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spatem_tensor::{tenfile, Rng, Tensor};

use crate::error::{Error, Result};
use crate::synth::{self, ContextSequence, GeneratorConfig, MapSheet, Provenance, CLASSES, SEQUENCE_LEN};

pub const FORMAT: &str = "spatem-dataset";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: usize,
    pub split: Split,
    /// `[13, 3, P, P]` tile file, relative to the dataset directory.
    pub tiles: String,
    /// `[4, P, P]` mask file, relative to the dataset directory.
    pub mask: String,
    pub positive: bool,
    pub class_pixels: [usize; 4],
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tile_size: usize,
    pub sequence_len: usize,
    pub classes: Vec<String>,
    pub seed: u64,
    pub generator: GeneratorConfig,
    /// Foreground pixels per class over all samples.
    pub class_pixels: [usize; 4],
    pub samples: Vec<SampleEntry>,
}

fn safe_name(name: &str) -> bool {
    !name.is_empty()
        && name.ends_with(".ten")
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl Manifest {
    /// Parses and checks internal consistency; files are not touched.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(bytes).map_err(|e| Error::Data(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Data(format!("manifest: {m}")));
        if self.format != FORMAT || self.version != VERSION {
            return fail(format!("unsupported format {} v{}", self.format, self.version));
        }
        if self.sequence_len != SEQUENCE_LEN || self.classes != CLASSES {
            return fail("unexpected sequence length or class list".into());
        }
        if self.tile_size == 0 || self.tile_size != self.generator.tile_size {
            return fail(format!("tile size {} disagrees with the generator", self.tile_size));
        }
        let area = self.tile_size.checked_mul(self.tile_size).ok_or_else(|| Error::Data("manifest: tile size overflows".into()))?;
        let mut ids: Vec<usize> = self.samples.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return fail("duplicate sample ids".into());
        }
        let mut totals = [0usize; 4];
        for s in &self.samples {
            if !safe_name(&s.tiles) || !safe_name(&s.mask) || s.tiles == s.mask {
                return fail(format!("sample {}: bad file names", s.id));
            }
            if s.class_pixels.iter().any(|&c| c > area) {
                return fail(format!("sample {}: class pixels exceed the tile", s.id));
            }
            if s.positive != s.class_pixels.iter().any(|&c| c > 0) {
                return fail(format!("sample {}: positive flag disagrees with class pixels", s.id));
            }
            for (t, c) in totals.iter_mut().zip(s.class_pixels) {
                *t = t.checked_add(c).ok_or_else(|| Error::Data("manifest: pixel totals overflow".into()))?;
            }
        }
        if totals != self.class_pixels {
            return fail(format!("class totals {:?} do not sum to {:?}", self.class_pixels, totals));
        }
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.positive).count()
    }

    /// Sheet samples only, i.e. without ambiguous pair members.
    pub fn sheet_balance(&self) -> (usize, usize) {
        let sheet = self.samples.iter().filter(|s| s.provenance.pair.is_none());
        sheet.fold((0, 0), |(p, n), s| if s.positive { (p + 1, n) } else { (p, n + 1) })
    }
}

/// Dataset directory with a parsed manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

fn read_ten(path: &Path) -> Result<Tensor<f32>> {
    match fs::read(path) {
        Ok(bytes) => tenfile::decode(&bytes).map_err(|e| Error::ten(path, e)),
        Err(e) => Err(Error::io(path, e)),
    }
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = Manifest::parse(&bytes).map_err(|e| Error::corrupt(&path, e.to_string()))?;
        Ok(Self { dir: dir.to_path_buf(), manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn tile_size(&self) -> usize {
        self.manifest.tile_size
    }

    /// Reads sample `i` and checks it against its manifest entry.
    pub fn load(&self, i: usize) -> Result<ContextSequence> {
        let e = self.manifest.samples.get(i).ok_or_else(|| Error::Data(format!("no sample {i}")))?;
        let p = self.tile_size();
        let tiles_path = self.dir.join(&e.tiles);
        let mask_path = self.dir.join(&e.mask);
        let tiles = read_ten(&tiles_path)?;
        if tiles.shape() != [SEQUENCE_LEN, 3, p, p] {
            return Err(Error::corrupt(&tiles_path, format!("shape {:?}, expected [13, 3, {p}, {p}]", tiles.shape())));
        }
        if tiles.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::corrupt(&tiles_path, "pixel values outside [0, 1]"));
        }
        let mask = read_ten(&mask_path)?;
        if mask.shape() != [4, p, p] {
            return Err(Error::corrupt(&mask_path, format!("shape {:?}, expected [4, {p}, {p}]", mask.shape())));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::corrupt(&mask_path, "mask is not binary"));
        }
        let seq = ContextSequence { tiles, mask, provenance: e.provenance.clone(), positive: e.positive };
        if seq.class_pixels() != e.class_pixels {
            return Err(Error::corrupt(&mask_path, "class pixels disagree with the manifest"));
        }
        Ok(seq)
    }
}

/// Loads every sample into memory.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<ContextSequence>)> {
    let ds = Dataset::open(dir)?;
    let seqs = (0..ds.len()).map(|i| ds.load(i)).collect::<Result<Vec<_>>>()?;
    Ok((ds.manifest, seqs))
}

/// Writes samples one at a time, then the manifest.
pub struct DatasetWriter {
    dir: PathBuf,
    tile_size: usize,
    samples: Vec<SampleEntry>,
}

impl DatasetWriter {
    pub fn create(dir: &Path, tile_size: usize) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), tile_size, samples: Vec::new() })
    }

    pub fn push(&mut self, seq: &ContextSequence, split: Split) -> Result<()> {
        let p = self.tile_size;
        if seq.tiles.shape() != [SEQUENCE_LEN, 3, p, p] || seq.mask.shape() != [4, p, p] {
            return Err(Error::Data(format!("sequence shapes {:?}/{:?} do not match tile size {p}", seq.tiles.shape(), seq.mask.shape())));
        }
        let id = self.samples.len();
        let entry = SampleEntry {
            id,
            split,
            tiles: format!("{id:06}.tiles.ten"),
            mask: format!("{id:06}.mask.ten"),
            positive: seq.positive,
            class_pixels: seq.class_pixels(),
            provenance: seq.provenance.clone(),
        };
        for (name, t) in [(&entry.tiles, &seq.tiles), (&entry.mask, &seq.mask)] {
            let path = self.dir.join(name);
            tenfile::write(&path, t).map_err(|e| Error::ten(&path, e))?;
        }
        self.samples.push(entry);
        Ok(())
    }

    pub fn finish(self, seed: u64, generator: &GeneratorConfig) -> Result<Manifest> {
        let mut class_pixels = [0usize; 4];
        for s in &self.samples {
            for (t, c) in class_pixels.iter_mut().zip(s.class_pixels) {
                *t += c;
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            tile_size: self.tile_size,
            sequence_len: SEQUENCE_LEN,
            classes: CLASSES.iter().map(|c| c.to_string()).collect(),
            seed,
            generator: generator.clone(),
            class_pixels,
            samples: self.samples,
        };
        manifest.validate()?;
        let path = self.dir.join(MANIFEST);
        let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
        json.push(b'\n');
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// Writes `seqs` with their splits as a complete dataset.
pub fn write_dataset(dir: &Path, seqs: &[(ContextSequence, Split)], seed: u64, generator: &GeneratorConfig) -> Result<Manifest> {
    let mut w = DatasetWriter::create(dir, generator.tile_size)?;
    for (s, split) in seqs {
        w.push(s, *split)?;
    }
    w.finish(seed, generator)
}

/// What to generate.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub generator: GeneratorConfig,
    pub seed: u64,
    /// Sheet sequences, split between positives and negatives by the
    /// generator ratio.
    pub count: usize,
    /// Worlds to draw from; 0 picks one per 40 sequences.
    pub worlds: usize,
    /// Ambiguous pairs held out as the test split (two samples each).
    pub test_pairs: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl DatasetSpec {
    pub fn new(generator: GeneratorConfig, seed: u64, count: usize) -> Self {
        Self { generator, seed, count, worlds: 0, test_pairs: 0, val_fraction: 0.15, test_fraction: 0.15 }
    }

    fn world_count(&self) -> usize {
        if self.worlds > 0 {
            self.worlds
        } else {
            self.count.div_ceil(40).max(1)
        }
    }
}

/// Exact share `k` of `n` items over `parts` parts.
fn share(n: usize, k: usize, parts: usize) -> usize {
    n * (k + 1) / parts - n * k / parts
}

fn fraction(n: usize, f: f64) -> usize {
    ((n as f64 * f).round() as usize).min(n)
}

/// `n` split labels with the requested fractions, randomly ordered.
fn split_labels(n: usize, val: f64, test: f64, rng: &mut Rng) -> Vec<Split> {
    let (nv, nt) = (fraction(n, val), fraction(n, test));
    let nt = nt.min(n - nv);
    let mut labels: Vec<Split> = (0..n)
        .map(|i| {
            if i < nv {
                Split::Val
            } else if i < nv + nt {
                Split::Test
            } else {
                Split::Train
            }
        })
        .collect();
    rng.shuffle(&mut labels);
    labels
}

/// Renders worlds one at a time and streams sequences to `dir`.
pub fn generate_dataset(dir: &Path, spec: &DatasetSpec) -> Result<Manifest> {
    let g = &spec.generator;
    g.validate()?;
    for f in [spec.val_fraction, spec.test_fraction] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("split fraction {f} outside [0, 1]")));
        }
    }
    let root = Rng::new(spec.seed);
    let mut writer = DatasetWriter::create(dir, g.tile_size)?;

    let n_neg = g.negatives(spec.count);
    let n_pos = spec.count - n_neg;
    let labels = split_labels(spec.count, spec.val_fraction, spec.test_fraction, &mut root.fork("splits"));
    let worlds = spec.world_count();
    let mut seeds = root.fork("worlds");
    let mut sampler = root.fork("sequences");
    let mut next = 0;
    for w in 0..worlds {
        let (pos, neg) = (share(n_pos, w, worlds), share(n_neg, w, worlds));
        let world_seed = seeds.next_seed();
        if pos + neg == 0 {
            continue;
        }
        let sheets: Vec<MapSheet> = synth::render_world(world_seed, g);
        let first_class = n_pos * w / worlds;
        for seq in synth::sample_balanced(&sheets, pos, neg, first_class, g, &mut sampler)? {
            writer.push(&seq, labels[next])?;
            next += 1;
        }
    }

    let train_pairs = fraction(spec.count, g.ambiguous_fraction);
    let pair_labels = split_labels(train_pairs, spec.val_fraction, 0.0, &mut root.fork("pair-splits"));
    let mut pair_rng = root.fork("train-pairs");
    write_pairs(&mut writer, 0, train_pairs, g, &mut pair_rng, |k| pair_labels[k])?;
    let mut test_rng = root.fork("test-pairs");
    write_pairs(&mut writer, train_pairs, spec.test_pairs, g, &mut test_rng, |_| Split::Test)?;
    writer.finish(spec.seed, g)
}

fn write_pairs(
    writer: &mut DatasetWriter,
    first_id: usize,
    count: usize,
    g: &GeneratorConfig,
    rng: &mut Rng,
    split: impl Fn(usize) -> Split,
) -> Result<()> {
    const CHUNK: usize = 16;
    let mut done = 0;
    while done < count {
        let n = CHUNK.min(count - done);
        for (k, pair) in synth::ambiguous_pairs_from(first_id + done, n, g, rng)?.into_iter().enumerate() {
            let s = split(done + k);
            writer.push(&pair.lake, s)?;
            writer.push(&pair.river, s)?;
        }
        done += n;
    }
    Ok(())
}
