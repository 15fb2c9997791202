//! Labeled image datasets: synthetic generation, on-disk loaders, and the
//! attacker/defender partitioning protocol.
//!
//! Images are flat `f64` pixel vectors in [0, 1] with channel-last layout
//! (index `(y * width + x) * channels + c`). Partitioning allocates the
//! defender a fraction `V_d` of the pool and splits the remainder equally
//! among attackers, stratified by class, then applies the per-agent 80/20
//! train/test (attackers) or train/validation (defender) split.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Dims;
use crate::rng::{self, stream};

/// One labeled image plus poisoning bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub image: Vec<f64>,
    pub clean_label: usize,
    /// Present iff the example carries a trigger.
    pub poison_label: Option<usize>,
    /// Index of the attacker whose trigger the example carries.
    pub trigger_id: Option<usize>,
}

impl LabeledExample {
    pub fn clean(image: Vec<f64>, clean_label: usize) -> Self {
        LabeledExample {
            image,
            clean_label,
            poison_label: None,
            trigger_id: None,
        }
    }

    /// The label used as a training target: the poison label when present.
    pub fn training_label(&self) -> usize {
        self.poison_label.unwrap_or(self.clean_label)
    }

    pub fn is_poisoned(&self) -> bool {
        self.trigger_id.is_some()
    }
}

/// One agent's data. Agent 0 is the defender (its `test_examples` are the
/// validation split); agents 1..=N are attackers.
#[derive(Debug, Clone)]
pub struct AgentDataset {
    pub agent_id: usize,
    pub train_examples: Vec<LabeledExample>,
    pub test_examples: Vec<LabeledExample>,
}

impl AgentDataset {
    pub fn len(&self) -> usize {
        self.train_examples.len() + self.test_examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The joint dataset contributed by the defender and N attackers.
#[derive(Debug, Clone)]
pub struct JointDataset {
    pub dims: Dims,
    pub num_classes: usize,
    pub defender_fraction: f64,
    /// agents[0] is the defender; agents[1..] are attackers 1..=N.
    pub agents: Vec<AgentDataset>,
}

impl JointDataset {
    pub fn num_attackers(&self) -> usize {
        self.agents.len().saturating_sub(1)
    }

    pub fn defender(&self) -> &AgentDataset {
        &self.agents[0]
    }

    pub fn attacker(&self, attacker_id: usize) -> Result<&AgentDataset> {
        if attacker_id == 0 || attacker_id >= self.agents.len() {
            return Err(Error::config(format!("no attacker with id {attacker_id}")));
        }
        Ok(&self.agents[attacker_id])
    }

    pub fn attacker_mut(&mut self, attacker_id: usize) -> Result<&mut AgentDataset> {
        if attacker_id == 0 || attacker_id >= self.agents.len() {
            return Err(Error::config(format!("no attacker with id {attacker_id}")));
        }
        Ok(&mut self.agents[attacker_id])
    }

    /// All train examples across agents, in agent order.
    pub fn all_train_examples(&self) -> Vec<&LabeledExample> {
        self.agents
            .iter()
            .flat_map(|a| a.train_examples.iter())
            .collect()
    }
}

/// Train/test split ratios and the shuffle seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitConfig {
    pub attacker_traintest: (f64, f64),
    pub defender_trainval: (f64, f64),
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            attacker_traintest: (0.8, 0.2),
            defender_trainval: (0.8, 0.2),
            seed: 3407,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, (a, b)) in [
            ("attacker_traintest", self.attacker_traintest),
            ("defender_trainval", self.defender_trainval),
        ] {
            if !(a > 0.0 && b > 0.0 && (a + b - 1.0).abs() < 1e-9) {
                return Err(Error::config(format!("{name} ratios must sum to 1")));
            }
        }
        Ok(())
    }
}

/// Generates a class-separable synthetic dataset: class `j` is a Gaussian
/// blob plus an oriented bar at a class-specific position and angle, with
/// N(0, 0.1) pixel noise, clipped to [0, 1]. Deterministic in the seed.
pub fn generate_synthetic(
    num_classes: usize,
    per_class: usize,
    dims: Dims,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    let (l, w, c) = dims;
    if num_classes < 2 {
        return Err(Error::config("num_classes must be at least 2"));
    }
    if l < 8 || w < 8 || c < 1 {
        return Err(Error::config(format!(
            "dims {l}x{w}x{c} too small to place class patterns (need at least 8x8x1)"
        )));
    }
    let mut gen = rng::rng(rng::derive(seed, stream::SYNTH_DATA));
    let mut examples = Vec::with_capacity(num_classes * per_class);
    let radius = 0.30 * l.min(w) as f64;
    let blob_sigma = (l.min(w) as f64 / 10.0).max(1.2);
    let bar_half_len = l.min(w) as f64 / 3.0;
    let bar_sigma = 0.8;
    for class in 0..num_classes {
        let phi = 2.0 * std::f64::consts::PI * class as f64 / num_classes as f64;
        let cy = l as f64 / 2.0 + radius * phi.sin();
        let cx = w as f64 / 2.0 + radius * phi.cos();
        let psi = std::f64::consts::PI * class as f64 / num_classes as f64;
        let (dir_y, dir_x) = (psi.sin(), psi.cos());
        for _ in 0..per_class {
            let mut image = vec![0.0; l * w * c];
            for y in 0..l {
                for x in 0..w {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    let blob = 0.9 * (-(dy * dy + dx * dx) / (2.0 * blob_sigma * blob_sigma)).exp();
                    // distance to the oriented bar through the blob centre
                    let along = dy * dir_y + dx * dir_x;
                    let perp = dy * dir_x - dx * dir_y;
                    let bar = if along.abs() <= bar_half_len {
                        0.7 * (-(perp * perp) / (2.0 * bar_sigma * bar_sigma)).exp()
                    } else {
                        0.0
                    };
                    let signal = (blob + bar).min(1.0);
                    for ch in 0..c {
                        let noise = 0.1 * gaussian(&mut gen);
                        image[(y * w + x) * c + ch] = (signal + noise).clamp(0.0, 1.0);
                    }
                }
            }
            examples.push(LabeledExample::clean(image, class));
        }
    }
    Ok(examples)
}

/// Standard normal via Box-Muller.
fn gaussian<R: Rng>(gen: &mut R) -> f64 {
    let u1: f64 = gen.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = gen.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// A loaded on-disk dataset with its discovered geometry.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub examples: Vec<LabeledExample>,
    pub dims: Dims,
    pub num_classes: usize,
}

fn read_exact_at(
    reader: &mut impl Read,
    buf: &mut [u8],
    offset: u64,
    what: &str,
) -> Result<()> {
    reader.read_exact(buf).map_err(|_| {
        Error::format(
            offset,
            format!("truncated file: expected {} more bytes for {what}", buf.len()),
        )
    })
}

/// Loads an IDX image file plus its companion IDX label file (the standard
/// MNIST-style layout: big-endian u32 header, unsigned-byte data).
pub fn load_idx_images(images_path: &Path, labels_path: &Path) -> Result<LoadedData> {
    let mut ir = BufReader::new(File::open(images_path)?);
    let mut head = [0u8; 4];
    read_exact_at(&mut ir, &mut head, 0, "IDX magic")?;
    if head[0] != 0 || head[1] != 0 || head[2] != 0x08 {
        return Err(Error::format(
            0,
            format!("bad IDX magic {head:02x?}: expected unsigned-byte type 0x08"),
        ));
    }
    let ndim = head[3] as usize;
    if !(3..=4).contains(&ndim) {
        return Err(Error::format(
            3,
            format!("IDX image file must be 3- or 4-dimensional, got {ndim}"),
        ));
    }
    let mut dims = [0usize; 4];
    dims[3] = 1;
    for (i, d) in dims.iter_mut().take(ndim).enumerate() {
        let mut b = [0u8; 4];
        read_exact_at(&mut ir, &mut b, (4 + 4 * i) as u64, "IDX dimension")?;
        *d = u32::from_be_bytes(b) as usize;
    }
    let (count, rows, cols, chans) = (dims[0], dims[1], dims[2], dims[3]);
    let pixel_count = rows * cols * chans;
    let mut raw = vec![0u8; count * pixel_count];
    read_exact_at(&mut ir, &mut raw, (4 + 4 * ndim) as u64, "IDX pixel data")?;

    let mut lr = BufReader::new(File::open(labels_path)?);
    let mut lhead = [0u8; 8];
    read_exact_at(&mut lr, &mut lhead, 0, "IDX label header")?;
    if lhead[0] != 0 || lhead[1] != 0 || lhead[2] != 0x08 || lhead[3] != 1 {
        return Err(Error::format(0, "bad IDX label magic".to_string()));
    }
    let lcount = u32::from_be_bytes([lhead[4], lhead[5], lhead[6], lhead[7]]) as usize;
    if lcount != count {
        return Err(Error::format(
            4,
            format!("label count {lcount} does not match image count {count}"),
        ));
    }
    let mut labels = vec![0u8; count];
    read_exact_at(&mut lr, &mut labels, 8, "IDX labels")?;

    let num_classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let examples = raw
        .chunks(pixel_count)
        .zip(&labels)
        .map(|(px, &y)| {
            LabeledExample::clean(px.iter().map(|&b| b as f64 / 255.0).collect(), y as usize)
        })
        .collect();
    Ok(LoadedData {
        examples,
        dims: (rows, cols, chans),
        num_classes: num_classes.max(2),
    })
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// Loads a CIFAR-10 binary batch file: 3073-byte records, label byte then
/// 3072 channel-major pixels.
pub fn load_cifar10_binary(path: &Path) -> Result<LoadedData> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw)?;
    if raw.is_empty() || raw.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(
            raw.len() as u64,
            format!(
                "CIFAR-10 file length {} is not a multiple of the {CIFAR_RECORD}-byte record",
                raw.len()
            ),
        ));
    }
    let mut examples = Vec::with_capacity(raw.len() / CIFAR_RECORD);
    for (ri, rec) in raw.chunks(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::format(
                (ri * CIFAR_RECORD) as u64,
                format!("CIFAR-10 label byte {label} out of range"),
            ));
        }
        // channel-major source -> channel-last image
        let mut image = vec![0.0; CIFAR_SIDE * CIFAR_SIDE * 3];
        for ch in 0..3 {
            for y in 0..CIFAR_SIDE {
                for x in 0..CIFAR_SIDE {
                    image[(y * CIFAR_SIDE + x) * 3 + ch] =
                        rec[1 + ch * 1024 + y * CIFAR_SIDE + x] as f64 / 255.0;
                }
            }
        }
        examples.push(LabeledExample::clean(image, label));
    }
    Ok(LoadedData {
        examples,
        dims: (CIFAR_SIDE, CIFAR_SIDE, 3),
        num_classes: 10,
    })
}

const SBD_MAGIC: &[u8; 4] = b"SBD1";

/// Writes the self-describing binary dataset format: header (magic "SBD1",
/// k, count, l, w, c as little-endian u32), then per-example records
/// (clean_label, poison flag, poison_label, trigger_id bytes; f32 pixels).
pub fn write_sbd(
    path: &Path,
    examples: &[LabeledExample],
    dims: Dims,
    num_classes: usize,
) -> Result<()> {
    let (l, w, c) = dims;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(SBD_MAGIC)?;
    for v in [num_classes, examples.len(), l, w, c] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    for ex in examples {
        if ex.image.len() != l * w * c {
            return Err(Error::config("example pixel count does not match dims"));
        }
        let flag = u8::from(ex.poison_label.is_some());
        out.write_all(&[
            ex.clean_label as u8,
            flag,
            ex.poison_label.unwrap_or(0) as u8,
            ex.trigger_id.unwrap_or(0) as u8,
        ])?;
        for &px in &ex.image {
            out.write_all(&(px as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads the SBD1 format written by [`write_sbd`].
pub fn read_sbd(path: &Path) -> Result<LoadedData> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_at(&mut reader, &mut magic, 0, "SBD1 magic")?;
    if &magic != SBD_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}, expected \"SBD1\"")));
    }
    let mut head = [0u8; 20];
    read_exact_at(&mut reader, &mut head, 4, "SBD1 header")?;
    let mut fields = [0usize; 5];
    for (i, f) in fields.iter_mut().enumerate() {
        *f = u32::from_le_bytes(head[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    }
    let [num_classes, count, l, w, c] = fields;
    if num_classes < 2 || l == 0 || w == 0 || c == 0 {
        return Err(Error::format(4, "invalid SBD1 header fields".to_string()));
    }
    let pixels = l * w * c;
    let record = 4 + 4 * pixels;
    let mut examples = Vec::with_capacity(count);
    let mut buf = vec![0u8; record];
    for ri in 0..count {
        let offset = (24 + ri * record) as u64;
        read_exact_at(&mut reader, &mut buf, offset, "SBD1 record")?;
        let clean_label = buf[0] as usize;
        let flag = buf[1];
        let poison_label = buf[2] as usize;
        let trigger_id = buf[3] as usize;
        if clean_label >= num_classes || flag > 1 || (flag == 1 && poison_label >= num_classes) {
            return Err(Error::format(offset, "invalid SBD1 record labels".to_string()));
        }
        let image = buf[4..]
            .chunks(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        examples.push(LabeledExample {
            image,
            clean_label,
            poison_label: (flag == 1).then_some(poison_label),
            trigger_id: (flag == 1).then_some(trigger_id),
        });
    }
    Ok(LoadedData {
        examples,
        dims: (l, w, c),
        num_classes,
    })
}

/// Partitions a labeled pool into a [`JointDataset`]: the defender receives
/// fraction `V_d`, each of `N` attackers receives (1 - V_d) / N, stratified
/// by class with a seeded shuffle; then per-agent train/test splits apply.
pub fn partition(
    examples: Vec<LabeledExample>,
    dims: Dims,
    num_classes: usize,
    num_attackers: usize,
    defender_fraction: f64,
    split: &SplitConfig,
) -> Result<JointDataset> {
    split.validate()?;
    if num_attackers == 0 {
        return Err(Error::config("at least one attacker is required"));
    }
    if !(defender_fraction > 0.0 && defender_fraction < 1.0) {
        return Err(Error::config("defender fraction must lie in (0, 1)"));
    }
    let mut gen = rng::rng(rng::derive(split.seed, stream::PARTITION));

    // stratify: per class, shuffle then deal defender / attacker shares
    let mut by_class: Vec<Vec<LabeledExample>> = vec![Vec::new(); num_classes];
    for ex in examples {
        if ex.clean_label >= num_classes {
            return Err(Error::config(format!(
                "label {} out of range for {num_classes} classes",
                ex.clean_label
            )));
        }
        by_class[ex.clean_label].push(ex);
    }
    let mut shares: Vec<Vec<LabeledExample>> = vec![Vec::new(); num_attackers + 1];
    for class_pool in &mut by_class {
        class_pool.shuffle(&mut gen);
        let n = class_pool.len();
        let d_count = (defender_fraction * n as f64).floor() as usize;
        let a_count = (n - d_count) / num_attackers;
        if d_count == 0 || a_count == 0 {
            return Err(Error::config(format!(
                "not enough examples per class ({n}) for every agent to receive at least one"
            )));
        }
        let mut drained = class_pool.drain(..);
        for ex in (&mut drained).take(d_count) {
            shares[0].push(ex);
        }
        for aid in 1..=num_attackers {
            for ex in (&mut drained).take(a_count) {
                shares[aid].push(ex);
            }
        }
        // leftovers go round-robin to attackers so nothing is lost
        for (i, ex) in drained.enumerate() {
            shares[1 + (i % num_attackers)].push(ex);
        }
    }

    let mut agents = Vec::with_capacity(num_attackers + 1);
    for (agent_id, mut share) in shares.into_iter().enumerate() {
        let train_frac = if agent_id == 0 {
            split.defender_trainval.0
        } else {
            split.attacker_traintest.0
        };
        // stratified train/test split inside the share
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut class_buckets: Vec<Vec<LabeledExample>> = vec![Vec::new(); num_classes];
        for ex in share.drain(..) {
            class_buckets[ex.clean_label].push(ex);
        }
        for bucket in class_buckets {
            let t = (train_frac * bucket.len() as f64).floor() as usize;
            for (i, ex) in bucket.into_iter().enumerate() {
                if i < t {
                    train.push(ex);
                } else {
                    test.push(ex);
                }
            }
        }
        train.shuffle(&mut gen);
        test.shuffle(&mut gen);
        agents.push(AgentDataset {
            agent_id,
            train_examples: train,
            test_examples: test,
        });
    }

    Ok(JointDataset {
        dims,
        num_classes,
        defender_fraction,
        agents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn small_pool(per_class: usize) -> Vec<LabeledExample> {
        generate_synthetic(10, per_class, (8, 8, 1), 3407).unwrap()
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(4, 5, (8, 8, 1), 42).unwrap();
        let b = generate_synthetic(4, 5, (8, 8, 1), 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(4, 5, (8, 8, 1), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_counts_and_range() {
        let examples = generate_synthetic(10, 100, (8, 8, 1), 1).unwrap();
        assert_eq!(examples.len(), 1000);
        let mut counts = vec![0usize; 10];
        for ex in &examples {
            counts[ex.clean_label] += 1;
            assert!(ex.image.iter().all(|&p| (0.0..=1.0).contains(&p)));
            assert!(!ex.is_poisoned());
        }
        assert!(counts.iter().all(|&c| c == 100));
    }

    #[test]
    fn synthetic_rejects_tiny_dims() {
        assert!(matches!(
            generate_synthetic(10, 5, (4, 4, 1), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn partition_allocation_matches_protocol() {
        let joint = partition(
            small_pool(100),
            (8, 8, 1),
            10,
            2,
            0.1,
            &SplitConfig::default(),
        )
        .unwrap();
        assert_eq!(joint.agents.len(), 3);
        assert_eq!(joint.defender().len(), 100);
        assert_eq!(joint.attacker(1).unwrap().len(), 450);
        assert_eq!(joint.attacker(2).unwrap().len(), 450);
        // 80/20 of 450
        assert_eq!(joint.attacker(1).unwrap().train_examples.len(), 360);
        assert_eq!(joint.attacker(1).unwrap().test_examples.len(), 90);
    }

    #[test]
    fn partition_conserves_examples() {
        let pool = small_pool(30);
        let key = |e: &LabeledExample| {
            (
                e.clean_label,
                e.image.iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
            )
        };
        let mut original: BTreeMap<_, usize> = BTreeMap::new();
        for ex in &pool {
            *original.entry(key(ex)).or_default() += 1;
        }
        let joint = partition(pool, (8, 8, 1), 10, 3, 0.1, &SplitConfig::default()).unwrap();
        let mut partitioned: BTreeMap<_, usize> = BTreeMap::new();
        for agent in &joint.agents {
            for ex in agent.train_examples.iter().chain(&agent.test_examples) {
                *partitioned.entry(key(ex)).or_default() += 1;
            }
        }
        assert_eq!(original, partitioned);
    }

    #[test]
    fn partition_is_deterministic() {
        let a = partition(small_pool(20), (8, 8, 1), 10, 2, 0.1, &SplitConfig::default()).unwrap();
        let b = partition(small_pool(20), (8, 8, 1), 10, 2, 0.1, &SplitConfig::default()).unwrap();
        for (x, y) in a.agents.iter().zip(&b.agents) {
            assert_eq!(x.train_examples, y.train_examples);
            assert_eq!(x.test_examples, y.test_examples);
        }
    }

    #[test]
    fn partition_rejects_insufficient_examples() {
        let pool = generate_synthetic(10, 5, (8, 8, 1), 1).unwrap();
        assert!(matches!(
            partition(pool, (8, 8, 1), 10, 2, 0.1, &SplitConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sbd_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.sbd");
        let mut examples = generate_synthetic(3, 4, (8, 8, 1), 9).unwrap();
        examples[1].poison_label = Some(2);
        examples[1].trigger_id = Some(1);
        write_sbd(&path, &examples, (8, 8, 1), 3).unwrap();
        let loaded = read_sbd(&path).unwrap();
        assert_eq!(loaded.num_classes, 3);
        assert_eq!(loaded.dims, (8, 8, 1));
        assert_eq!(loaded.examples.len(), examples.len());
        assert_eq!(loaded.examples[1].poison_label, Some(2));
        assert_eq!(loaded.examples[1].trigger_id, Some(1));
        assert_eq!(loaded.examples[0].poison_label, None);
        // pixels round-trip through f32
        for (a, b) in loaded.examples[0].image.iter().zip(&examples[0].image) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn truncated_sbd_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.sbd");
        let examples = generate_synthetic(2, 2, (8, 8, 1), 9).unwrap();
        write_sbd(&path, &examples, (8, 8, 1), 2).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        match read_sbd(&path) {
            Err(Error::Format { offset, message }) => {
                assert!(offset > 0);
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn cifar_loader_round_trips_synthetic_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        // two hand-built records
        let mut bytes = Vec::new();
        for (label, base) in [(3u8, 10u8), (7u8, 200u8)] {
            bytes.push(label);
            for ch in 0..3u16 {
                for i in 0..1024u16 {
                    bytes.push(((base as u16 + ch * 7 + i) % 256) as u8);
                }
            }
        }
        std::fs::write(&path, &bytes).unwrap();
        let loaded = load_cifar10_binary(&path).unwrap();
        assert_eq!(loaded.examples.len(), 2);
        assert_eq!(loaded.dims, (32, 32, 3));
        assert_eq!(loaded.examples[0].clean_label, 3);
        assert_eq!(loaded.examples[1].clean_label, 7);
        // first pixel of record 0, channel 0 is byte 10
        assert!((loaded.examples[0].image[0] - 10.0 / 255.0).abs() < 1e-9);
        // last pixel of record 1, channel 2: (200 + 14 + 1023) % 256 = 213
        let last = loaded.examples[1].image[(31 * 32 + 31) * 3 + 2];
        assert!((last - 213.0 / 255.0).abs() < 1e-9);
    }

    #[test]
    fn cifar_loader_rejects_bad_record_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, vec![0u8; 3072]).unwrap();
        match load_cifar10_binary(&path) {
            Err(Error::Format { message, .. }) => {
                assert!(message.contains("3073"), "{message}")
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_loader_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images.idx");
        let labels = dir.path().join("labels.idx");
        // 2 images of 4x5, pixel value = index
        let mut ibytes = vec![0, 0, 0x08, 3];
        for d in [2u32, 4, 5] {
            ibytes.extend_from_slice(&d.to_be_bytes());
        }
        for i in 0..40u8 {
            ibytes.push(i);
        }
        std::fs::write(&images, &ibytes).unwrap();
        let mut lbytes = vec![0, 0, 0x08, 1];
        lbytes.extend_from_slice(&2u32.to_be_bytes());
        lbytes.extend_from_slice(&[1, 4]);
        std::fs::write(&labels, &lbytes).unwrap();
        let loaded = load_idx_images(&images, &labels).unwrap();
        assert_eq!(loaded.dims, (4, 5, 1));
        assert_eq!(loaded.examples.len(), 2);
        assert_eq!(loaded.examples[0].clean_label, 1);
        assert_eq!(loaded.examples[1].clean_label, 4);
        assert!((loaded.examples[1].image[0] - 20.0 / 255.0).abs() < 1e-9);
    }

    #[test]
    fn idx_loader_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("x.idx");
        let labels = dir.path().join("y.idx");
        std::fs::write(&images, [9, 9, 9, 9, 0, 0, 0, 0]).unwrap();
        std::fs::write(&labels, [0, 0, 8, 1, 0, 0, 0, 0]).unwrap();
        assert!(matches!(
            load_idx_images(&images, &labels),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
