use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const GRID: usize = 16;
pub const CHANNELS: usize = 3;

const COLORS: [(&str, [f64; 3]); 10] = [
    ("red", [0.90, 0.10, 0.10]),
    ("grn", [0.10, 0.80, 0.20]),
    ("blu", [0.15, 0.25, 0.90]),
    ("yel", [0.90, 0.85, 0.10]),
    ("cyn", [0.10, 0.85, 0.85]),
    ("mag", [0.85, 0.15, 0.80]),
    ("org", [0.95, 0.55, 0.10]),
    ("pnk", [0.95, 0.60, 0.70]),
    ("wht", [0.95, 0.95, 0.95]),
    ("brn", [0.55, 0.35, 0.15]),
];

const PATTERNS: [&str; 10] = ["row", "col", "chk", "box", "dot", "dia", "crs", "tri", "rng", "hlf"];

/// Number of classes in the full generated world.
pub const WORLD_CLASSES: usize = COLORS.len() * PATTERNS.len();

/// Name of world class `g`: color word, space, pattern word.
pub fn world_class_name(g: usize) -> String {
    format!("{} {}", COLORS[g / PATTERNS.len()].0, PATTERNS[g % PATTERNS.len()])
}

fn pattern_mask(pattern: usize, r: &mut Rng) -> Vec<bool> {
    let n = GRID as i64;
    let phase = r.gen_range(0..4) as i64;
    let cy = r.gen_range(4..12) as f64 + 0.5;
    let cx = r.gen_range(4..12) as f64 + 0.5;
    let size = r.gen_range(4..7) as f64;
    let mut m = vec![false; GRID * GRID];
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let (dy, dx) = (fy - cy, fx - cx);
            let on = match pattern {
                0 => (y + phase) % 4 < 2,
                1 => (x + phase) % 4 < 2,
                2 => ((x + phase) / 4 + (y + phase) / 4) % 2 == 0,
                3 => {
                    let d = dx.abs().max(dy.abs());
                    d <= size && d > size - 1.5
                }
                4 => dx * dx + dy * dy <= (size - 1.5) * (size - 1.5),
                5 => (x + y + phase) % 6 < 2,
                6 => (dx.abs() < 1.0 && dy.abs() <= size) || (dy.abs() < 1.0 && dx.abs() <= size),
                7 => dy >= -size && dy <= size && dx.abs() <= (dy + size) / 2.0,
                8 => {
                    let d = (dx * dx + dy * dy).sqrt();
                    d <= size && d > size - 1.7
                }
                _ => x < n / 2 + phase - 2,
            };
            m[(y * n + x) as usize] = on;
        }
    }
    m
}

/// One `[GRID, GRID, CHANNELS]` image of world class `g`: the pattern in
/// the class color over a dim noisy background, with random placement.
pub fn render(g: usize, r: &mut Rng) -> Array {
    let color = COLORS[g / PATTERNS.len()].1;
    let mask = pattern_mask(g % PATTERNS.len(), r);
    let bg: [f64; 3] = [r.gen_range(0.0..0.3), r.gen_range(0.0..0.3), r.gen_range(0.0..0.3)];
    let gain = r.gen_range(0.75..1.0);
    let noise = rng::normal_vec(r, GRID * GRID * CHANNELS, 0.08);
    let mut data = Vec::with_capacity(GRID * GRID * CHANNELS);
    for (p, &on) in mask.iter().enumerate() {
        for c in 0..CHANNELS {
            let base = if on { color[c] * gain } else { bg[c] };
            data.push((base + noise[p * CHANNELS + c]).clamp(0.0, 1.0));
        }
    }
    Array::new(vec![GRID, GRID, CHANNELS], data).expect("sized")
}

/// Pure function of `(seed, world class, split tag, instance)`.
pub fn world_image(seed: u64, g: usize, split: &str, instance: usize) -> Array {
    let mut r = rng::stream(seed, &format!("image/{split}"), &[g as u64, instance as u64]);
    render(g, &mut r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// Task-local class id.
    pub class: usize,
    pub image: Array,
}

/// An `M`-way `K`-shot task over a seeded selection of world classes.
/// Task-local classes `0..M/2` are the base split, `M/2..M` the new split.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub seed: u64,
    pub world_classes: Vec<usize>,
    pub names: Vec<String>,
    pub shots: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    New,
}

pub const DEFAULT_TEST_SHOTS: usize = 16;

pub fn generate_task(seed: u64, m: usize, k: usize) -> Result<SyntheticTask> {
    generate_task_with(seed, m, k, DEFAULT_TEST_SHOTS)
}

pub fn generate_task_with(seed: u64, m: usize, k: usize, test_shots: usize) -> Result<SyntheticTask> {
    if m < 4 || !m.is_multiple_of(2) || m > WORLD_CLASSES {
        return Err(Error::Config(format!(
            "class count must be even and in 4..={WORLD_CLASSES}, got {m}"
        )));
    }
    if k == 0 {
        return Err(Error::Config("shots must be >= 1".into()));
    }
    let mut all: Vec<usize> = (0..WORLD_CLASSES).collect();
    all.shuffle(&mut rng::stream(seed, "task/classes", &[]));
    all.truncate(m);
    let names = all.iter().map(|&g| world_class_name(g)).collect();
    let make = |split: &str, per: usize| -> Vec<Sample> {
        let mut v = Vec::with_capacity(m * per);
        for (c, &g) in all.iter().enumerate() {
            for i in 0..per {
                v.push(Sample {
                    id: v.len(),
                    class: c,
                    image: world_image(seed, g, split, i),
                });
            }
        }
        v
    };
    Ok(SyntheticTask {
        seed,
        train: make("train", k),
        test: make("test", test_shots),
        world_classes: all,
        names,
        shots: k,
    })
}

impl SyntheticTask {
    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn classes(&self, split: Split) -> std::ops::Range<usize> {
        let h = self.num_classes() / 2;
        match split {
            Split::Base => 0..h,
            Split::New => h..self.num_classes(),
        }
    }

    pub fn train_split(&self, split: Split) -> Vec<&Sample> {
        let r = self.classes(split);
        self.train.iter().filter(|s| r.contains(&s.class)).collect()
    }

    pub fn test_split(&self, split: Split) -> Vec<&Sample> {
        let r = self.classes(split);
        self.test.iter().filter(|s| r.contains(&s.class)).collect()
    }

    /// Identifies the generated data (not a hash of the pixels).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((self.shots as u64).to_le_bytes());
        h.update((self.test.len() as u64).to_le_bytes());
        for n in &self.names {
            h.update(n.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}
