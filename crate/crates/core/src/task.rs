//! Labeled classification tasks rendered from a deterministic synthetic image
//! bank.
//!
//! Every image is a pure function of `(bank seed, class, sample index)`, so a
//! task manifest only records which samples it owns; pixels are regenerated on
//! load. Classes belong to families; each family draws its stroke primitives
//! from its own orientation and frequency band, so tasks from different
//! families share no generative structure.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PATCH: usize = 5;

/// SplitMix64 finalizer over a sequence of words.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub(crate) fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassRef {
    pub family: u32,
    pub class: u32,
}

/// Generative parameters shared by every class and sample of a suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageBank {
    pub seed: u64,
    pub image_size: usize,
    /// Number of families whose orientation bands partition the half circle.
    pub families: u32,
    pub primitives_per_family: usize,
    pub strokes_per_class: usize,
    /// Maximum per-stroke positional jitter in pixels.
    pub jitter: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f32,
    /// Distractor strokes per sample, drawn from the next family's band.
    pub nuisance: usize,
    /// Upper amplitude of distractor strokes.
    pub nuisance_amp: f32,
}

impl ImageBank {
    pub fn new(seed: u64, families: u32) -> Self {
        Self {
            seed,
            image_size: 16,
            families: families.max(1),
            primitives_per_family: 4,
            strokes_per_class: 3,
            jitter: 1,
            noise: 0.35,
            nuisance: 2,
            nuisance_amp: 2.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.image_size < PATCH + 2 {
            return Err(Error::invalid(format!("image size {} too small", self.image_size)));
        }
        if self.families == 0 || self.primitives_per_family == 0 || self.strokes_per_class == 0 {
            return Err(Error::invalid("image bank counts must be positive"));
        }
        Ok(())
    }

    /// Oriented cosine patch from the family's band.
    fn primitive(&self, family: u32, index: usize) -> [f32; PATCH * PATCH] {
        let mut rng = rng_for(&[self.seed, 1, family as u64, index as u64]);
        let band = PI / self.families as f64;
        let theta = band * (family % self.families) as f64 + rng.random_range(0.1..0.9) * band;
        let freq = 0.9 + 0.5 * ((family % self.families) as f64 / self.families as f64)
            + rng.random_range(-0.1..0.1);
        let phase = rng.random_range(0.0..PI);
        let (s, c) = theta.sin_cos();
        let mut out = [0f32; PATCH * PATCH];
        let half = (PATCH / 2) as f64;
        for y in 0..PATCH {
            for x in 0..PATCH {
                let (dy, dx) = (y as f64 - half, x as f64 - half);
                let along = dx * c + dy * s;
                let envelope = (-(dx * dx + dy * dy) / 6.0).exp();
                out[y * PATCH + x] = (envelope * (freq * along + phase).cos()) as f32;
            }
        }
        out
    }

    fn stamp(&self, img: &mut [f32], patch: &[f32; PATCH * PATCH], cy: isize, cx: isize, amp: f32) {
        let s = self.image_size as isize;
        let half = (PATCH / 2) as isize;
        for py in 0..PATCH as isize {
            for px in 0..PATCH as isize {
                let (y, x) = (cy + py - half, cx + px - half);
                if (0..s).contains(&y) && (0..s).contains(&x) {
                    img[(y * s + x) as usize] += amp * patch[(py * PATCH as isize + px) as usize];
                }
            }
        }
    }

    /// Stroke layout `(primitive, y, x, amplitude)` defining a class.
    fn layout(&self, class: ClassRef) -> Vec<(usize, isize, isize, f32)> {
        let mut rng = rng_for(&[self.seed, 2, class.family as u64, class.class as u64]);
        let lo = 2isize;
        let hi = self.image_size as isize - 2;
        (0..self.strokes_per_class)
            .map(|_| {
                let p = rng.random_range(0..self.primitives_per_family);
                let y = rng.random_range(lo as i64..hi as i64) as isize;
                let x = rng.random_range(lo as i64..hi as i64) as isize;
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                (p, y, x, sign * rng.random_range(0.8f32..1.2))
            })
            .collect()
    }

    /// Renders sample `index` of `class` as an `image_size^2` buffer.
    pub fn render(&self, class: ClassRef, index: u64) -> Vec<f32> {
        let s = self.image_size;
        let mut img = vec![0f32; s * s];
        let mut rng = rng_for(&[self.seed, 3, class.family as u64, class.class as u64, index]);
        let j = self.jitter as isize;
        for (p, y, x, amp) in self.layout(class) {
            let patch = self.primitive(class.family, p);
            let dy = rng.random_range(-j as i64..=j as i64) as isize;
            let dx = rng.random_range(-j as i64..=j as i64) as isize;
            let scale = rng.random_range(0.75f32..1.25);
            self.stamp(&mut img, &patch, y + dy, x + dx, amp * scale);
        }
        let other = (class.family + 1) % self.families;
        for _ in 0..self.nuisance {
            let p = rng.random_range(0..self.primitives_per_family);
            let patch = self.primitive(other, p);
            let y = rng.random_range(0..s as i64) as isize;
            let x = rng.random_range(0..s as i64) as isize;
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let amp = sign * rng.random_range(0.5f32..self.nuisance_amp.max(0.5));
            self.stamp(&mut img, &patch, y, x, amp);
        }
        for v in img.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += self.noise * z as f32;
        }
        img
    }
}

/// Which samples of which class a task owns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    /// Local label (index into the task's class list).
    pub label: usize,
    pub index: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Serializable description of a task; pixels are regenerated from the bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub id: String,
    pub family: String,
    pub classes: Vec<ClassRef>,
    pub samples: Vec<SampleRef>,
    pub splits: Splits,
    #[serde(default)]
    pub subset: Option<usize>,
    pub bank: ImageBank,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub manifest: TaskManifest,
    /// `[N, S, S, 1]` images in sample order.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl TaskSpec {
    pub fn from_manifest(manifest: TaskManifest) -> Result<Self> {
        manifest.bank.validate()?;
        let s = manifest.bank.image_size;
        let mut data = Vec::with_capacity(manifest.samples.len() * s * s);
        let mut labels = Vec::with_capacity(manifest.samples.len());
        for r in &manifest.samples {
            let class = *manifest
                .classes
                .get(r.label)
                .ok_or_else(|| Error::Format(format!("label {} has no class", r.label)))?;
            data.extend(manifest.bank.render(class, r.index));
            labels.push(r.label);
        }
        let task = Self {
            images: Tensor::new(vec![labels.len(), s, s, 1], data)?,
            labels,
            manifest,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn id(&self) -> &str {
        &self.manifest.id
    }

    pub fn family(&self) -> &str {
        &self.manifest.family
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn splits(&self) -> &Splits {
        &self.manifest.splits
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Splits are disjoint, in range, and every class appears in train.
    pub fn validate(&self) -> Result<()> {
        let sp = &self.manifest.splits;
        let mut seen = BTreeSet::new();
        for &i in sp.train.iter().chain(&sp.val).chain(&sp.test) {
            if i >= self.len() {
                return Err(Error::Format(format!("split index {i} out of range")));
            }
            if !seen.insert(i) {
                return Err(Error::Format(format!("sample {i} appears in two splits")));
            }
        }
        let present: BTreeSet<usize> = sp.train.iter().map(|&i| self.labels[i]).collect();
        if present.len() != self.num_classes() {
            return Err(Error::Format(format!(
                "task {} trains on {} of {} classes",
                self.id(),
                present.len(),
                self.num_classes()
            )));
        }
        Ok(())
    }

    pub fn split_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Keeps `e` samples of the train+val pool (class-stratified) and the full
    /// test split. 10% of the kept samples, at least one, become validation.
    pub fn subset(&self, e: usize, seed: u64) -> Result<TaskSpec> {
        let alpha = self.num_classes();
        if e < alpha + 1 {
            return Err(Error::invalid(format!(
                "subset of {e} cannot cover {alpha} classes plus validation"
            )));
        }
        let sp = self.splits();
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); alpha];
        for &i in sp.train.iter().chain(&sp.val) {
            per_class[self.labels[i]].push(i);
        }
        let mut rng = rng_for(&[seed, 7, mix_seed(&[self.id().len() as u64]), e as u64]);
        for list in per_class.iter_mut() {
            list.sort_unstable();
            list.shuffle(&mut rng);
        }
        let available: usize = per_class.iter().map(Vec::len).sum();
        if e > available {
            return Err(Error::invalid(format!("subset {e} exceeds {available} samples")));
        }
        // Round-robin across classes keeps the subset stratified.
        let mut taken: Vec<Vec<usize>> = vec![Vec::new(); alpha];
        let mut remaining = e;
        let mut depth = 0;
        while remaining > 0 {
            for c in 0..alpha {
                if remaining > 0 && depth < per_class[c].len() {
                    taken[c].push(per_class[c][depth]);
                    remaining -= 1;
                }
            }
            depth += 1;
        }
        let n_val = (e / 10).max(1);
        let mut val = Vec::new();
        let mut order: Vec<usize> = (0..alpha).collect();
        order.shuffle(&mut rng);
        'outer: loop {
            let before = val.len();
            for &c in &order {
                if val.len() == n_val {
                    break 'outer;
                }
                if taken[c].len() > 1 {
                    val.push(taken[c].pop().unwrap());
                }
            }
            if val.len() == before {
                break;
            }
        }
        let mut train: Vec<usize> = taken.into_iter().flatten().collect();
        train.sort_unstable();
        val.sort_unstable();
        let mut manifest = self.manifest.clone();
        manifest.splits = Splits {
            train,
            val,
            test: sp.test.clone(),
        };
        manifest.subset = Some(e);
        let task = TaskSpec {
            manifest,
            images: self.images.clone(),
            labels: self.labels.clone(),
        };
        task.validate()?;
        Ok(task)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_manifest(serde_json::from_str(&text)?)
    }
}

/// Samples per class and class counts for generated suites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteDims {
    pub classes_per_task: usize,
    /// Samples a task receives from each of its classes.
    pub samples_per_class: usize,
    /// Size of each family's class vocabulary (family suites only).
    pub classes_per_family: usize,
}

impl Default for SuiteDims {
    fn default() -> Self {
        Self {
            classes_per_task: 5,
            samples_per_class: 60,
            classes_per_family: 8,
        }
    }
}

/// Per-class splits: a quarter to test, 10% of the rest (at least one) to
/// validation, the remainder to train.
fn split_samples(samples: &[SampleRef], classes: usize, rng: &mut ChaCha8Rng) -> Splits {
    let mut sp = Splits::default();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == c).collect();
        idx.shuffle(rng);
        let n_test = (idx.len() / 4).max(1);
        let rest = idx.len() - n_test;
        let n_val = (rest / 10).max(1).min(rest.saturating_sub(1));
        sp.test.extend(&idx[..n_test]);
        sp.val.extend(&idx[n_test..n_test + n_val]);
        sp.train.extend(&idx[n_test + n_val..]);
    }
    sp.train.sort_unstable();
    sp.val.sort_unstable();
    sp.test.sort_unstable();
    sp
}

fn build_task(
    id: String,
    family: String,
    classes: Vec<ClassRef>,
    ranges: Vec<std::ops::Range<u64>>,
    bank: &ImageBank,
    seed: u64,
) -> Result<TaskSpec> {
    let mut samples = Vec::new();
    for (label, r) in ranges.into_iter().enumerate() {
        samples.extend(r.map(|index| SampleRef { label, index }));
    }
    let mut rng = rng_for(&[seed, 11, mix_seed(&id.bytes().map(u64::from).collect::<Vec<_>>())]);
    let splits = split_samples(&samples, classes.len(), &mut rng);
    TaskSpec::from_manifest(TaskManifest {
        id,
        family,
        classes,
        samples,
        splits,
        subset: None,
        bank: bank.clone(),
    })
}

pub fn family_tag(family: u32) -> String {
    format!("family-{family}")
}

/// One task drawn from `family`: `classes_per_task` classes from the family
/// vocabulary, with samples from a `slot`-private index range so no two
/// tasks share an image.
pub fn family_task(bank: &ImageBank, family: u32, slot: u64, dims: &SuiteDims, seed: u64) -> Result<TaskSpec> {
    if dims.classes_per_task == 0 || dims.classes_per_task > dims.classes_per_family {
        return Err(Error::invalid(format!(
            "{} classes per task from a vocabulary of {}",
            dims.classes_per_task, dims.classes_per_family
        )));
    }
    if dims.samples_per_class < 4 {
        return Err(Error::invalid("need at least 4 samples per class"));
    }
    let mut rng = rng_for(&[seed, 5, family as u64, slot]);
    let mut vocab: Vec<u32> = (0..dims.classes_per_family as u32).collect();
    vocab.shuffle(&mut rng);
    let mut chosen: Vec<u32> = vocab[..dims.classes_per_task].to_vec();
    chosen.sort_unstable();
    let per = dims.samples_per_class as u64;
    let classes = chosen
        .iter()
        .map(|&class| ClassRef { family, class })
        .collect();
    let ranges = chosen.iter().map(|_| slot * per..(slot + 1) * per).collect();
    build_task(
        format!("f{family}-t{slot}"),
        family_tag(family),
        classes,
        ranges,
        bank,
        seed,
    )
}

/// `n_families x tasks_per_family` tasks; families have disjoint generative
/// structure.
pub fn gen_family_suite(
    n_families: u32,
    tasks_per_family: usize,
    dims: &SuiteDims,
    seed: u64,
) -> Result<Vec<TaskSpec>> {
    if n_families == 0 || tasks_per_family == 0 {
        return Err(Error::invalid("family suite needs at least one family and one task"));
    }
    let bank = ImageBank::new(seed, n_families);
    let mut tasks = Vec::new();
    for f in 0..n_families {
        for t in 0..tasks_per_family {
            tasks.push(family_task(&bank, f, t as u64, dims, seed)?);
        }
    }
    Ok(tasks)
}

/// Class lists for the overlap scheme: every class is used by at most two
/// tasks. The first pass deals classes in order; the second pass reuses a
/// seeded permutation, never repeating a class inside one task.
pub fn overlap_class_lists(n_tasks: usize, classes_per_task: usize, seed: u64) -> Result<(usize, Vec<Vec<u32>>)> {
    if n_tasks == 0 || classes_per_task == 0 {
        return Err(Error::invalid("overlap suite needs tasks and classes"));
    }
    let slots = n_tasks * classes_per_task;
    let n_classes = slots.div_ceil(2).max(classes_per_task);
    let first_tasks = n_classes.div_ceil(classes_per_task).min(n_tasks);
    let mut lists: Vec<Vec<u32>> = Vec::with_capacity(n_tasks);
    let mut next = 0u32;
    for _ in 0..first_tasks {
        let mut l = Vec::new();
        while l.len() < classes_per_task && (next as usize) < n_classes {
            l.push(next);
            next += 1;
        }
        lists.push(l);
    }
    let mut rng = rng_for(&[seed, 13]);
    let mut uses = vec![1u8; n_classes];
    // The last first-pass task may be short; top it up from the start.
    for l in lists.iter_mut() {
        let mut c = 0u32;
        while l.len() < classes_per_task {
            if !l.contains(&c) && uses[c as usize] < 2 {
                l.push(c);
                uses[c as usize] += 1;
            }
            c += 1;
            if c as usize >= n_classes {
                return Err(Error::invalid("overlap budget infeasible"));
            }
        }
    }
    for _attempt in 0..64 {
        let mut pool: Vec<u32> = (0..n_classes as u32).filter(|&c| uses[c as usize] < 2).collect();
        pool.shuffle(&mut rng);
        let mut second: Vec<Vec<u32>> = Vec::new();
        let mut ok = true;
        for _ in first_tasks..n_tasks {
            let mut l = Vec::with_capacity(classes_per_task);
            let mut i = 0;
            while l.len() < classes_per_task && i < pool.len() {
                if !l.contains(&pool[i]) {
                    l.push(pool.remove(i));
                } else {
                    i += 1;
                }
            }
            if l.len() < classes_per_task {
                ok = false;
                break;
            }
            second.push(l);
        }
        if ok {
            lists.extend(second);
            return Ok((n_classes, lists));
        }
    }
    Err(Error::invalid(format!(
        "cannot place {n_tasks} tasks of {classes_per_task} classes with each class used twice"
    )))
}

/// Overlap suite: tasks share classes but never samples. A class used by two
/// tasks gives the first the lower half of its samples and the second the
/// upper half.
pub fn gen_overlap_suite(n_tasks: usize, classes_per_task: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    gen_overlap_suite_with(n_tasks, classes_per_task, 60, seed)
}

pub fn gen_overlap_suite_with(
    n_tasks: usize,
    classes_per_task: usize,
    samples_per_class: usize,
    seed: u64,
) -> Result<Vec<TaskSpec>> {
    if samples_per_class < 4 {
        return Err(Error::invalid("need at least 4 samples per class"));
    }
    let (n_classes, lists) = overlap_class_lists(n_tasks, classes_per_task, seed)?;
    let mut bank = ImageBank::new(seed, 1);
    // One family; a larger primitive vocabulary keeps classes distinct.
    // Nuisance strokes would come from the same band as class strokes.
    bank.primitives_per_family = 12;
    bank.nuisance = 0;
    let mut seen = vec![0u8; n_classes];
    let per = samples_per_class as u64;
    let mut tasks = Vec::with_capacity(n_tasks);
    for (t, list) in lists.into_iter().enumerate() {
        let mut classes = Vec::new();
        let mut ranges = Vec::new();
        for c in list {
            let half = seen[c as usize] as u64;
            seen[c as usize] += 1;
            classes.push(ClassRef { family: 0, class: c });
            ranges.push(half * per..(half + 1) * per);
        }
        tasks.push(build_task(format!("o{t}"), "overlap".into(), classes, ranges, &bank, seed)?);
    }
    Ok(tasks)
}
