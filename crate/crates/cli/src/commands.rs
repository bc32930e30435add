use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cyclevqg::checkpoint::Checkpoint;
use cyclevqg::config::ExperimentConfig;
use cyclevqg::data::{
    load_vqa, read_cache, split, write_cache, CategoryMap, DataSource, DatasetSplit, ImageRef, ImageSource, Manifest,
    ToyConfig, Vocabulary,
};
use cyclevqg::inference::{generate_all, write_records, DecodeMode, GenerationRecord};
use cyclevqg::metrics::{evaluate as score, InventivenessBase};
use cyclevqg::model::Model;
use cyclevqg::training::{train_with, EncodedDataset, TrainState};

use crate::Common;

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.data.split_seed = seed;
    }
    Ok(cfg)
}

/// A split dataset with everything needed to resolve its images.
struct Dataset {
    split: DatasetSplit,
    vocab: Vocabulary,
    categories: CategoryMap,
    images: ImageSource,
}

fn toy_config(cfg: &ExperimentConfig) -> Result<ToyConfig> {
    let Some(image_size) = cfg.image_size() else {
        bail!("toy data needs a convolutional image encoder");
    };
    Ok(ToyConfig {
        n_images: cfg.data.toy_images,
        n_categories: cfg.data.toy_categories,
        image_size,
        seed: cfg.data.split_seed,
    })
}

fn toy_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, DataSource)> {
    let tc = toy_config(cfg)?;
    let toy = tc.generate()?;
    let split = split(&toy.samples, cfg.data.split_ratio, cfg.data.split_seed)?;
    let vocab = Vocabulary::from_samples(&split.train, cfg.data.min_word_freq);
    let images = toy.image_source();
    let source = DataSource::Toy {
        n_images: tc.n_images,
        n_categories: tc.n_categories,
        image_size: tc.image_size,
        seed: tc.seed,
    };
    Ok((
        Dataset {
            split,
            vocab,
            categories: toy.categories,
            images,
        },
        source,
    ))
}

/// Toy data built in memory, or a cache written by `prepare`.
fn resolve(common: &Common, cfg: &ExperimentConfig, cache: Option<&Path>) -> Result<Dataset> {
    if common.toy {
        return Ok(toy_dataset(cfg)?.0);
    }
    let Some(dir) = cache else {
        bail!("pass --toy or --data-dir <prepared cache>");
    };
    let cached = read_cache(dir).with_context(|| format!("reading cache {}", dir.display()))?;
    let images = cached.manifest.source.image_source()?;
    Ok(Dataset {
        split: cached.split,
        vocab: cached.manifest.vocab,
        categories: cached.manifest.categories,
        images,
    })
}

pub fn prepare(common: &Common, data_dir: Option<&Path>, categories: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let (dataset, source, report) = if common.toy {
        if categories.is_some() {
            bail!("--categories does not apply to toy data");
        }
        let (d, s) = toy_dataset(&cfg)?;
        (d, s, None)
    } else {
        let Some(root) = data_dir else {
            bail!("pass --toy or --data-dir <raw VQA directory>");
        };
        let map = match categories {
            Some(p) => CategoryMap::from_tsv_file(p)?,
            None => CategoryMap::default(),
        };
        let (mut samples, report) = load_vqa(&cfg.data.annotations_path(root), &cfg.data.questions_path(root), &map)?;
        if cfg.data.features.is_some() {
            for s in &mut samples {
                s.image = ImageRef::Feature(s.image_id);
            }
        }
        let split = split(&samples, cfg.data.split_ratio, cfg.data.split_seed)?;
        let vocab = Vocabulary::from_samples(&split.train, cfg.data.min_word_freq);
        let source = DataSource::Vqa {
            image_dir: Some(cfg.data.image_dir_path(root)),
            features: cfg.data.features_path(root),
            image_size: cfg.image_size().unwrap_or(0),
        };
        let images = source.image_source()?;
        let d = Dataset {
            split,
            vocab,
            categories: map,
            images,
        };
        (d, source, Some(report))
    };
    let manifest = Manifest {
        format_version: 0,
        source,
        vocab: dataset.vocab,
        categories: dataset.categories,
        split_ratio: 0.0,
        seed: cfg.data.split_seed,
        train_count: 0,
        val_count: 0,
        records_sha256: String::new(),
        load_report: report,
    };
    let written = write_cache(out, manifest, &dataset.split)?;
    let m = &written.manifest;
    println!(
        "prepared {} train / {} val samples, {} words, {} categories -> {}",
        m.train_count,
        m.val_count,
        m.vocab.words().len(),
        m.categories.len(),
        out.display()
    );
    if let Some(r) = &m.load_report {
        println!(
            "loader: {} questions, {} kept, {} unmapped, {} malformed, {} unannotated, retention {:.2}%",
            r.questions,
            r.kept,
            r.unmapped,
            r.malformed,
            r.unannotated,
            100.0 * r.retention()
        );
    }
    Ok(())
}

pub fn train(common: &Common, data_dir: Option<&Path>, resume: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let dataset = resolve(common, &cfg, data_dir)?;
    let (mut state, run_train, loss, vocab) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            if ck.vocab != dataset.vocab {
                bail!("checkpoint vocabulary differs from the dataset's");
            }
            let mut train = ck.config.train.clone();
            if common.config.is_some() {
                train.epochs = cfg.train.epochs;
            }
            (ck.state, train, ck.config.loss, ck.vocab)
        }
        None => {
            let model = Model::init(
                cfg.model.clone(),
                dataset.vocab.len(),
                dataset.categories.len(),
                cfg.train.seed,
            )?;
            let state = TrainState::new(model, &cfg.train)?;
            (state, cfg.train.clone(), cfg.loss, dataset.vocab.clone())
        }
    };
    let max_len = state.model.config().max_len;
    let data = EncodedDataset::new(&dataset.split.train, &vocab, &dataset.images, max_len)?;
    let names = dataset.categories.names().to_vec();
    let start_epoch = state.epoch;
    let mut save_err = None;
    train_with(&mut state, &data, &run_train, &loss, |s, summary| {
        let m = &summary.mean;
        println!(
            "epoch {}/{} total={:.6} question={:.6} image={:.6} category={:.6} consistency={:.6} center={:.6} bayes={:.6}",
            summary.epoch,
            run_train.epochs,
            m.total,
            m.question,
            m.image,
            m.category,
            m.consistency,
            m.center,
            m.bayes
        );
        let ck = Checkpoint::new(s.clone(), run_train.clone(), loss, vocab.clone(), names.clone());
        if let Err(e) = ck.save(out) {
            save_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = save_err {
        return Err(e).context("writing checkpoint");
    }
    match state.history.last() {
        Some(last) => println!("final step {} total loss {}", state.step, last.total),
        None => println!("no steps run"),
    }
    if state.epoch == start_epoch {
        Checkpoint::new(state, run_train, loss, vocab, names).save(out)?;
    }
    Ok(())
}

pub fn generate(
    common: &Common,
    data_dir: Option<&Path>,
    checkpoint: &Path,
    temperature: Option<f64>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common)?;
    let dataset = resolve(common, &cfg, data_dir)?;
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    if ck.categories != dataset.categories.names() {
        bail!("checkpoint categories differ from the dataset's");
    }
    let mode = match temperature {
        Some(temperature) => DecodeMode::Sample { temperature },
        None => DecodeMode::Greedy,
    };
    // references per (image, category), images in order of first appearance
    let mut order = Vec::new();
    let mut refs: BTreeMap<u64, (&ImageRef, BTreeMap<usize, Vec<String>>)> = BTreeMap::new();
    for s in &dataset.split.val {
        let entry = refs.entry(s.image_id).or_insert_with(|| {
            order.push(s.image_id);
            (&s.image, BTreeMap::new())
        });
        entry.1.entry(s.category).or_default().push(s.question.clone());
    }
    let model = &ck.state.model;
    let mut records = Vec::new();
    for id in &order {
        let image = dataset.images.load(refs[id].0)?;
        let seed = cfg.train.seed ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        for (category, seq) in generate_all(model, &image, mode, seed)? {
            records.push(GenerationRecord {
                image_id: *id,
                category: ck.categories[category].clone(),
                question: ck.vocab.decode(&seq),
                references: refs[id].1.get(&category).cloned().unwrap_or_default(),
            });
        }
    }
    write_records(out, &records)?;
    println!("wrote {} generations for {} images -> {}", records.len(), order.len(), out.display());
    Ok(())
}

pub fn evaluate(
    common: &Common,
    data_dir: Option<&Path>,
    generations: &Path,
    base: InventivenessBase,
    out: Option<&Path>,
) -> Result<()> {
    let records = cyclevqg::inference::read_records(generations)?;
    let training: Vec<String> = if common.toy || data_dir.is_some() {
        let cfg = load_config(common)?;
        resolve(common, &cfg, data_dir)?
            .split
            .train
            .into_iter()
            .map(|s| s.question)
            .collect()
    } else {
        log::warn!("no training set given; every generation counts as unseen");
        Vec::new()
    };
    let report = score(&records, &training, base)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let json = serde_json::to_string_pretty(&report)?;
        std::fs::write(dir.join("report.json"), json + "\n")?;
        std::fs::write(dir.join("report.txt"), table)?;
    }
    Ok(())
}
