#![allow(dead_code)]

use std::path::Path;

use cpc_cli::{cmd_gen_data, RunConfig};
use cpc_core::clustering::{CategoryList, CategoryPartition, Cluster};

/// `configs/toy.toml` with every path rooted at `dir`.
pub fn toy_config(dir: &Path) -> RunConfig {
    let file = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let mut cfg = RunConfig::load(Some(&file), &[]).expect("toy config");
    cfg.paths.data_dir = dir.join("data");
    cfg.paths.categories = dir.join("data/categories.txt");
    cfg.paths.manifest = dir.join("data/manifest.json");
    cfg.paths.partition = dir.join("partition.json");
    cfg.paths.checkpoint = dir.join("out/model.cpcm");
    cfg.paths.output_dir = dir.join("out");
    cfg
}

/// The toy model on 48×48 images where `cat` and `dog` share a cluster and
/// nearly share a color.
pub fn confusable_config(dir: &Path, seed: u64) -> RunConfig {
    let mut cfg = toy_config(dir);
    cfg.synth.image_side = 48;
    cfg.synth.shape_side = (15, 24);
    cfg.synth.confusable_pairs = vec![("cat".into(), "dog".into())];
    cfg.synth.seed = seed;
    cfg.feature.image_side = 48;
    cfg.feature.patch_side = 6;
    cfg.train.seed = seed;
    cfg.provider.seed = seed;
    cfg
}

/// Two clusters pairing the categories in list order.
pub fn pair_partition(categories: &CategoryList) -> CategoryPartition {
    let names = categories.names();
    let clusters = names
        .chunks(2)
        .enumerate()
        .map(|(i, c)| Cluster {
            name: format!("group{i}"),
            members: c.to_vec(),
        })
        .collect();
    CategoryPartition::new(clusters, categories).unwrap()
}

/// Generate the dataset and write the partition.
pub fn setup(cfg: &RunConfig) {
    cmd_gen_data(cfg).unwrap();
    let cats = CategoryList::from_file(&cfg.paths.categories).unwrap();
    pair_partition(&cats).save(&cfg.paths.partition).unwrap();
}
