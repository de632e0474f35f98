//! Helpers shared by the integration test crates.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use kairanban::datasets::{DataFormat, DatasetName, DatasetSpec};
use kairanban::experiment::{BackendChoice, RunConfig};
use kairanban::fixtures::{step_reply, Script};
use kairanban::orchestrator::System;
use kairanban::LabelSpace;

/// Six ternary rows; numeric and named labels both appear in the wild.
pub const DATASET: &str = "\
the plot drags and the jokes land flat\t0
fine I guess, nothing memorable\t1
an absolute joy from start to finish\t2
they lost my luggage twice\tnegative
the announcement changed nothing\tneutral
best support team I've dealt with\tpositive
";

pub fn write_dataset(dir: &Path) -> PathBuf {
    let path = dir.join("tweeteval_test.tsv");
    fs::write(&path, DATASET).unwrap();
    path
}

pub fn single_reply(space: &LabelSpace) -> String {
    step_reply(
        "direct read",
        "sounds negative overall",
        space,
        &[0.6, 0.25, 0.15],
    )
}

/// One instance's replies for a kcs run: n steps plus the judge.
pub fn kcs_block(space: &LabelSpace, n: usize) -> Vec<String> {
    let mut block: Vec<String> = (1..=n)
        .map(|i| {
            let lead = 0.2 + 0.1 * i as f64;
            let rest = (1.0 - lead) / 2.0;
            step_reply(
                &format!("step {i} analysis"),
                &format!("step {i} keeps leaning negative"),
                space,
                &[lead, rest, rest],
            )
        })
        .collect();
    block.push(step_reply(
        "judge fusion",
        "the chain agrees on negative",
        space,
        &[0.7, 0.2, 0.1],
    ));
    block
}

/// One instance's replies for a kcs_ibc run: early steps, n+1 comments,
/// remaining steps, judge.
pub fn kcs_ibc_block(space: &LabelSpace, n: usize, m: usize) -> Vec<String> {
    let steps = kcs_block(space, n);
    let mut block: Vec<String> = steps[..m - 1].to_vec();
    for j in 0..=n {
        block.push(format!(
            "participant {j} checking in — still negative to me"
        ));
    }
    block.extend_from_slice(&steps[m - 1..]);
    block
}

pub fn script_file(dir: &Path, blocks: &[Vec<String>]) -> PathBuf {
    let mut script = Script::default();
    for block in blocks {
        for reply in block {
            script.push_reply(reply.clone());
        }
    }
    let path = dir.join("script.jsonl");
    script.save(&path).unwrap();
    path
}

/// A tweeteval-only run config against a scripted backend.
pub fn base_config(
    data_dir: &Path,
    out_dir: &Path,
    script: &Path,
    systems: Vec<System>,
) -> RunConfig {
    let spec = DatasetSpec {
        name: DatasetName::TweetEval,
        format: DataFormat::TabSeparated {
            path: data_dir.join("tweeteval_test.tsv"),
        },
    };
    let mut config = RunConfig::new(
        systems,
        vec![spec],
        out_dir.to_path_buf(),
        BackendChoice::MockScript {
            path: script.to_path_buf(),
        },
    );
    config.sample_size = 3;
    config.concurrency = 2;
    config
}

/// File name -> bytes for every regular file directly under `dir`.
pub fn dir_snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut map = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            let name = path.file_name().unwrap().to_str().unwrap().to_string();
            map.insert(name, fs::read(&path).unwrap());
        }
    }
    map
}
