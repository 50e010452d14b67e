//! `acf scenes`: generate a synthetic corpus — scene pairs, a matching
//! tabular policy, pair metadata, and an eval manifest — into a directory.
//!
//! Generation is deterministic in the seed, so regenerating with the same
//! flags reproduces the corpus byte for byte; every file carries a `_meta`
//! provenance stamp with the tool version and configuration hash.

use std::path::PathBuf;

use acf_core::engine::QueryBudget;
use acf_core::envsim::{generate_synthetic, SyntheticBundle, SyntheticConfig};
use clap::Args;
use serde_json::json;

use crate::error::CliError;
use crate::report;

/// Generate a synthetic scene corpus.
#[derive(Debug, Args)]
pub struct ScenesArgs {
    /// Generation seed; also the base for the manifest's per-query seeds.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Number of (factual, intervened) scene pairs.
    #[arg(long, default_value_t = 50)]
    pub pairs: usize,

    /// Choices per scene (at least 2).
    #[arg(long, default_value_t = 3)]
    pub choices: usize,

    /// Every Nth pair moves the flagged label between worlds; 0 disables.
    #[arg(long, value_name = "N", default_value_t = 5)]
    pub meaning_shift_every: usize,

    /// Every Nth pair drops one choice from the intervened scene; 0 disables.
    #[arg(long, value_name = "N", default_value_t = 7)]
    pub cardinality_shift_every: usize,

    /// Directory that receives scenes.json, policy.json, pairs.json, and
    /// manifest.json.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

/// The four files the generator writes, as (name, content) pairs. Split out
/// from `run` so tests can regenerate into memory and compare bytes.
pub fn render_files(args: &ScenesArgs) -> Result<Vec<(&'static str, String)>, CliError> {
    if args.choices < 2 {
        return Err(CliError::Validation("--choices must be at least 2".into()));
    }
    if args.pairs == 0 {
        return Err(CliError::Validation("--pairs must be at least 1".into()));
    }
    let config = SyntheticConfig {
        n_pairs: args.pairs,
        n_choices: args.choices,
        meaning_shift_every: args.meaning_shift_every,
        cardinality_shift_every: args.cardinality_shift_every,
        seed: args.seed,
    };
    let generated = generate_synthetic(&config);

    let config_hash = report::sha256_hex(
        acf_core::fixtures::canonical_json(&json!({
            "seed": args.seed,
            "pairs": args.pairs,
            "choices": args.choices,
            "meaning_shift_every": args.meaning_shift_every,
            "cardinality_shift_every": args.cardinality_shift_every,
        }))
        .as_bytes(),
    );
    let meta = report::meta_object(&config_hash, &[args.seed]);

    let render = |mut value: serde_json::Value| -> String {
        value
            .as_object_mut()
            .expect("every generated file is a JSON object")
            .insert("_meta".into(), meta.clone());
        let mut text = serde_json::to_string_pretty(&value).expect("serializable");
        text.push('\n');
        text
    };

    Ok(vec![
        ("scenes.json", render(serde_json::to_value(&generated.bundle).expect("serializable"))),
        ("policy.json", render(policy_value(&generated)?)),
        ("pairs.json", render(json!({ "pairs": generated.pairs }))),
        ("manifest.json", render(manifest_value(args, &generated)?)),
    ])
}

/// Tabular choice policy over every generated scene, probabilities aligned
/// with each scene's label order.
fn policy_value(generated: &SyntheticBundle) -> Result<serde_json::Value, CliError> {
    let mut states = serde_json::Map::new();
    for pair in &generated.pairs {
        for (id, probs) in [
            (&pair.factual_id, &pair.factual_probs),
            (&pair.intervened_id, &pair.intervened_probs),
        ] {
            let scene = generated.bundle.scene(id)?;
            let choices: serde_json::Map<String, serde_json::Value> = scene
                .choices
                .iter()
                .zip(probs)
                .map(|(choice, p)| (choice.label.clone(), json!(p)))
                .collect();
            states.insert(id.clone(), json!({ "choices": choices }));
        }
    }
    Ok(json!({ "kind": "choice", "states": states }))
}

/// Eval manifest over the generated pairs: one query per pair, observing the
/// factual scene's flagged choice.
fn manifest_value(
    args: &ScenesArgs,
    generated: &SyntheticBundle,
) -> Result<serde_json::Value, CliError> {
    let mut queries = Vec::with_capacity(generated.pairs.len());
    for (i, pair) in generated.pairs.iter().enumerate() {
        let scene = generated.bundle.scene(&pair.factual_id)?;
        let observed = scene
            .choices
            .iter()
            .find(|c| c.tag("physical_harm") == 1)
            .map(|c| c.label.clone())
            .ok_or_else(|| {
                CliError::Inference(format!(
                    "generated scene {:?} has no flagged choice",
                    pair.factual_id
                ))
            })?;
        queries.push(json!({
            "id": format!("q{i:03}"),
            "factual_scene": pair.factual_id,
            "intervened_scene": pair.intervened_id,
            "observed_choice": observed,
            "seed": args.seed.wrapping_add(i as u64),
        }));
    }
    Ok(json!({
        "scene_file": "scenes.json",
        "policy_file": "policy.json",
        "abstraction": "annotation:physical_harm",
        "default_budget": QueryBudget::default(),
        "queries": queries,
    }))
}

pub fn run(args: &ScenesArgs) -> Result<(), CliError> {
    let files = render_files(args)?;
    for (name, text) in &files {
        let path = args.out_dir.join(name);
        report::write_text(Some(path.as_path()), text)?;
        println!("{name} → {}", path.display());
    }
    println!(
        "generated {} scene pairs ({} choices each, seed {})",
        args.pairs, args.choices, args.seed
    );
    Ok(())
}
