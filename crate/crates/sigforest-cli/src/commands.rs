//! Implementations of the CLI subcommands.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use sigforest::{
    cluster_signatures, featurize_spectra, load_csv, load_model, load_spectra_combined,
    load_spectra_pair, save_csv, save_model, score_batch, signature_batch, verify_depth_identity,
    ClusterConfig, CsvOptions, Dataset, Error, ForestConfig, ForestModel, Result, SignatureMatrix,
};

use crate::manifest::RunManifest;
use crate::{ClusterArgs, FeaturizeArgs, FitArgs, ScoreArgs, SignaturesArgs};

/// Absolute tolerance for the `--check` depth identity.
const IDENTITY_TOLERANCE: f64 = 1e-9;

pub fn fit(args: FitArgs) -> Result<()> {
    let config = ForestConfig::new(args.subsample, args.trees, args.seed)?;
    let mut manifest = RunManifest::new("fit", Some(args.seed), serde_json::Value::Null);
    manifest.add_input(&args.input)?;

    let data = load_dataset(&args.input, args.no_row_ids)?;
    let model = sigforest::fit(&data, &config)?;
    save_model(&model, &args.model_out)?;

    manifest.set_config(json!({
        "requested": { "subsample": args.subsample, "trees": args.trees, "seed": args.seed },
        "effective": model.config(),
    }));
    manifest.add_output(&args.model_out);
    manifest.write(&with_role(&args.model_out, "manifest", "json"))?;
    Ok(())
}

pub fn score(args: ScoreArgs) -> Result<()> {
    let mut manifest = RunManifest::new(
        "score",
        None,
        json!({ "check": args.check }),
    );
    manifest.add_input(&args.model)?;
    manifest.add_input(&args.input)?;

    let model = load_model(&args.model)?;
    let data = load_dataset(&args.input, args.no_row_ids)?;
    check_schema(&model, &data)?;
    let reports = score_batch(&model, &data)?;
    if args.check {
        verify_depth_identity(&model, &data, IDENTITY_TOLERANCE)?;
    }

    let order = score_order(&reports);
    let mut writer = csv::Writer::from_path(&args.out)?;
    writer.write_record(["row_id", "score", "expected_depth_mean"])?;
    for &i in &order {
        writer.write_record([
            data.row_id(i),
            &reports[i].score.to_string(),
            &reports[i].expected_depth_mean.to_string(),
        ])?;
    }
    writer.flush()?;

    manifest.add_output(&args.out);
    manifest.write(&with_role(&args.out, "manifest", "json"))?;
    Ok(())
}

pub fn signatures(args: SignaturesArgs) -> Result<()> {
    let mut manifest = RunManifest::new(
        "signatures",
        None,
        json!({ "all": args.all, "ids": args.ids, "check": args.check }),
    );
    manifest.add_input(&args.model)?;
    manifest.add_input(&args.input)?;

    let model = load_model(&args.model)?;
    let data = load_dataset(&args.input, args.no_row_ids)?;
    check_schema(&model, &data)?;

    let selected = if args.all {
        data.clone()
    } else {
        let ids = args.ids.clone().unwrap_or_default();
        subset_by_ids(&data, &ids)?
    };
    let matrix = signature_batch(&model, &selected)?;
    if args.check {
        verify_depth_identity(&model, &selected, IDENTITY_TOLERANCE)?;
    }

    write_signature_csv(&args.out, &selected, &matrix, Field::Values)?;
    manifest.add_output(&args.out);
    let counts_path = with_role(&args.out, "counts", "csv");
    write_signature_csv(&counts_path, &selected, &matrix, Field::Counts)?;
    manifest.add_output(&counts_path);

    let bundle_path = with_role(&args.out, "bundle", "json");
    write_signature_bundle(&bundle_path, &selected, &matrix)?;
    manifest.add_output(&bundle_path);

    if let Some(split) = spectra_split(model.feature_names()) {
        let flux_path = with_role(&args.out, "flux", "csv");
        write_signature_half(&flux_path, &selected, &matrix, 0..split)?;
        manifest.add_output(&flux_path);
        let err_path = with_role(&args.out, "err", "csv");
        write_signature_half(&err_path, &selected, &matrix, split..2 * split)?;
        manifest.add_output(&err_path);
    }

    manifest.write(&with_role(&args.out, "manifest", "json"))?;
    Ok(())
}

pub fn cluster(args: ClusterArgs) -> Result<()> {
    let config = ClusterConfig {
        k: args.k,
        top_fraction: args.top_fraction,
        restarts: args.restarts,
        max_iterations: args.max_iterations,
        tolerance: args.tolerance,
        seed: args.seed,
        standardize: args.standardize,
    };
    let mut manifest = RunManifest::new(
        "cluster",
        Some(args.seed),
        serde_json::to_value(&config)
            .map_err(|e| Error::InvalidConfig(format!("config echo: {e}")))?,
    );
    manifest.add_input(&args.model)?;
    manifest.add_input(&args.input)?;

    let model = load_model(&args.model)?;
    let data = load_dataset(&args.input, args.no_row_ids)?;
    check_schema(&model, &data)?;
    let report = cluster_signatures(&model, &data, &config)?;
    if args.check {
        verify_depth_identity(&model, &data, IDENTITY_TOLERANCE)?;
    }

    let assignments_path = path_with_suffix(&args.out_prefix, "assignments.csv");
    let mut writer = csv::Writer::from_path(&assignments_path)?;
    writer.write_record(["row_id", "score", "cluster"])?;
    for ((&row, &score), &cluster) in report
        .selected_ids
        .iter()
        .zip(&report.selected_scores)
        .zip(&report.assignments)
    {
        writer.write_record([
            data.row_id(row),
            &score.to_string(),
            &cluster.to_string(),
        ])?;
    }
    writer.flush()?;
    manifest.add_output(&assignments_path);

    let profiles_path = path_with_suffix(&args.out_prefix, "profiles.csv");
    let mut writer = csv::Writer::from_path(&profiles_path)?;
    let mut header = vec!["cluster".to_string(), "size".to_string()];
    header.extend(model.feature_names().iter().cloned());
    writer.write_record(&header)?;
    for (c, profile) in report.profiles.iter().enumerate() {
        let mut record = vec![c.to_string(), report.cluster_sizes[c].to_string()];
        record.extend(profile.iter().map(|v| v.to_string()));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    manifest.add_output(&profiles_path);

    let selected_count = report.selected_ids.len();
    let smallest = report
        .cluster_sizes
        .iter()
        .copied()
        .filter(|&s| s > 0)
        .min()
        .unwrap_or(0);
    let triage_ratio = selected_count as f64 / smallest as f64;
    let report_path = path_with_suffix(&args.out_prefix, "report.json");
    let json_report = ClusterJsonReport {
        config: &config,
        selected_count,
        selected_ids: report
            .selected_ids
            .iter()
            .map(|&i| data.row_id(i).to_string())
            .collect(),
        cluster_sizes: &report.cluster_sizes,
        smallest_cluster_size: smallest,
        triage_ratio,
        inertia: report.inertia,
    };
    let writer = std::io::BufWriter::new(std::fs::File::create(&report_path)?);
    serde_json::to_writer_pretty(writer, &json_report)
        .map_err(|e| Error::InvalidConfig(format!("report: {e}")))?;
    manifest.add_output(&report_path);

    manifest.write(&path_with_suffix(&args.out_prefix, "manifest.json"))?;
    Ok(())
}

pub fn featurize(args: FeaturizeArgs) -> Result<()> {
    let mut manifest = RunManifest::new(
        "featurize",
        None,
        json!({ "split_at": args.split_at }),
    );
    let pair = match (&args.flux, &args.uncertainty, &args.input, args.split_at) {
        (Some(flux), Some(unc), None, None) => {
            manifest.add_input(flux)?;
            manifest.add_input(unc)?;
            load_spectra_pair(flux, unc)?
        }
        (None, None, Some(input), Some(split_at)) => {
            manifest.add_input(input)?;
            load_spectra_combined(input, split_at)?
        }
        _ => {
            return Err(Error::InvalidConfig(
                "pass either --flux with --uncertainty, or --input with --split-at".into(),
            ))
        }
    };
    let data = featurize_spectra(&pair)?;
    save_csv(&data, &args.out)?;
    manifest.add_output(&args.out);
    manifest.write(&with_role(&args.out, "manifest", "json"))?;
    Ok(())
}

#[derive(Serialize)]
struct ClusterJsonReport<'a> {
    config: &'a ClusterConfig,
    selected_count: usize,
    selected_ids: Vec<String>,
    cluster_sizes: &'a [usize],
    smallest_cluster_size: usize,
    triage_ratio: f64,
    inertia: f64,
}

fn load_dataset(path: &Path, no_row_ids: bool) -> Result<Dataset> {
    load_csv(
        path,
        &CsvOptions {
            has_row_ids: !no_row_ids,
        },
    )
}

/// Exact schema match between model and input, reporting missing/extra
/// columns (or the first positional difference when only the order varies).
fn check_schema(model: &ForestModel, data: &Dataset) -> Result<()> {
    if model.feature_names() == data.feature_names() {
        return Ok(());
    }
    let model_set: HashSet<&String> = model.feature_names().iter().collect();
    let data_set: HashSet<&String> = data.feature_names().iter().collect();
    let mut missing: Vec<String> = model
        .feature_names()
        .iter()
        .filter(|n| !data_set.contains(*n))
        .cloned()
        .collect();
    let mut extra: Vec<String> = data
        .feature_names()
        .iter()
        .filter(|n| !model_set.contains(*n))
        .cloned()
        .collect();
    if missing.is_empty() && extra.is_empty() {
        for (m, d) in model.feature_names().iter().zip(data.feature_names()) {
            if m != d {
                missing.push(format!("{m} (order)"));
                extra.push(format!("{d} (order)"));
                break;
            }
        }
    }
    Err(Error::SchemaMismatch { missing, extra })
}

fn subset_by_ids(data: &Dataset, ids: &[String]) -> Result<Dataset> {
    let mut values = Vec::with_capacity(ids.len() * data.n_features());
    for id in ids {
        let row = data
            .position_of(id)
            .ok_or_else(|| Error::UnknownRowId(id.clone()))?;
        values.extend_from_slice(data.row(row));
    }
    Dataset::new(data.feature_names().to_vec(), ids.to_vec(), values)
}

/// Indices sorted by score ascending; ties keep row order.
fn score_order(reports: &[sigforest::ScoreReport]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| reports[a].score.total_cmp(&reports[b].score).then(a.cmp(&b)));
    order
}

enum Field {
    Values,
    Counts,
}

fn write_signature_csv(
    path: &Path,
    data: &Dataset,
    matrix: &SignatureMatrix,
    field: Field,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["row_id".to_string()];
    header.extend(data.feature_names().iter().cloned());
    writer.write_record(&header)?;
    for (i, row) in matrix.rows.iter().enumerate() {
        let mut record = vec![data.row_id(i).to_string()];
        match field {
            Field::Values => record.extend(row.values.iter().map(|v| v.to_string())),
            Field::Counts => record.extend(row.counts.iter().map(|c| c.to_string())),
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

fn write_signature_half(
    path: &Path,
    data: &Dataset,
    matrix: &SignatureMatrix,
    columns: std::ops::Range<usize>,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["row_id".to_string()];
    header.extend(data.feature_names()[columns.clone()].iter().cloned());
    writer.write_record(&header)?;
    for (i, row) in matrix.rows.iter().enumerate() {
        let mut record = vec![data.row_id(i).to_string()];
        record.extend(row.values[columns.clone()].iter().map(|v| v.to_string()));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SignatureBundle<'a> {
    feature_names: &'a [String],
    row_ids: &'a [String],
    values: Vec<&'a [f64]>,
    counts: Vec<&'a [usize]>,
    defined: Vec<&'a [bool]>,
}

fn write_signature_bundle(path: &Path, data: &Dataset, matrix: &SignatureMatrix) -> Result<()> {
    let bundle = SignatureBundle {
        feature_names: data.feature_names(),
        row_ids: data.row_ids(),
        values: matrix.rows.iter().map(|r| r.values.as_slice()).collect(),
        counts: matrix.rows.iter().map(|r| r.counts.as_slice()).collect(),
        defined: matrix
            .rows
            .iter()
            .map(|r| r.defined_mask.as_slice())
            .collect(),
    };
    let writer = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(writer, &bundle)
        .map_err(|e| Error::InvalidConfig(format!("bundle: {e}")))?;
    Ok(())
}

/// Detects a `[flux_*, err_*]` feature layout of two equal halves.
fn spectra_split(names: &[String]) -> Option<usize> {
    if names.is_empty() || !names.len().is_multiple_of(2) {
        return None;
    }
    let half = names.len() / 2;
    let flux_half = names[..half].iter().all(|n| n.starts_with("flux_"));
    let err_half = names[half..].iter().all(|n| n.starts_with("err_"));
    (flux_half && err_half).then_some(half)
}

/// `dir/stem.role.ext` next to an output path.
fn with_role(out: &Path, role: &str, ext: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("output");
    out.with_file_name(format!("{stem}.{role}.{ext}"))
}

/// `<prefix>.<suffix>` for prefix-style outputs.
fn path_with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
