//! Tabular ingestion: CSV datasets, spectra-pair featurization, and
//! versioned model files.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::forest::{ForestConfig, ForestModel, IsolationTree, TreeNode};
use crate::math::ExpectedDepthTable;

/// Version tag written into every model file.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// An N x D matrix of finite values with unique feature names and row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_names: Vec<String>,
    row_ids: Vec<String>,
    values: Vec<f64>, // row-major, n_rows * n_features
}

impl Dataset {
    pub fn new(feature_names: Vec<String>, row_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let d = feature_names.len();
        if d == 0 {
            return Err(Error::InvalidConfig("dataset has no feature columns".into()));
        }
        if values.len() != row_ids.len() * d {
            return Err(Error::InvalidConfig(format!(
                "value buffer holds {} cells, expected {} rows x {} columns",
                values.len(),
                row_ids.len(),
                d
            )));
        }
        let mut seen = HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateHeader(name.clone()));
            }
        }
        let mut seen = HashSet::new();
        for id in &row_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateRowId(id.clone()));
            }
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    row: i / d,
                    col: i % d,
                });
            }
        }
        Ok(Dataset {
            feature_names,
            row_ids,
            values,
        })
    }

    /// Builds a dataset from per-row vectors, generating index row ids.
    pub fn from_rows(feature_names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = feature_names.len();
        let mut values = Vec::with_capacity(rows.len() * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: row.len(),
                });
            }
            let _ = i;
            values.extend_from_slice(row);
        }
        let row_ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Dataset::new(feature_names, row_ids, values)
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_features();
        &self.values[i * d..(i + 1) * d]
    }

    #[inline]
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_features() + col]
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn row_id(&self, i: usize) -> &str {
        &self.row_ids[i]
    }

    /// Position of a row id, if present.
    pub fn position_of(&self, id: &str) -> Option<usize> {
        self.row_ids.iter().position(|r| r == id)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Options for [`load_csv`].
#[derive(Debug, Clone)]
pub struct CsvOptions {
    /// When true (default) the first column holds row ids; otherwise row ids
    /// are generated from the row index.
    pub has_row_ids: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions { has_row_ids: true }
    }
}

/// Loads a headered CSV of finite decimal values.
///
/// Row/column positions in errors are 1-based file coordinates (the header
/// is line 1).
pub fn load_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut records = reader.records();

    let header = match records.next() {
        Some(record) => record?,
        None => return Err(Error::EmptyFile(path.to_path_buf())),
    };
    let id_cols = usize::from(options.has_row_ids);
    if header.len() <= id_cols {
        return Err(Error::InvalidConfig(format!(
            "header of {} has no feature columns",
            path.display()
        )));
    }
    let feature_names: Vec<String> = header.iter().skip(id_cols).map(str::to_owned).collect();
    let mut seen = HashSet::new();
    for name in &feature_names {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateHeader(name.clone()));
        }
    }

    let d = feature_names.len();
    let mut row_ids = Vec::new();
    let mut values = Vec::new();
    let mut seen_ids = HashSet::new();
    for (i, record) in records.enumerate() {
        let record = record?;
        let line = i + 2;
        if record.len() != d + id_cols {
            let col = record.len().min(d + id_cols) + 1;
            let token = record.get(d + id_cols).unwrap_or("").to_owned();
            return Err(Error::ParseError {
                row: line,
                col,
                token,
            });
        }
        let id = if options.has_row_ids {
            record.get(0).unwrap_or("").to_owned()
        } else {
            i.to_string()
        };
        if !seen_ids.insert(id.clone()) {
            return Err(Error::DuplicateRowId(id));
        }
        row_ids.push(id);
        for (j, token) in record.iter().skip(id_cols).enumerate() {
            values.push(parse_cell(token, line, j + id_cols + 1)?);
        }
    }
    Dataset::new(feature_names, row_ids, values)
}

fn parse_cell(token: &str, row: usize, col: usize) -> Result<f64> {
    match token.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::ParseError {
            row,
            col,
            token: token.to_owned(),
        }),
    }
}

/// Writes a dataset as `id,<features...>` with round-trip exact decimals.
pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let mut header = Vec::with_capacity(dataset.n_features() + 1);
    header.push("id".to_owned());
    header.extend(dataset.feature_names().iter().cloned());
    writer.write_record(&header)?;
    let mut record = Vec::with_capacity(dataset.n_features() + 1);
    for i in 0..dataset.n_rows() {
        record.clear();
        record.push(dataset.row_id(i).to_owned());
        record.extend(dataset.row(i).iter().map(|v| v.to_string()));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Matched flux and uncertainty spectra over one equally spaced wavelength
/// grid.
#[derive(Debug, Clone)]
pub struct SpectraPair {
    wavelengths: Vec<f64>,
    row_ids: Vec<String>,
    flux: Vec<f64>,        // row-major, n_rows * n_bins
    uncertainty: Vec<f64>, // same layout
}

impl SpectraPair {
    pub fn new(
        wavelengths: Vec<f64>,
        row_ids: Vec<String>,
        flux: Vec<f64>,
        uncertainty: Vec<f64>,
    ) -> Result<Self> {
        let b = wavelengths.len();
        if b == 0 {
            return Err(Error::InvalidSpectra("wavelength grid is empty".into()));
        }
        if flux.len() != row_ids.len() * b || uncertainty.len() != flux.len() {
            return Err(Error::InvalidSpectra(format!(
                "flux holds {} cells and uncertainty {}, expected {} rows x {} bins",
                flux.len(),
                uncertainty.len(),
                row_ids.len(),
                b
            )));
        }
        bin_width(&wavelengths)?;
        for (i, u) in uncertainty.iter().enumerate() {
            if !u.is_finite() || *u < 0.0 {
                return Err(Error::NegativeUncertainty {
                    row: i / b,
                    col: i % b,
                });
            }
        }
        for (i, f) in flux.iter().enumerate() {
            if !f.is_finite() {
                return Err(Error::NonFiniteValue {
                    row: i / b,
                    col: i % b,
                });
            }
        }
        Ok(SpectraPair {
            wavelengths,
            row_ids,
            flux,
            uncertainty,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_bins(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }
}

/// Constant bin width of a strictly increasing, equally spaced grid.
///
/// Spacing must be constant within 1e-6 relative. A single-bin grid gets a
/// unit width.
fn bin_width(wavelengths: &[f64]) -> Result<f64> {
    if wavelengths.len() < 2 {
        return Ok(1.0);
    }
    let b = wavelengths.len();
    let width = (wavelengths[b - 1] - wavelengths[0]) / (b - 1) as f64;
    if !width.is_finite() || width <= 0.0 {
        return Err(Error::InvalidSpectra(
            "wavelengths must be finite and strictly increasing".into(),
        ));
    }
    for w in wavelengths.windows(2) {
        let step = w[1] - w[0];
        if (step - width).abs() > 1e-6 * width {
            return Err(Error::InvalidSpectra(format!(
                "uneven wavelength spacing: step {} vs mean width {}",
                step, width
            )));
        }
    }
    Ok(width)
}

/// Rescales each spectrum so its flux integrates to 1 (rectangle rule over
/// the constant bin width) and concatenates `[flux, uncertainty]` into one
/// feature row. Uncertainties are scaled by the same per-row factor, which
/// preserves each bin's signal-to-noise.
pub fn featurize_spectra(pair: &SpectraPair) -> Result<Dataset> {
    let b = pair.n_bins();
    let width = bin_width(&pair.wavelengths)?;
    let mut feature_names = Vec::with_capacity(2 * b);
    for w in &pair.wavelengths {
        feature_names.push(format!("flux_{w}"));
    }
    for w in &pair.wavelengths {
        feature_names.push(format!("err_{w}"));
    }

    let mut values = Vec::with_capacity(pair.n_rows() * 2 * b);
    for i in 0..pair.n_rows() {
        let flux = &pair.flux[i * b..(i + 1) * b];
        let unc = &pair.uncertainty[i * b..(i + 1) * b];
        let integral: f64 = flux.iter().map(|f| f * width).sum();
        if integral <= 0.0 {
            return Err(Error::NonPositiveIntegral {
                row_id: pair.row_ids[i].clone(),
            });
        }
        let scale = 1.0 / integral;
        values.extend(flux.iter().map(|f| f * scale));
        values.extend(unc.iter().map(|u| u * scale));
    }
    Dataset::new(feature_names, pair.row_ids.clone(), values)
}

/// Loads a spectra pair from two CSV files sharing one wavelength header.
pub fn load_spectra_pair(
    flux_path: impl AsRef<Path>,
    uncertainty_path: impl AsRef<Path>,
) -> Result<SpectraPair> {
    let flux = load_csv(flux_path.as_ref(), &CsvOptions::default())?;
    let unc = load_csv(uncertainty_path.as_ref(), &CsvOptions::default())?;
    if flux.feature_names() != unc.feature_names() {
        return Err(Error::InvalidSpectra(
            "flux and uncertainty files carry different wavelength headers".into(),
        ));
    }
    if flux.row_ids() != unc.row_ids() {
        return Err(Error::InvalidSpectra(
            "flux and uncertainty files list different row ids".into(),
        ));
    }
    let wavelengths = parse_wavelengths(flux.feature_names())?;
    SpectraPair::new(
        wavelengths,
        flux.row_ids().to_vec(),
        flux.values().to_vec(),
        unc.values().to_vec(),
    )
}

/// Loads a combined CSV whose first `split_at` feature columns are flux and
/// remaining columns are uncertainty over the same grid.
pub fn load_spectra_combined(path: impl AsRef<Path>, split_at: usize) -> Result<SpectraPair> {
    let data = load_csv(path.as_ref(), &CsvOptions::default())?;
    let d = data.n_features();
    if split_at == 0 || split_at * 2 != d {
        return Err(Error::InvalidSpectra(format!(
            "split index {split_at} does not halve the {d} feature columns"
        )));
    }
    let flux_waves = parse_wavelengths(&data.feature_names()[..split_at])?;
    let unc_waves = parse_wavelengths(&data.feature_names()[split_at..])?;
    if flux_waves != unc_waves {
        return Err(Error::InvalidSpectra(
            "flux and uncertainty halves carry different wavelength grids".into(),
        ));
    }
    let n = data.n_rows();
    let mut flux = Vec::with_capacity(n * split_at);
    let mut unc = Vec::with_capacity(n * split_at);
    for i in 0..n {
        let row = data.row(i);
        flux.extend_from_slice(&row[..split_at]);
        unc.extend_from_slice(&row[split_at..]);
    }
    SpectraPair::new(flux_waves, data.row_ids().to_vec(), flux, unc)
}

fn parse_wavelengths(names: &[String]) -> Result<Vec<f64>> {
    names
        .iter()
        .map(|name| {
            // accept bare numbers or a `<prefix>_<number>` column name
            let token = name.rsplit('_').next().unwrap_or(name);
            token
                .parse::<f64>()
                .ok()
                .filter(|w| w.is_finite())
                .ok_or_else(|| {
                    Error::InvalidSpectra(format!("header column {name:?} is not a wavelength"))
                })
        })
        .collect()
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ModelFile {
    format_version: u32,
    config: ForestConfig,
    feature_names: Vec<String>,
    trees: Vec<Vec<TreeNode>>,
}

/// Persists a model as a versioned JSON document. Tree topology and split
/// values round-trip exactly; training subsample indices are fit-time
/// metadata and are not persisted.
pub fn save_model(model: &ForestModel, path: impl AsRef<Path>) -> Result<()> {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        config: model.config().clone(),
        feature_names: model.feature_names().to_vec(),
        trees: model
            .trees()
            .iter()
            .map(|t| t.nodes().to_vec())
            .collect(),
    };
    let mut writer = BufWriter::new(File::create(path.as_ref())?);
    serde_json::to_writer(&mut writer, &file)
        .map_err(|e| Error::CorruptModel(e.to_string()))?;
    writer.flush()?;
    Ok(())
}

/// Loads and validates a model file written by [`save_model`].
pub fn load_model(path: impl AsRef<Path>) -> Result<ForestModel> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let value: serde_json::Value =
        serde_json::from_reader(reader).map_err(|e| Error::CorruptModel(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::CorruptModel("missing format_version".into()))?;
    if version != u64::from(MODEL_FORMAT_VERSION) {
        return Err(Error::VersionMismatch {
            expected: MODEL_FORMAT_VERSION,
            found: version.try_into().unwrap_or(u32::MAX),
        });
    }
    let file: ModelFile =
        serde_json::from_value(value).map_err(|e| Error::CorruptModel(e.to_string()))?;

    let d = file.feature_names.len();
    let config = &file.config;
    if !config.subsample_size().is_power_of_two()
        || config.max_depth() != config.subsample_size().trailing_zeros() as usize
        || config.tree_count() != file.trees.len()
    {
        return Err(Error::CorruptModel(
            "configuration is inconsistent with the stored trees".into(),
        ));
    }
    let trees: Vec<IsolationTree> = file
        .trees
        .into_iter()
        .enumerate()
        .map(|(t, nodes)| {
            validate_nodes(&nodes, d, config.subsample_size(), config.max_depth())
                .map_err(|detail| Error::CorruptModel(format!("tree {t}: {detail}")))?;
            Ok(IsolationTree::from_nodes(nodes, d))
        })
        .collect::<Result<_>>()?;

    let table = ExpectedDepthTable::up_to(config.subsample_size());
    Ok(ForestModel::from_parts(
        file.config,
        file.feature_names,
        trees,
        table,
    ))
}

/// Structural checks on a flat node array: in-bounds index-linked children
/// appearing after their parent, conserved occupancies, and depths within
/// the cap.
fn validate_nodes(
    nodes: &[TreeNode],
    n_features: usize,
    subsample_size: usize,
    max_depth: usize,
) -> std::result::Result<(), String> {
    if nodes.is_empty() {
        return Err("empty node array".into());
    }
    if nodes[0].size() != subsample_size {
        return Err(format!(
            "root holds {} points, expected the subsample size {subsample_size}",
            nodes[0].size()
        ));
    }
    let mut depths = vec![usize::MAX; nodes.len()];
    depths[0] = 0;
    for (i, node) in nodes.iter().enumerate() {
        let depth = depths[i];
        if depth == usize::MAX {
            return Err(format!("node {i} is unreachable from the root"));
        }
        match node {
            TreeNode::Leaf { size, depth: d } => {
                if *size == 0 {
                    return Err(format!("leaf {i} is empty"));
                }
                if *d as usize != depth {
                    return Err(format!("leaf {i} records depth {d}, reachable at {depth}"));
                }
                if depth > max_depth {
                    return Err(format!("leaf {i} lies below the depth cap"));
                }
            }
            TreeNode::Internal {
                feature,
                left,
                right,
                size,
                ..
            } => {
                if *feature as usize >= n_features {
                    return Err(format!("node {i} splits unknown feature {feature}"));
                }
                if depth >= max_depth {
                    return Err(format!("internal node {i} sits at the depth cap"));
                }
                let (l, r) = (*left as usize, *right as usize);
                if l <= i || r <= i || l >= nodes.len() || r >= nodes.len() || l == r {
                    return Err(format!("node {i} has invalid child links"));
                }
                if nodes[l].size() + nodes[r].size() != *size as usize {
                    return Err(format!("node {i} does not conserve occupancy"));
                }
                if depths[l] != usize::MAX || depths[r] != usize::MAX {
                    return Err(format!("children of node {i} are shared"));
                }
                depths[l] = depth + 1;
                depths[r] = depth + 1;
            }
        }
    }
    Ok(())
}
