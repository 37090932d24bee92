//! CSV ingestion and export of datasets, and solver configuration files.
//!
//! `products.csv`: market_id, product_id, share, x_1..x_K, z_1..z_q and an
//! optional market_size column (constant within a market).
//! `draws.csv`: market_id, consumer_id, nu_1..nu_K, d_1..d_R.
//!
//! Markets are ordered by first appearance in the products file; products and
//! consumers keep their file order within a market.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::{DatasetParts, Dimensions, MarketDataset};
use crate::dgp::group_mean_instruments;
use crate::error::{BlpError, Result, SchemaIssue};
use crate::estimators::SolverConfig;

/// Optional group-mean instruments built at load time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestOptions {
    /// Column of products.csv holding group labels.
    pub group_column: Option<String>,
    /// Characteristic columns (x_k names) whose leave-one-out group means are
    /// appended to the instruments.
    pub group_mean_of: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct LoadedData {
    pub dataset: MarketDataset,
    pub market_ids: Vec<String>,
    /// Non-fatal ingestion notes, such as products alone in their group.
    pub warnings: Vec<String>,
}

struct Table {
    file: String,
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let file = path.display().to_string();
        let mut text = String::new();
        File::open(path)?.read_to_string(&mut text)?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if headers.iter().all(|h| h.is_empty()) {
            return Err(BlpError::Schema(vec![issue(&file, None, None, "missing header row")]));
        }
        let mut rows = Vec::new();
        let mut issues = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            match rec {
                Ok(r) => rows.push(r.iter().map(str::to_string).collect()),
                Err(e) => issues.push(issue(&file, Some(i + 1), None, &e.to_string())),
            }
        }
        if !issues.is_empty() {
            return Err(BlpError::Schema(issues));
        }
        Ok(Self { file, headers, rows })
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    /// Indices of `prefix1`, `prefix2`, ... in order; stops at the first gap.
    fn numbered(&self, prefix: &str) -> Vec<usize> {
        (1..)
            .map_while(|k| self.column(&format!("{prefix}{k}")))
            .collect()
    }
}

fn issue(file: &str, row: Option<usize>, column: Option<&str>, message: &str) -> SchemaIssue {
    SchemaIssue {
        file: file.to_string(),
        row,
        column: column.map(str::to_string),
        message: message.to_string(),
    }
}

fn parse_number(t: &Table, row: usize, col: usize, issues: &mut Vec<SchemaIssue>) -> f64 {
    let raw = &t.rows[row][col];
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => v,
        _ => {
            issues.push(issue(&t.file, Some(row + 1), Some(&t.headers[col]), &format!("'{raw}' is not a finite number")));
            f64::NAN
        }
    }
}

pub fn load_dataset(products: &Path, draws: &Path) -> Result<MarketDataset> {
    Ok(load_dataset_with(products, draws, &IngestOptions::default())?.dataset)
}

pub fn load_dataset_with(products: &Path, draws: &Path, options: &IngestOptions) -> Result<LoadedData> {
    let p = Table::read(products)?;
    let d = Table::read(draws)?;
    let mut issues = Vec::new();
    let required = |t: &Table, name: &str, issues: &mut Vec<SchemaIssue>| -> Option<usize> {
        let c = t.column(name);
        if c.is_none() {
            issues.push(issue(&t.file, None, Some(name), "required column is missing"));
        }
        c
    };
    let p_market = required(&p, "market_id", &mut issues);
    let p_product = required(&p, "product_id", &mut issues);
    let p_share = required(&p, "share", &mut issues);
    let d_market = required(&d, "market_id", &mut issues);
    let d_consumer = required(&d, "consumer_id", &mut issues);
    let x_cols = p.numbered("x_");
    let z_cols = p.numbered("z_");
    let nu_cols = d.numbered("nu_");
    let demo_cols = d.numbered("d_");
    let size_col = p.column("market_size");
    if x_cols.is_empty() {
        issues.push(issue(&p.file, None, Some("x_1"), "no characteristic columns x_1..x_K"));
    }
    if z_cols.is_empty() && options.group_mean_of.is_empty() {
        issues.push(issue(&p.file, None, Some("z_1"), "no instrument columns z_1..z_q"));
    }
    if nu_cols.len() != x_cols.len() {
        issues.push(issue(
            &d.file,
            None,
            Some(&format!("nu_{}", nu_cols.len() + 1)),
            &format!("expected {} taste-draw columns to match the characteristics, found {}", x_cols.len(), nu_cols.len()),
        ));
    }
    let group_col = match &options.group_column {
        Some(name) => required(&p, name, &mut issues),
        None => None,
    };
    let mut mean_cols = Vec::new();
    for name in &options.group_mean_of {
        match p.column(name) {
            Some(c) => mean_cols.push(c),
            None => issues.push(issue(&p.file, None, Some(name), "group-mean column is missing")),
        }
    }
    if !mean_cols.is_empty() && group_col.is_none() && options.group_column.is_none() {
        issues.push(issue(&p.file, None, None, "group-mean instruments need a group column"));
    }
    let (Some(p_market), Some(_), Some(p_share), Some(d_market), Some(_)) = (p_market, p_product, p_share, d_market, d_consumer) else {
        return Err(BlpError::Schema(issues));
    };
    if !issues.is_empty() {
        return Err(BlpError::Schema(issues));
    }

    // Group product rows by market in order of first appearance.
    let mut market_ids: Vec<String> = Vec::new();
    let mut market_index: HashMap<String, usize> = HashMap::new();
    let mut product_rows: Vec<Vec<usize>> = Vec::new();
    for (r, row) in p.rows.iter().enumerate() {
        let id = &row[p_market];
        let t = *market_index.entry(id.clone()).or_insert_with(|| {
            market_ids.push(id.clone());
            product_rows.push(Vec::new());
            market_ids.len() - 1
        });
        product_rows[t].push(r);
    }
    let mut draw_rows: Vec<Vec<usize>> = vec![Vec::new(); market_ids.len()];
    for (r, row) in d.rows.iter().enumerate() {
        match market_index.get(&row[d_market]) {
            Some(&t) => draw_rows[t].push(r),
            None => issues.push(issue(&d.file, Some(r + 1), Some("market_id"), &format!("market '{}' has no products", row[d_market]))),
        }
    }
    if market_ids.is_empty() {
        issues.push(issue(&p.file, None, None, "no product rows"));
        return Err(BlpError::Schema(issues));
    }
    let j_count = product_rows[0].len();
    let n_count = draw_rows[0].len();
    for (t, rows) in product_rows.iter().enumerate() {
        if rows.len() != j_count {
            issues.push(issue(&p.file, Some(rows[0] + 1), Some("market_id"), &format!(
                "market '{}' has {} products; every market needs {j_count}", market_ids[t], rows.len()
            )));
        }
        if draw_rows[t].len() != n_count || n_count == 0 {
            issues.push(issue(&d.file, None, Some("market_id"), &format!(
                "market '{}' has {} draws; every market needs the same positive number ({n_count} in the first)",
                market_ids[t],
                draw_rows[t].len()
            )));
        }
    }
    if !issues.is_empty() {
        return Err(BlpError::Schema(issues));
    }

    let (k, r) = (x_cols.len(), demo_cols.len());
    let t_count = market_ids.len();
    let mut x = Vec::with_capacity(t_count * j_count * k);
    let mut z_file = Vec::with_capacity(t_count * j_count * z_cols.len());
    let mut shares = Vec::with_capacity(t_count * j_count);
    let mut sizes = size_col.map(|_| Vec::with_capacity(t_count));
    let mut groups = Vec::new();
    let mut mean_values = Vec::new();
    for (t, rows) in product_rows.iter().enumerate() {
        let mut total = 0.0;
        for &row in rows {
            let s = parse_number(&p, row, p_share, &mut issues);
            if s.is_finite() && !(s > 0.0 && s < 1.0) {
                issues.push(issue(&p.file, Some(row + 1), Some("share"), &format!("share {s} must lie in (0, 1)")));
            }
            total += s;
            shares.push(s);
            for &c in &x_cols {
                x.push(parse_number(&p, row, c, &mut issues));
            }
            for &c in &z_cols {
                z_file.push(parse_number(&p, row, c, &mut issues));
            }
            if let Some(g) = group_col {
                groups.push(p.rows[row][g].clone());
            }
            for &c in &mean_cols {
                mean_values.push(parse_number(&p, row, c, &mut issues));
            }
        }
        if total.is_finite() && !(total < 1.0) {
            issues.push(issue(&p.file, Some(rows[0] + 1), Some("share"), &format!(
                "shares of market '{}' sum to {total}; the outside share must be positive", market_ids[t]
            )));
        }
        if let (Some(c), Some(sz)) = (size_col, sizes.as_mut()) {
            let first = parse_number(&p, rows[0], c, &mut issues);
            for &row in &rows[1..] {
                if p.rows[row][c] != p.rows[rows[0]][c] {
                    issues.push(issue(&p.file, Some(row + 1), Some("market_size"), "market size differs within the market"));
                }
            }
            if first.is_finite() && first <= 0.0 {
                issues.push(issue(&p.file, Some(rows[0] + 1), Some("market_size"), "market size must be positive"));
            }
            sz.push(first);
        }
    }
    let mut nu = Vec::with_capacity(t_count * n_count * k);
    let mut demo = Vec::with_capacity(t_count * n_count * r);
    for rows in &draw_rows {
        for &row in rows {
            for &c in &nu_cols {
                nu.push(parse_number(&d, row, c, &mut issues));
            }
            for &c in &demo_cols {
                demo.push(parse_number(&d, row, c, &mut issues));
            }
        }
    }
    if !issues.is_empty() {
        return Err(BlpError::Schema(issues));
    }

    let mut warnings = Vec::new();
    let mut q = z_cols.len();
    let z = if mean_cols.is_empty() {
        z_file
    } else {
        let means = group_mean_instruments(&mean_values, mean_cols.len(), &groups)?;
        for &o in &means.singletons {
            warnings.push(format!(
                "product row {} is alone in group '{}'; its group-mean instruments are set to 0",
                product_rows[o / j_count][o % j_count] + 1,
                groups[o]
            ));
        }
        let extra = mean_cols.len();
        let mut z = Vec::with_capacity(t_count * j_count * (q + extra));
        for o in 0..t_count * j_count {
            z.extend_from_slice(&z_file[o * q..(o + 1) * q]);
            z.extend(means.values[o * extra..(o + 1) * extra].iter().map(|v| if v.is_nan() { 0.0 } else { *v }));
        }
        q += extra;
        z
    };
    let dims = Dimensions {
        markets: t_count,
        products: j_count,
        characteristics: k,
        instruments: q,
        draws: n_count,
        demographics: r,
    };
    let dataset = MarketDataset::new(
        dims,
        DatasetParts {
            x,
            z,
            shares,
            nu,
            demo,
            market_size: sizes,
        },
    )
    .map_err(|e| match e {
        BlpError::InvalidInput(m) => BlpError::Schema(vec![issue(&p.file, None, None, &m)]),
        other => other,
    })?;
    Ok(LoadedData {
        dataset,
        market_ids,
        warnings,
    })
}

/// Writes the two CSV files. Rust's shortest round-trip float formatting makes
/// save followed by load lossless.
pub fn save_dataset(ds: &MarketDataset, products: &Path, draws: &Path) -> Result<()> {
    let (k, q, r) = (ds.n_chars(), ds.n_instruments(), ds.n_demographics());
    let mut w = csv::Writer::from_path(products)?;
    let mut header = vec!["market_id".to_string(), "product_id".into(), "share".into()];
    header.extend((1..=k).map(|i| format!("x_{i}")));
    header.extend((1..=q).map(|i| format!("z_{i}")));
    if ds.market_size().is_some() {
        header.push("market_size".into());
    }
    w.write_record(&header)?;
    for t in 0..ds.n_markets() {
        let m = ds.market(t);
        for j in 0..ds.n_products() {
            let mut rec = vec![t.to_string(), j.to_string(), m.shares[j].to_string()];
            rec.extend(m.x_row(j).iter().map(f64::to_string));
            rec.extend(m.z_row(j).iter().map(f64::to_string));
            if let Some(sizes) = ds.market_size() {
                rec.push(sizes[t].to_string());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(draws)?;
    let mut header = vec!["market_id".to_string(), "consumer_id".into()];
    header.extend((1..=k).map(|i| format!("nu_{i}")));
    header.extend((1..=r).map(|i| format!("d_{i}")));
    w.write_record(&header)?;
    for t in 0..ds.n_markets() {
        let m = ds.market(t);
        for i in 0..ds.n_draws() {
            let mut rec = vec![t.to_string(), i.to_string()];
            rec.extend(m.nu_row(i).iter().map(f64::to_string));
            rec.extend(m.demo_row(i).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Solver settings from a TOML file; absent keys keep their defaults.
pub fn load_config(path: &Path) -> Result<SolverConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<SolverConfig> {
    let cfg: SolverConfig = toml::from_str(text).map_err(|e| BlpError::Config(e.to_string()))?;
    cfg.validate().map_err(|e| BlpError::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn write_text(text: &str, path: &Path) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}
