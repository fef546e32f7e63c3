//! `report`: per-component CSV tables and a G-vs-step SVG per trace.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use polab::objectives::ObjectiveId;
use polab::probe::{AlignmentRecord, TRACE_SCHEMA_VERSION};

use crate::error::{CliError, Result};
use crate::io::{create_dir, read_jsonl, write_bytes};

pub fn read_trace(path: &Path) -> Result<Vec<AlignmentRecord>> {
    let records: Vec<AlignmentRecord> = read_jsonl(path)?;
    if records.is_empty() {
        return Err(CliError::Usage(format!("{}: no records", path.display())));
    }
    if let Some(r) = records.iter().find(|r| r.schema != TRACE_SCHEMA_VERSION) {
        return Err(CliError::Usage(format!(
            "{}: trace schema {} is not supported (expected {TRACE_SCHEMA_VERSION})",
            path.display(),
            r.schema
        )));
    }
    Ok(records)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV per component. The TOT table also carries the POS+NEG and
/// TOP+MID+BOT sums for the same step when those components were probed.
pub fn component_csvs(records: &[AlignmentRecord]) -> Result<BTreeMap<ObjectiveId, Vec<u8>>> {
    let mut by_id: BTreeMap<ObjectiveId, Vec<&AlignmentRecord>> = BTreeMap::new();
    for r in records {
        by_id.entry(r.objective_id).or_default().push(r);
    }
    let lookup = |id: ObjectiveId, step: u64| {
        by_id.get(&id).and_then(|v| v.iter().find(|r| r.step == step)).map(|r| r.g_value)
    };
    let groups: Vec<String> = records.first().map(|r| r.g_groups.keys().cloned().collect()).unwrap_or_default();

    let mut out = BTreeMap::new();
    for (id, rows) in &by_id {
        let tot = *id == ObjectiveId::Tot;
        let mut header: Vec<String> = [
            "step",
            "g_value",
            "cosine",
            "obj_grad_norm",
            "target_grad_norm",
            "n_batches_used",
            "n_batches_filtered",
            "g_precond",
            "loss_increased",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(groups.iter().map(|g| format!("g_{g}")));
        if tot {
            header.extend(["g_pos_plus_neg".to_string(), "g_top_mid_bot".to_string()]);
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&header).map_err(csv_err)?;
        for r in rows {
            let mut row = vec![
                r.step.to_string(),
                r.g_value.to_string(),
                r.cosine().to_string(),
                r.obj_grad_norm.to_string(),
                r.target_grad_norm.to_string(),
                r.n_batches_used.to_string(),
                r.n_batches_filtered.to_string(),
                opt(r.g_precond),
                opt(r.loss_increased),
            ];
            row.extend(groups.iter().map(|g| opt(r.g_groups.get(g))));
            if tot {
                let pn = lookup(ObjectiveId::Pos, r.step).zip(lookup(ObjectiveId::Neg, r.step)).map(|(a, b)| a + b);
                let tmb = match (
                    lookup(ObjectiveId::Top, r.step),
                    lookup(ObjectiveId::Mid, r.step),
                    lookup(ObjectiveId::Bot, r.step),
                ) {
                    (Some(a), Some(b), Some(c)) => Some(a + b + c),
                    _ => None,
                };
                row.extend([opt(pn), opt(tmb)]);
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        out.insert(*id, w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?);
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Usage(format!("writing csv: {e}"))
}

/// Symmetric log transform: linear inside `|y| < 1`, logarithmic outside.
pub fn symlog(y: f64) -> f64 {
    if y.abs() < 1.0 {
        y
    } else {
        y.signum() * (1.0 + y.abs().log10())
    }
}

fn color(id: ObjectiveId) -> &'static str {
    match id {
        ObjectiveId::Tot => "#000000",
        ObjectiveId::Pos => "#1f77b4",
        ObjectiveId::Neg => "#d62728",
        ObjectiveId::Top => "#2ca02c",
        ObjectiveId::Mid => "#ff7f0e",
        ObjectiveId::Bot => "#9467bd",
    }
}

/// Line plot of G against step for every component, symmetric-log y axis.
pub fn alignment_svg(records: &[AlignmentRecord], title: &str) -> String {
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (70.0, 110.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);

    let mut series: BTreeMap<ObjectiveId, Vec<(u64, f64)>> = BTreeMap::new();
    for r in records {
        series.entry(r.objective_id).or_default().push((r.step, r.g_value));
    }
    for s in series.values_mut() {
        s.sort_by_key(|p| p.0);
    }
    let max_step = records.iter().map(|r| r.step).max().unwrap_or(0).max(1) as f64;
    let min_step = records.iter().map(|r| r.step).min().unwrap_or(0) as f64;
    let span_x = (max_step - min_step).max(1.0);
    let ymax = records.iter().map(|r| symlog(r.g_value).abs()).fold(1.0, f64::max).ceil();
    let x = |s: f64| left + (s - min_step) / span_x * pw;
    let y = |v: f64| top + (ymax - symlog(v)) / (2.0 * ymax) * ph;

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(svg, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##);

    // Ticks at 0 and +-10^k up to the axis limit.
    let mut ticks = vec![0.0];
    let mut k = 0;
    while (k as f64) + 1.0 <= ymax {
        let v = 10f64.powi(k);
        ticks.push(v);
        ticks.push(-v);
        k += 1;
    }
    ticks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for t in ticks {
        let ty = y(t);
        let label = if t == 0.0 { "0".to_string() } else { format!("{}{}", if t < 0.0 { "-" } else { "" }, tick_label(t.abs())) };
        let _ = writeln!(svg, r##"<line x1="{left}" x2="{}" y1="{ty:.2}" y2="{ty:.2}" stroke="#ddd"/>"##, left + pw);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{label}</text>"#, left - 6.0, ty + 4.0);
    }
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let step = (min_step + frac * span_x).round();
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{step}</text>"#, x(step), top + ph + 16.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">step</text>"#, left + pw / 2.0, h - 12.0);
    let _ = writeln!(svg, r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">G (symlog)</text>"#, top + ph / 2.0, top + ph / 2.0);

    for (n, (id, pts)) in series.iter().enumerate() {
        let path: Vec<String> = pts.iter().map(|(s, v)| format!("{:.2},{:.2}", x(*s as f64), y(*v))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{}" stroke-width="1.6" points="{}"/>"#, color(*id), path.join(" "));
        let ly = top + 14.0 + 18.0 * n as f64;
        let _ = writeln!(svg, r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{}" stroke-width="2"/>"#, left + pw + 12.0, left + pw + 32.0, color(*id));
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#, left + pw + 38.0, ly + 4.0, id.as_str());
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick_label(v: f64) -> String {
    if v < 1e4 {
        format!("{v}")
    } else {
        format!("1e{}", v.log10().round() as i32)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn label_for(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trace".into())
}

pub fn cmd_report(traces: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if traces.is_empty() {
        return Err(CliError::Usage("no trace files given".into()));
    }
    // Validate everything before writing anything.
    let loaded = traces.iter().map(|t| Ok((t, read_trace(t)?))).collect::<Result<Vec<_>>>()?;
    create_dir(out_dir)?;
    let multi = loaded.len() > 1;
    let mut written = Vec::new();
    for (path, records) in loaded {
        let label = label_for(path);
        let prefix = if multi { format!("{label}_") } else { String::new() };
        for (id, csv) in component_csvs(&records)? {
            let p = out_dir.join(format!("{prefix}{}.csv", id.as_str()));
            write_bytes(&p, &csv)?;
            written.push(p);
        }
        let p = out_dir.join(format!("{prefix}alignment.svg"));
        write_bytes(&p, alignment_svg(&records, &format!("Gradient alignment: {label}")).as_bytes())?;
        written.push(p);
    }
    println!("wrote {} report files to {}", written.len(), out_dir.display());
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64, id: ObjectiveId, g: f64) -> AlignmentRecord {
        AlignmentRecord {
            schema: TRACE_SCHEMA_VERSION,
            step,
            objective_id: id,
            g_value: g,
            n_batches_used: 3,
            n_batches_filtered: 0,
            obj_grad_norm: 2.0,
            target_grad_norm: 4.0,
            g_groups: BTreeMap::new(),
            g_precond: None,
            loss_increased: None,
        }
    }

    #[test]
    fn symlog_is_linear_inside_unit_band() {
        assert_eq!(symlog(0.5), 0.5);
        assert_eq!(symlog(-0.25), -0.25);
        assert_eq!(symlog(1000.0), 4.0);
        assert_eq!(symlog(-1000.0), -4.0);
        assert_eq!(symlog(1.0), 1.0);
    }

    #[test]
    fn csv_per_component_with_decomposition_column() {
        let records = vec![
            rec(0, ObjectiveId::Tot, 1.5),
            rec(0, ObjectiveId::Pos, 2.0),
            rec(0, ObjectiveId::Neg, -0.5),
        ];
        let csvs = component_csvs(&records).unwrap();
        assert_eq!(csvs.len(), 3);
        let tot = std::str::from_utf8(&csvs[&ObjectiveId::Tot]).unwrap();
        let row: Vec<&str> = tot.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[0], "0");
        assert_eq!(row[1], "1.5");
        assert_eq!(row[row.len() - 2], "1.5");
        assert_eq!(row[row.len() - 1], "");
    }

    #[test]
    fn svg_axis_spans_large_values() {
        let records = vec![rec(0, ObjectiveId::Tot, 1e3), rec(10, ObjectiveId::Tot, -1e3)];
        let svg = alignment_svg(&records, "t");
        assert!(svg.contains(">1000<") && svg.contains(">-1000<") && svg.contains(">0<"));
        assert_eq!(svg, alignment_svg(&records, "t"));
    }
}
