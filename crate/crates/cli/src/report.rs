use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::{json, Value};
use xfsl_core::metrics::EvalReport;

use crate::args::ReportArgs;
use crate::commands::{require_dir, EVAL_REPORT, RUN_CONFIG};
use crate::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    FewShot,
    Active,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::FewShot => "fewshot",
            Kind::Active => "active",
        }
    }
}

#[derive(Debug)]
struct Row {
    run: String,
    kind: Kind,
    variant: String,
    seed: u64,
    accuracy: f64,
    macro_auc: f64,
    iou: f64,
}

struct Group {
    kind: Kind,
    variant: String,
    rows: Vec<usize>,
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn read_report(path: &Path) -> CliResult<EvalReport> {
    serde_json::from_value(read_json(path)?).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn field<'a>(v: &'a Value, pointer: &str, dir: &Path) -> CliResult<&'a Value> {
    v.pointer(pointer)
        .ok_or_else(|| CliError::Validation(format!("{}/{RUN_CONFIG} lacks {pointer}", dir.display())))
}

fn variant_label(kind: Kind, echo: &Value, dir: &Path) -> CliResult<String> {
    Ok(match kind {
        Kind::FewShot => {
            let mode = field(echo, "/train/mode", dir)?.as_str().unwrap_or_default().to_string();
            let alpha = field(echo, "/train/alpha", dir)?.as_f64().unwrap_or_default();
            if mode == "baseline" {
                mode
            } else {
                format!("{mode} (alpha={alpha})")
            }
        }
        Kind::Active => {
            let strategy = field(echo, "/al/strategy", dir)?.as_str().unwrap_or_default().to_string();
            let lambda = field(echo, "/al/lambda", dir)?.as_f64().unwrap_or_default();
            match strategy.as_str() {
                "xgal" => format!("xgal (lambda={lambda})"),
                _ => strategy,
            }
        }
    })
}

fn load_row(dir: &Path) -> CliResult<Row> {
    let dir = require_dir(dir)?;
    let echo = read_json(&dir.join(RUN_CONFIG))?;
    let subcommand = field(&echo, "/subcommand", &dir)?.as_str().unwrap_or_default();
    let (kind, report, seed) = match subcommand {
        "eval" => (
            Kind::FewShot,
            read_report(&dir.join(EVAL_REPORT))?,
            field(&echo, "/train/seed", &dir)?.as_u64().unwrap_or_default(),
        ),
        "active" => {
            let rounds = field(&echo, "/al/rounds", &dir)?.as_u64().unwrap_or_default();
            (
                Kind::Active,
                read_report(&dir.join(format!("round_{rounds}.json")))?,
                field(&echo, "/al/seed", &dir)?.as_u64().unwrap_or_default(),
            )
        }
        other => {
            return Err(CliError::Validation(format!(
                "{}: cannot report on a `{other}` run; pass eval or active run directories",
                dir.display()
            )))
        }
    };
    Ok(Row {
        run: dir.display().to_string(),
        kind,
        variant: variant_label(kind, &echo, &dir)?,
        seed,
        accuracy: report.accuracy,
        macro_auc: report.macro_auc,
        iou: report.iou,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn group_rows(rows: &[Row]) -> Vec<Group> {
    let mut groups: Vec<Group> = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        match groups.iter_mut().find(|g| g.kind == r.kind && g.variant == r.variant) {
            Some(g) => g.rows.push(i),
            None => groups.push(Group {
                kind: r.kind,
                variant: r.variant.clone(),
                rows: vec![i],
            }),
        }
    }
    groups
}

fn text_table(title: &str, groups: &[&Group], rows: &[Row]) -> String {
    let mut out = format!("{title}\n");
    let _ = writeln!(
        out,
        "{:<28} {:>5} {:>16} {:>10} {:>14}",
        "variant", "runs", "accuracy (%)", "macro AUC", "IoU"
    );
    for g in groups {
        let col = |f: fn(&Row) -> f64| mean_std(&g.rows.iter().map(|&i| f(&rows[i])).collect::<Vec<_>>());
        let (acc, acc_sd) = col(|r| r.accuracy);
        let (auc, _) = col(|r| r.macro_auc);
        let (iou, iou_sd) = col(|r| r.iou);
        let _ = writeln!(
            out,
            "{:<28} {:>5} {:>9.2} ± {:<4.2} {:>10.4} {:>7.4} ± {:.3}",
            g.variant,
            g.rows.len(),
            100.0 * acc,
            100.0 * acc_sd,
            auc,
            iou,
            iou_sd
        );
    }
    out
}

pub fn report(args: ReportArgs, _seed: Option<u64>) -> CliResult<Value> {
    let rows: Vec<Row> = args.runs.iter().map(|d| load_row(d)).collect::<CliResult<_>>()?;
    let groups = group_rows(&rows);

    fs::create_dir_all(&args.out).map_err(|e| CliError::Validation(format!("{}: {e}", args.out.display())))?;
    xfsl_core::trainer::write_json(
        &args.out.join(RUN_CONFIG),
        &json!({
            "subcommand": "report",
            "runs": args.runs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "out": args.out.display().to_string(),
        }),
    )?;

    let mut runs_csv = String::from("run,kind,variant,seed,accuracy,macro_auc,iou\n");
    for r in &rows {
        let _ = writeln!(
            runs_csv,
            "{},{},\"{}\",{},{},{},{}",
            r.run,
            r.kind.name(),
            r.variant,
            r.seed,
            r.accuracy,
            r.macro_auc,
            r.iou
        );
    }
    let mut summary_csv = String::from("kind,variant,runs,accuracy_mean,accuracy_std,macro_auc_mean,iou_mean,iou_std\n");
    for g in &groups {
        let col = |f: fn(&Row) -> f64| mean_std(&g.rows.iter().map(|&i| f(&rows[i])).collect::<Vec<_>>());
        let (acc, acc_sd) = col(|r| r.accuracy);
        let (auc, _) = col(|r| r.macro_auc);
        let (iou, iou_sd) = col(|r| r.iou);
        let _ = writeln!(
            summary_csv,
            "{},\"{}\",{},{acc},{acc_sd},{auc},{iou},{iou_sd}",
            g.kind.name(),
            g.variant,
            g.rows.len()
        );
    }

    let mut text = String::new();
    for (kind, title) in [
        (Kind::FewShot, "Guided vs baseline"),
        (Kind::Active, "Acquisition strategies (final round)"),
    ] {
        let of_kind: Vec<&Group> = groups.iter().filter(|g| g.kind == kind).collect();
        if !of_kind.is_empty() {
            if !text.is_empty() {
                text.push('\n');
            }
            text.push_str(&text_table(title, &of_kind, &rows));
        }
    }
    for (name, body) in [("runs.csv", &runs_csv), ("report.csv", &summary_csv), ("report.txt", &text)] {
        let path = args.out.join(name);
        fs::write(&path, body).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    }
    eprint!("{text}");
    Ok(json!({
        "command": "report",
        "out": args.out.display().to_string(),
        "runs": rows.len(),
        "variants": groups.len(),
    }))
}
