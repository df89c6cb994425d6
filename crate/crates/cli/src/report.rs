//! CSV renderings of an evaluation report.

use uacorrect_core::metrics::TABLE_HEADER;
use uacorrect_core::{Error, EvalReport, Result};

fn to_csv(rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r)
            .map_err(|e| Error::invalid("report", e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid("report", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid("report", e.to_string()))
}

pub fn results_csv(report: &EvalReport, method: &str) -> Result<String> {
    let header = TABLE_HEADER.iter().map(|s| s.to_string()).collect();
    to_csv(&[header, report.table_row(method).to_vec()])
}

pub fn shift_csv(report: &EvalReport, method: &str) -> Result<String> {
    let header = [
        "Method",
        "True2False",
        "True2Unknown",
        "False2True",
        "False2Unknown",
    ]
    .map(String::from)
    .to_vec();
    let s = report.behavior_shift.unwrap_or_default();
    let row = vec![
        method.to_owned(),
        s.true2false.to_string(),
        s.true2unknown.to_string(),
        s.false2true.to_string(),
        s.false2unknown.to_string(),
    ];
    to_csv(&[header, row])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_rows() {
        let mut r = EvalReport::from_counts(1000, 944, 884);
        r.auroc = Some(0.8123);
        let csv = results_csv(&r, "Ours, log-sum").unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "Method,Accuracy,Answer rate,Accuracy*Answer rate,Mean uncertainty score,AUROC"
        );
        assert_eq!(
            lines.next().unwrap(),
            "\"Ours, log-sum\",93.6,94.4,88.4,--,81.2"
        );

        let shift = shift_csv(&r, "m").unwrap();
        assert_eq!(shift.lines().nth(1).unwrap(), "m,0,0,0,0");
    }
}
