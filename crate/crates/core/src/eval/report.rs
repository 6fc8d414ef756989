use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::taxonomy::Level;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    LanguageUnderstanding,
    LanguageNaming,
}

impl TestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TestKind::LanguageUnderstanding => "language_understanding",
            TestKind::LanguageNaming => "language_naming",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Relevance,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Relevance => "relevance",
        }
    }
}

/// One measurement next to its ground-truth baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub level: Level,
    pub metric: Metric,
    pub value: f64,
    pub baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub test: TestKind,
    pub rows: Vec<ReportRow>,
}

impl TestReport {
    pub fn get(&self, level: Level, metric: Metric) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.level == level && r.metric == metric)
    }

    /// `level,metric,value,baseline` rows, preceded by `# ` comment lines.
    pub fn write_csv<W: Write>(&self, mut writer: W, header: &[String]) -> csv::Result<()> {
        for line in header {
            writeln!(writer, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["level", "metric", "value", "baseline"])?;
        for r in &self.rows {
            w.write_record([r.level.as_str(), r.metric.as_str(), &r.value.to_string(), &r.baseline.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Both cross-modal tests plus everything needed to rerun them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub understanding: TestReport,
    pub naming: TestReport,
    pub metadata: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let report = TestReport {
            test: TestKind::LanguageNaming,
            rows: vec![ReportRow { level: Level::Basic, metric: Metric::Accuracy, value: 0.5, baseline: 1.0 }],
        };
        let mut out = Vec::new();
        report.write_csv(&mut out, &["config {\"a\":1}".to_owned()]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "# config {\"a\":1}\nlevel,metric,value,baseline\nbasic,accuracy,0.5,1\n");
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        assert_eq!(rdr.records().count(), 1);
    }
}
