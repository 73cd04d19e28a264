//! CSV writers. Every file starts with a header row; undefined values are
//! empty cells.

use std::fmt::Write as _;

use midlevel_core::datamodel::PersonSample;
use midlevel_core::detectors::ScoreMatrix;
use midlevel_core::embednet::PatchFeatures;
use midlevel_core::metrics::EvalReport;
use midlevel_core::mining::PatternCluster;

/// `iteration,mode,map,accuracy,nmi,purity,ap_<class>...`, one row per report.
pub fn eval_reports(class_names: &[String], reports: &[EvalReport]) -> String {
    let mut out = EvalReport::csv_header(class_names);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// `cluster,category,sample,patch`, one row per member.
pub fn membership(clusters: &[PatternCluster]) -> String {
    let mut out = String::from("cluster,category,sample,patch\n");
    for c in clusters {
        for m in &c.members {
            let _ = writeln!(out, "{},{},{},{}", c.id, c.category, m.sample(), m.local());
        }
    }
    out
}

/// `cluster,sample,patch,score`: every member scored by its own detector.
pub fn cluster_scores(clusters: &[PatternCluster], features: &PatchFeatures, scores: &ScoreMatrix) -> String {
    let mut out = String::from("cluster,sample,patch,score\n");
    for c in clusters {
        let Some(col) = scores.column_of(c.id) else { continue };
        for m in &c.members {
            if let Some(row) = features.index_of(*m) {
                let _ = writeln!(out, "{},{},{},{}", c.id, m.sample(), m.local(), scores.get(row, col));
            }
        }
    }
    out
}

/// `sample,split,f0,f1,...`: one representation row per sample.
pub fn representations(samples: &[&PersonSample], rows: &[Vec<f64>]) -> String {
    let dim = rows.first().map_or(0, Vec::len);
    let mut out = String::from("sample,split");
    for i in 0..dim {
        let _ = write!(out, ",f{i}");
    }
    out.push('\n');
    for (s, row) in samples.iter().zip(rows) {
        let _ = write!(out, "{},{}", s.id, s.split.as_str());
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use midlevel_core::datamodel::{Mode, PatchId};

    #[test]
    fn eval_csv_has_header_and_rows() {
        let r = EvalReport {
            iteration: 2,
            mode: Mode::Action,
            class_ap: vec![Some(0.5), None],
            map: Some(0.5),
            accuracy: Some(0.75),
            cluster_nmi: None,
            cluster_purity: None,
        };
        let text = eval_reports(&["a".into(), "b".into()], &[r]);
        assert_eq!(text, "iteration,mode,map,accuracy,nmi,purity,ap_a,ap_b\n2,action,0.5,0.75,,,0.5,\n");
    }

    #[test]
    fn membership_rows() {
        let c = PatternCluster {
            id: 3,
            category: 1,
            patterns: vec![],
            members: vec![PatchId::new(7, 2), PatchId::new(9, 0)],
        };
        assert_eq!(membership(&[c]), "cluster,category,sample,patch\n3,1,7,2\n3,1,9,0\n");
    }
}
