//! Evaluation reports: per-view rows, aggregates, CSV and text output.

use sparseview_core::metrics::mean_median;

pub const CSV_HEADER: [&str; 6] = ["scene", "view", "psnr_db", "ssim", "lpips", "runtime_ms"];

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub scene: String,
    pub view: usize,
    /// `f64::INFINITY` for a pixel-identical render.
    pub psnr_db: f64,
    pub ssim: f64,
    /// Empty in deterministic mode.
    pub runtime_ms: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Echo of the settings the report was produced with.
    pub config: Vec<(String, String)>,
}

/// Mean and median of one column.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
}

pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "identical".into()
    } else {
        format!("{v:.4}")
    }
}

impl Report {
    /// PSNR aggregates skip identical (infinite) rows.
    pub fn psnr(&self) -> Option<Aggregate> {
        let v: Vec<f64> = self.rows.iter().map(|r| r.psnr_db).collect();
        mean_median(&v).map(|(mean, median)| Aggregate { mean, median })
    }

    pub fn ssim(&self) -> Option<Aggregate> {
        let v: Vec<f64> = self.rows.iter().map(|r| r.ssim).collect();
        mean_median(&v).map(|(mean, median)| Aggregate { mean, median })
    }

    /// Per-view rows followed by `mean` and `median` rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.rows {
            let runtime = r.runtime_ms.map(|t| format!("{t:.1}")).unwrap_or_default();
            w.write_record([r.scene.clone(), r.view.to_string(), format_psnr(r.psnr_db), format!("{:.6}", r.ssim), String::new(), runtime])
                .expect("in-memory write");
        }
        if let (Some(p), Some(s)) = (self.psnr(), self.ssim()) {
            for (name, pv, sv) in [("mean", p.mean, s.mean), ("median", p.median, s.median)] {
                w.write_record([name.to_string(), String::new(), format_psnr(pv), format!("{sv:.6}"), String::new(), String::new()])
                    .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.config {
            out += &format!("# {k} = {v}\n");
        }
        out += &format!("{:<20} {:>5} {:>10} {:>8}\n", "scene", "view", "PSNR(dB)", "SSIM");
        for r in &self.rows {
            out += &format!("{:<20} {:>5} {:>10} {:>8.4}\n", r.scene, r.view, format_psnr(r.psnr_db), r.ssim);
        }
        if let (Some(p), Some(s)) = (self.psnr(), self.ssim()) {
            out += &format!("{:<20} {:>5} {:>10.4} {:>8.4}\n", "mean", "", p.mean, s.mean);
            out += &format!("{:<20} {:>5} {:>10.4} {:>8.4}\n", "median", "", p.median, s.median);
        }
        out
    }
}
