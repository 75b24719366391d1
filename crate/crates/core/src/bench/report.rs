use std::fmt::Write as _;
use std::io::Write;

use crate::error::Result;

use super::{BenchmarkSummary, PrCurve};

/// Per-volume rows `volume,threshold,tp,fp,fn,precision,recall,f`, then the
/// aggregate rows under volume `all` and one `summary` row.
pub fn write_benchmark_csv(
    mut w: impl Write,
    names: &[String],
    curves: &[PrCurve],
    summary: &BenchmarkSummary,
) -> Result<()> {
    writeln!(w, "volume,threshold,tp,fp,fn,precision,recall,f")?;
    let rows = names
        .iter()
        .map(String::as_str)
        .zip(curves)
        .chain(std::iter::once(("all", &summary.aggregate)));
    for (name, c) in rows {
        for (t, k) in c.thresholds.iter().zip(&c.counts) {
            writeln!(
                w,
                "{name},{t:.2},{},{},{},{:.6},{:.6},{:.6}",
                k.tp,
                k.fp,
                k.fn_,
                k.precision(),
                k.recall(),
                k.f_measure()
            )?;
        }
    }
    writeln!(w, "# ods,ods_threshold,ois,ap")?;
    writeln!(
        w,
        "summary,{:.6},{:.2},{:.6},{:.6}",
        summary.ods, summary.ods_threshold, summary.ois, summary.ap
    )?;
    Ok(())
}

/// Aggregate precision–recall curves as a standalone SVG.
pub fn pr_curve_svg(series: &[(String, &BenchmarkSummary)]) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 50.0;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let x = |r: f64| PAD + r * SIZE;
    let y = |p: f64| PAD + (1.0 - p) * SIZE;
    let mut s = String::new();
    let total = SIZE + 2.0 * PAD;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    for i in 0..=10 {
        let v = i as f64 / 10.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            x(v),
            PAD + SIZE + 16.0,
            PAD - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">Recall</text><text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">Precision</text>"#,
        PAD + SIZE / 2.0,
        total - 8.0,
        PAD + SIZE / 2.0,
        PAD + SIZE / 2.0
    );
    for (i, (name, sum)) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        let pts: Vec<String> = sum
            .aggregate
            .recall()
            .iter()
            .zip(sum.aggregate.precision())
            .map(|(&r, p)| format!("{:.2},{:.2}", x(r), y(p)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{name}: ODS {:.3} OIS {:.3} AP {:.3}</text>"#,
            PAD + 10.0,
            PAD + SIZE - 10.0 - 16.0 * (series.len() - 1 - i) as f64,
            sum.ods,
            sum.ois,
            sum.ap
        );
    }
    s.push_str("</svg>\n");
    s
}
