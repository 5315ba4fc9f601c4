//! Minimal deterministic SVG bar charts for the importance figures. No
//! styling knobs: the output depends only on the input pairs, so charts are
//! byte-reproducible.

/// Horizontal bar chart over `(label, value)` pairs. Negative values extend
/// left of the zero axis.
pub fn bar_chart(title: &str, pairs: &[(String, f64)]) -> String {
    const ROW_H: f64 = 22.0;
    const LABEL_W: f64 = 140.0;
    const PLOT_W: f64 = 420.0;
    const TOP: f64 = 36.0;
    let height = TOP + ROW_H * pairs.len() as f64 + 16.0;
    let width = LABEL_W + PLOT_W + 80.0;

    let max_abs = pairs
        .iter()
        .map(|(_, v)| v.abs())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let has_negative = pairs.iter().any(|(_, v)| *v < 0.0);
    let zero_x = if has_negative { LABEL_W + PLOT_W / 2.0 } else { LABEL_W };
    let unit = if has_negative { PLOT_W / 2.0 } else { PLOT_W };

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\">\n"
    ));
    out.push_str(&format!(
        "  <text x=\"8\" y=\"20\" font-family=\"monospace\" font-size=\"14\">{}</text>\n",
        escape(title)
    ));
    out.push_str(&format!(
        "  <line x1=\"{zero_x:.1}\" y1=\"{TOP:.1}\" x2=\"{zero_x:.1}\" y2=\"{:.1}\" \
         stroke=\"#888\" stroke-width=\"1\"/>\n",
        height - 12.0
    ));
    for (i, (label, value)) in pairs.iter().enumerate() {
        let y = TOP + ROW_H * i as f64;
        let bar_len = (value.abs() / max_abs) * unit;
        let x = if *value < 0.0 { zero_x - bar_len } else { zero_x };
        out.push_str(&format!(
            "  <text x=\"8\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"12\">{}</text>\n",
            y + 14.0,
            escape(label)
        ));
        out.push_str(&format!(
            "  <rect x=\"{x:.2}\" y=\"{:.1}\" width=\"{bar_len:.2}\" height=\"14\" \
             fill=\"#4878a8\"/>\n",
            y + 3.0
        ));
        out.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\">{value:.4}</text>\n",
            zero_x + unit + 6.0,
            y + 14.0
        ));
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_deterministic_and_well_formed() {
        let pairs = vec![("alpha".to_string(), 0.4), ("beta".to_string(), -0.2)];
        let a = bar_chart("test", &pairs);
        let b = bar_chart("test", &pairs);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.ends_with("</svg>\n"));
        assert_eq!(a.matches("<rect").count(), 2);
    }
}
