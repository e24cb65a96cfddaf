//! Charts and tables from a `results.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cetsim_core::{ModeVariant, Scenario};
use thiserror::Error;

use crate::runner::HEADER;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl PlotError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PlotError::Schema { .. } => 2,
            PlotError::Io { .. } => 1,
        }
    }
}

/// The columns plotting needs from one results row.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub variant: ModeVariant,
    pub scenario: Scenario,
    pub snr_db: f64,
    pub accuracy: f64,
    pub inference_ms: f64,
    pub flops_g: f64,
    pub memory_mb: f64,
}

pub fn read_results(path: &Path) -> Result<Vec<Sample>, PlotError> {
    let origin = path.display().to_string();
    let schema = |message: String| PlotError::Schema {
        path: origin.clone(),
        message,
    };
    let mut rd = csv::Reader::from_path(path).map_err(|e| PlotError::Io {
        path: origin.clone(),
        message: e.to_string(),
    })?;
    let header = rd.headers().map_err(|e| schema(e.to_string()))?.clone();
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(schema(format!(
            "header mismatch: expected `{}`, found `{}`",
            HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let col = |name: &str| HEADER.iter().position(|h| *h == name).expect("known column");
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| schema(format!("line {line}: {e}")))?;
        let text = |name: &str| rec.get(col(name)).unwrap_or_default();
        let num = |name: &str| -> Result<f64, PlotError> {
            let v: f64 = text(name)
                .parse()
                .map_err(|_| schema(format!("line {line}: `{name}` is not a number: `{}`", text(name))))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(schema(format!("line {line}: `{name}` is not finite")))
            }
        };
        let variant: ModeVariant = text("variant")
            .parse()
            .map_err(|e| schema(format!("line {line}: {e}")))?;
        if text("mode") != variant.mode().to_string() {
            return Err(schema(format!("line {line}: mode does not match variant {variant}")));
        }
        out.push(Sample {
            variant,
            scenario: text("scenario")
                .parse()
                .map_err(|e| schema(format!("line {line}: {e}")))?,
            snr_db: num("snr_db")?,
            accuracy: num("accuracy")?,
            inference_ms: num("inference_ms")?,
            flops_g: num("flops_g")?,
            memory_mb: num("memory_mb")?,
        });
    }
    Ok(out)
}

/// C-style `%.2e`: three significant figures, signed two-digit exponent.
pub fn sci3(x: f64) -> String {
    let s = format!("{x:.2e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, x: f64) {
        self.sum += x;
        self.n += 1;
    }

    fn get(&self) -> f64 {
        self.sum / self.n as f64
    }
}

/// `variant,mode,flops_g,memory_mb,inference_ms`, lowest communication load
/// first.
pub fn complexity_table(samples: &[Sample]) -> String {
    let mut acc: BTreeMap<ModeVariant, [Mean; 3]> = BTreeMap::new();
    for s in samples {
        let e = acc.entry(s.variant).or_default();
        e[0].add(s.flops_g);
        e[1].add(s.memory_mb);
        e[2].add(s.inference_ms);
    }
    let mut order: Vec<ModeVariant> = acc.keys().copied().collect();
    order.sort_by_key(|v| (v.communication_load_rank(), *v));
    let mut out = String::from("variant,mode,flops_g,memory_mb,inference_ms\n");
    for v in order {
        let m = &acc[&v];
        let _ = writeln!(
            out,
            "{v},{},{},{},{}",
            v.mode(),
            sci3(m[0].get()),
            sci3(m[1].get()),
            sci3(m[2].get())
        );
    }
    out
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;

fn colour(v: ModeVariant) -> &'static str {
    match v {
        ModeVariant::Gfm => "#1b1b1b",
        ModeVariant::CrmPic => "#1f77b4",
        ModeVariant::CrmPim => "#2ca02c",
        ModeVariant::CrmPcm => "#17becf",
        ModeVariant::PimPi => "#d62728",
        ModeVariant::PimPc => "#ff7f0e",
        ModeVariant::PimPm => "#9467bd",
    }
}

fn dash(v: ModeVariant) -> &'static str {
    match v.communication_load_rank() {
        3 => "",
        2 => " stroke-dasharray=\"6 3\"",
        _ => " stroke-dasharray=\"2 3\"",
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Mean accuracy against SNR, one series per variant in canonical order.
pub fn accuracy_svg(scenario: Scenario, samples: &[Sample]) -> String {
    let mut series: BTreeMap<ModeVariant, Vec<(f64, Mean)>> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.scenario == scenario) {
        let pts = series.entry(s.variant).or_default();
        match pts.iter_mut().find(|(x, _)| *x == s.snr_db) {
            Some((_, m)) => m.add(s.accuracy),
            None => {
                let mut m = Mean::default();
                m.add(s.accuracy);
                pts.push((s.snr_db, m));
            }
        }
    }
    for pts in series.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let xs = series.values().flatten().map(|(x, _)| *x);
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-9 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
    let py = |y: f64| TOP + (1.0 - y.clamp(0.0, 1.0)) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(s, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">Beam prediction accuracy vs SNR ({scenario})</text>",
        LEFT + plot_w / 2.0
    );
    s.push_str("<g class=\"axes\" stroke=\"#999\" stroke-width=\"0.5\">\n");
    for i in 0..=10 {
        let y = i as f64 / 10.0;
        let _ = writeln!(s, "<line x1=\"{LEFT:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\"/>", py(y), LEFT + plot_w, py(y));
    }
    let ticks: Vec<f64> = {
        let mut t: Vec<f64> = series.values().flatten().map(|(x, _)| *x).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    };
    for x in &ticks {
        let _ = writeln!(s, "<line x1=\"{:.2}\" y1=\"{TOP:.2}\" x2=\"{:.2}\" y2=\"{:.2}\"/>", px(*x), px(*x), TOP + plot_h);
    }
    s.push_str("</g>\n<g class=\"labels\">\n");
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{y:.1}</text>", LEFT - 6.0, py(y) + 4.0);
    }
    for x in &ticks {
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{x}</text>", px(*x), TOP + plot_h + 18.0);
    }
    let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">SNR (dB)</text>", LEFT + plot_w / 2.0, HEIGHT - 12.0);
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">Top-1 accuracy</text>",
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    s.push_str("</g>\n");

    for (i, (v, pts)) in series.iter().enumerate() {
        let name = escape(&v.to_string());
        let c = colour(*v);
        let _ = writeln!(s, "<g class=\"series\" data-variant=\"{name}\">");
        let points: Vec<String> = pts.iter().map(|(x, m)| format!("{:.2},{:.2}", px(*x), py(m.get()))).collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\"{} points=\"{}\"/>",
            dash(*v),
            points.join(" ")
        );
        for (x, m) in pts {
            let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{c}\"/>", px(*x), py(m.get()));
        }
        let ly = TOP + 10.0 + i as f64 * 20.0;
        let lx = LEFT + plot_w + 16.0;
        let _ = writeln!(s, "<line x1=\"{lx:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{c}\" stroke-width=\"2\"{}/>", lx + 24.0, dash(*v));
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\">{name}</text>", lx + 30.0, ly + 4.0);
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

pub fn svg_name(scenario: Scenario) -> String {
    format!("accuracy_vs_snr_{}.svg", scenario.to_string().to_lowercase())
}

/// Writes one chart per scenario present plus the complexity table.
pub fn plot(input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, PlotError> {
    let samples = read_results(input)?;
    if samples.is_empty() {
        return Err(PlotError::Schema {
            path: input.display().to_string(),
            message: "no result rows".into(),
        });
    }
    let io = |p: &Path, e: std::io::Error| PlotError::Io {
        path: p.display().to_string(),
        message: e.to_string(),
    };
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let mut written = Vec::new();
    for scenario in Scenario::ALL {
        if samples.iter().any(|s| s.scenario == scenario) {
            let p = out_dir.join(svg_name(scenario));
            std::fs::write(&p, accuracy_svg(scenario, &samples)).map_err(|e| io(&p, e))?;
            written.push(p);
        }
    }
    let p = out_dir.join("complexity_table.csv");
    std::fs::write(&p, complexity_table(&samples)).map_err(|e| io(&p, e))?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(v: ModeVariant, snr: f64, acc: f64) -> Sample {
        Sample {
            variant: v,
            scenario: Scenario::Daytime,
            snr_db: snr,
            accuracy: acc,
            inference_ms: 38.2,
            flops_g: 12.6,
            memory_mb: 107.0,
        }
    }

    #[test]
    fn sci3_matches_printf() {
        assert_eq!(sci3(38.2), "3.82e+01");
        assert_eq!(sci3(107.0), "1.07e+02");
        assert_eq!(sci3(5.51), "5.51e+00");
        assert_eq!(sci3(0.0123), "1.23e-02");
        assert_eq!(sci3(0.0), "0.00e+00");
    }

    #[test]
    fn series_count_and_determinism() {
        let data: Vec<Sample> = ModeVariant::ALL
            .iter()
            .flat_map(|v| [sample(*v, 0.0, 0.2), sample(*v, 25.0, 0.7)])
            .collect();
        let a = accuracy_svg(Scenario::Daytime, &data);
        assert_eq!(a.matches("class=\"series\"").count(), 7);
        assert_eq!(a, accuracy_svg(Scenario::Daytime, &data));
        let one = accuracy_svg(Scenario::Daytime, &data[..2]);
        assert_eq!(one.matches("class=\"series\"").count(), 1);
    }

    #[test]
    fn table_order_follows_load() {
        let data = vec![sample(ModeVariant::Gfm, 0.0, 0.5), sample(ModeVariant::PimPm, 0.0, 0.5)];
        let t = complexity_table(&data);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[1].starts_with("PIM(P+M)"));
        assert_eq!(lines[2], "GFM,GFM,1.26e+01,1.07e+02,3.82e+01");
    }
}
