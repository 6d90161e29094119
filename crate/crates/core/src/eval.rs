//! Accuracy over domain pairings, the distance-correlation benchmark and
//! result files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::histograms::{argmax, Histogram2d};
use crate::model::TwinRegistrationModel;
use crate::ot::{diffusion_distance, exact_emd2d, pemd, swd_with_directions, ProjectionSet, SwdDirections};
use crate::rng::stream;
use crate::synth::{Datasets, PairSet, Pairing};

/// Softmax at temperature 1, accumulated in double precision.
fn softmax_into(logits: &[f32], out: &mut [f64]) {
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z as f64 - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Predicted classes: argmax of the mean of both heads' softmax outputs.
pub fn predict(model: &TwinRegistrationModel, set: &PairSet) -> Result<Vec<usize>> {
    let classes = model.arch().classes();
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    let (mut p1, mut p2) = (vec![0.0; classes], vec![0.0; classes]);
    for chunk in idx.chunks(128) {
        let batch = set.batch(chunk);
        let (l1, l2) = model.logits_both(&batch.fixed, &batch.moving)?;
        for i in 0..chunk.len() {
            softmax_into(&l1.data()[i * classes..(i + 1) * classes], &mut p1);
            softmax_into(&l2.data()[i * classes..(i + 1) * classes], &mut p2);
            let mean: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| 0.5 * (a + b)).collect();
            out.push(argmax(&mean));
        }
    }
    Ok(out)
}

pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::invalid(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Fraction of pairs whose predicted class equals the label.
pub fn evaluate_accuracy(model: &TwinRegistrationModel, set: &PairSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let labels: Vec<usize> = set.pairs().iter().map(|p| p.label as usize).collect();
    accuracy_of(&predict(model, set)?, &labels)
}

/// Accuracy of one trained model on the four domain pairings.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    /// In [`Pairing::ALL`] order: AA, BA, AB, BB.
    pub accuracies: [f64; 4],
    pub config_digest: u64,
}

impl EvalReport {
    pub fn accuracy(&self, pairing: Pairing) -> f64 {
        self.accuracies[Pairing::ALL.iter().position(|&p| p == pairing).unwrap()]
    }

    /// Mean over the three pairings that involve domain B.
    pub fn cross_mean(&self) -> f64 {
        Pairing::CROSS.iter().map(|&p| self.accuracy(p)).sum::<f64>() / 3.0
    }
}

/// Evaluate on the test splits of `data` in every pairing.
pub fn evaluate_report(
    model: &TwinRegistrationModel,
    data: &Datasets,
    method: &str,
    seed: u64,
    config_digest: u64,
) -> Result<EvalReport> {
    let mut accuracies = [0.0; 4];
    for (slot, &pairing) in accuracies.iter_mut().zip(Pairing::ALL.iter()) {
        let set = PairSet::pairing(&data.a_test, &data.b_test, pairing)?;
        *slot = evaluate_accuracy(model, &set)?;
    }
    Ok(EvalReport { method: method.to_string(), seed, accuracies, config_digest })
}

pub const RESULTS_HEADER: &str = "method,seed,pairing,accuracy";

fn pairing_rows(out: &mut String, method: &str, seed: &str, acc: &[f64; 4], xmean: f64) {
    for (p, a) in Pairing::ALL.iter().zip(acc) {
        writeln!(out, "{method},{seed},{},{a}", p.name()).unwrap();
    }
    writeln!(out, "{method},{seed},XMEAN,{xmean}").unwrap();
}

/// Reports grouped by method in order of first appearance, seeds ascending.
fn grouped(reports: &[EvalReport]) -> Vec<(&str, Vec<&EvalReport>)> {
    let mut groups: Vec<(&str, Vec<&EvalReport>)> = Vec::new();
    for r in reports {
        match groups.iter_mut().find(|(m, _)| *m == r.method) {
            Some((_, v)) => v.push(r),
            None => groups.push((&r.method, vec![r])),
        }
    }
    for (_, v) in groups.iter_mut() {
        v.sort_by_key(|r| r.seed);
    }
    groups
}

/// CSV text: per report four pairing rows and an XMEAN row; methods with
/// several seeds get the same five rows again with seed `mean`.
pub fn results_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for (method, runs) in grouped(reports) {
        for r in &runs {
            pairing_rows(&mut out, method, &r.seed.to_string(), &r.accuracies, r.cross_mean());
        }
        if runs.len() > 1 {
            let n = runs.len() as f64;
            let mut mean = [0.0; 4];
            for (k, m) in mean.iter_mut().enumerate() {
                *m = runs.iter().map(|r| r.accuracies[k]).sum::<f64>() / n;
            }
            let xmean = runs.iter().map(|r| r.cross_mean()).sum::<f64>() / n;
            pairing_rows(&mut out, method, "mean", &mean, xmean);
        }
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Bar chart of mean cross-domain accuracy per method with one marker per seed.
pub fn results_svg(reports: &[EvalReport]) -> String {
    let groups = grouped(reports);
    let (bar_w, gap, left, top, plot_h) = (60.0, 30.0, 60.0, 40.0, 300.0);
    let width = (left + groups.len() as f64 * (bar_w + gap) + gap).max(320.0);
    let height = top + plot_h + 60.0;
    let y_of = |acc: f64| top + plot_h * (1.0 - acc.clamp(0.0, 1.0));
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect x="0" y="0" width="{width:.0}" height="{height:.0}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{left}" y="20">Mean cross-domain accuracy (BA, AB, BB)</text>"#).unwrap();
    for tick in 0..=5 {
        let acc = tick as f64 * 0.2;
        let y = y_of(acc);
        writeln!(s, r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##, width - gap / 2.0).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.0}%</text>"#, left - 6.0, y + 4.0, acc * 100.0).unwrap();
    }
    for (i, (method, runs)) in groups.iter().enumerate() {
        let x = left + gap + i as f64 * (bar_w + gap);
        let mean = runs.iter().map(|r| r.cross_mean()).sum::<f64>() / runs.len() as f64;
        let y = y_of(mean);
        let name = xml_escape(method);
        writeln!(
            s,
            r##"<rect class="bar" data-method="{name}" x="{x:.1}" y="{y:.1}" width="{bar_w:.1}" height="{:.1}" fill="#4a7fb5"><title>{name}: {:.2}%</title></rect>"##,
            top + plot_h - y,
            mean * 100.0
        )
        .unwrap();
        for (k, r) in runs.iter().enumerate() {
            let cx = x + bar_w * (k as f64 + 1.0) / (runs.len() as f64 + 1.0);
            writeln!(
                s,
                r##"<circle class="seed" data-seed="{}" cx="{cx:.1}" cy="{:.1}" r="3.5" fill="#d9822b"/>"##,
                r.seed,
                y_of(r.cross_mean())
            )
            .unwrap();
        }
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{name}</text>"#, x + bar_w / 2.0, top + plot_h + 18.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Write the CSV and SVG; both are pure functions of `reports`.
pub fn emit_results(reports: &[EvalReport], csv_path: &Path, svg_path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to emit"));
    }
    fs::write(csv_path, results_csv(reports)).map_err(|e| Error::io(csv_path, e))?;
    fs::write(svg_path, results_svg(reports)).map_err(|e| Error::io(svg_path, e))
}

/// Parse rows written by [`results_csv`] back into reports, skipping `mean` rows.
pub fn parse_results_csv(text: &str, path: &Path) -> Result<Vec<EvalReport>> {
    let bad = |line: usize, msg: String| Error::Format { path: path.to_path_buf(), offset: line as u64, message: msg };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == RESULTS_HEADER => {}
        _ => return Err(bad(0, format!("expected header {RESULTS_HEADER:?}"))),
    }
    let mut reports: Vec<EvalReport> = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(ln, format!("expected 4 fields, got {}", f.len())));
        }
        if f[1] == "mean" || f[2] == "XMEAN" {
            continue;
        }
        let seed: u64 = f[1].parse().map_err(|_| bad(ln, format!("bad seed {:?}", f[1])))?;
        let acc: f64 = f[3].parse().map_err(|_| bad(ln, format!("bad accuracy {:?}", f[3])))?;
        let slot = Pairing::ALL
            .iter()
            .position(|p| p.name() == f[2])
            .ok_or_else(|| bad(ln, format!("unknown pairing {:?}", f[2])))?;
        let idx = match reports.iter().position(|r| r.method == f[0] && r.seed == seed) {
            Some(i) => i,
            None => {
                reports.push(EvalReport { method: f[0].to_string(), seed, accuracies: [f64::NAN; 4], config_digest: 0 });
                reports.len() - 1
            }
        };
        reports[idx].accuracies[slot] = acc;
    }
    if let Some(r) = reports.iter().find(|r| r.accuracies.iter().any(|a| a.is_nan())) {
        return Err(bad(0, format!("method {} seed {} lacks some pairings", r.method, r.seed)));
    }
    Ok(reports)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

/// A softened random Gaussian on the `side`×`side` grid: random mean inside
/// the grid, σ in [0.5, 2], mixed with 10% uniform mass.
pub fn sample_bench_histogram(side: usize, rng: &mut ChaCha8Rng) -> Histogram2d {
    let hi = (side - 1) as f64;
    let (mx, my) = (rng.random_range(0.0..=hi), rng.random_range(0.0..=hi));
    let sigma: f64 = rng.random_range(0.5..=2.0);
    let g = Histogram2d::from_fn(side, |x, y| {
        let (dx, dy) = (x as f64 - mx, y as f64 - my);
        (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
    });
    let g = g.normalized().expect("positive Gaussian mass");
    let u = 1.0 / (side * side) as f64;
    Histogram2d::new(side, g.data().iter().map(|&v| 0.9 * v + 0.1 * u).collect()).expect("same size")
}

/// Benchmark pairs drawn from the `bench/pairs` stream of `seed`.
pub fn bench_pairs(n: usize, side: usize, seed: u64) -> Vec<(Histogram2d, Histogram2d)> {
    let mut rng = stream(seed, "bench/pairs");
    (0..n).map(|_| (sample_bench_histogram(side, &mut rng), sample_bench_histogram(side, &mut rng))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMetric {
    Pemd2,
    Pemd16,
    Pemd16HalfTurn,
    SwdProxy,
    Diffusion,
    Exact,
}

impl BenchMetric {
    pub const COMPARED: [BenchMetric; 5] =
        [BenchMetric::Pemd2, BenchMetric::Pemd16, BenchMetric::Pemd16HalfTurn, BenchMetric::SwdProxy, BenchMetric::Diffusion];

    pub fn name(self) -> &'static str {
        match self {
            BenchMetric::Pemd2 => "pemd2",
            BenchMetric::Pemd16 => "pemd16",
            BenchMetric::Pemd16HalfTurn => "pemd16_half_turn",
            BenchMetric::SwdProxy => "swd1",
            BenchMetric::Diffusion => "diffusion",
            BenchMetric::Exact => "exact",
        }
    }
}

/// Slices used by the single-sample SWD proxy.
pub const SWD_PROXY_SLICES: usize = 128;
pub const DIFFUSION_SIGMA: f64 = 0.5;
pub const DIFFUSION_LEVELS: usize = 3;

/// Evaluates every benchmark metric on one pair.
pub struct MetricSuite {
    side: usize,
    p2: ProjectionSet,
    p16: ProjectionSet,
    p16_half: ProjectionSet,
    dirs: SwdDirections,
}

impl MetricSuite {
    pub fn new(side: usize, seed: u64) -> Result<Self> {
        Ok(MetricSuite {
            side,
            p2: ProjectionSet::new(2, side)?,
            p16: ProjectionSet::new(16, side)?,
            p16_half: ProjectionSet::half_turn(16, side)?,
            dirs: SwdDirections::sample(SWD_PROXY_SLICES, side * side, &mut stream(seed, "bench/swd-slices")),
        })
    }

    pub fn value(&self, metric: BenchMetric, p: &Histogram2d, q: &Histogram2d) -> Result<f64> {
        match metric {
            BenchMetric::Pemd2 => pemd(p, q, &self.p2),
            BenchMetric::Pemd16 => pemd(p, q, &self.p16),
            BenchMetric::Pemd16HalfTurn => pemd(p, q, &self.p16_half),
            BenchMetric::SwdProxy => Ok(swd_with_directions(p.data(), q.data(), &self.dirs)),
            BenchMetric::Diffusion => diffusion_distance(p, q, DIFFUSION_SIGMA, DIFFUSION_LEVELS),
            BenchMetric::Exact => Ok(exact_emd2d(p, q)?.cost),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationRow {
    pub metric: &'static str,
    /// `None` when the metric is constant over all pairs.
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub mean_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct CorrelationTable {
    pub rows: Vec<CorrelationRow>,
    /// Per metric in [`BenchMetric::COMPARED`] order, then the exact values.
    pub values: Vec<Vec<f64>>,
}

impl CorrelationTable {
    pub fn row(&self, metric: &str) -> Option<&CorrelationRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn exact(&self) -> &[f64] {
        self.values.last().unwrap()
    }

    /// Table as CSV; `with_times` adds the (non-deterministic) timing column.
    pub fn to_csv(&self, with_times: bool) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "undefined".into());
        let mut s = String::from(if with_times { "metric,pearson,spearman,mean_us\n" } else { "metric,pearson,spearman\n" });
        for r in &self.rows {
            if with_times {
                writeln!(s, "{},{},{},{:.3}", r.metric, fmt(r.pearson), fmt(r.spearman), r.mean_seconds * 1e6).unwrap();
            } else {
                writeln!(s, "{},{},{}", r.metric, fmt(r.pearson), fmt(r.spearman)).unwrap();
            }
        }
        s
    }
}

/// Correlate every compared metric with the exact 2D EMD over `n_pairs` pairs.
pub fn correlation_bench(n_pairs: usize, seed: u64) -> Result<CorrelationTable> {
    if n_pairs < 100 {
        return Err(Error::invalid(format!("correlation benchmark needs at least 100 pairs, got {n_pairs}")));
    }
    let side = 5;
    let pairs = bench_pairs(n_pairs, side, seed);
    let suite = MetricSuite::new(side, seed)?;
    let mut metrics = BenchMetric::COMPARED.to_vec();
    metrics.push(BenchMetric::Exact);
    let mut values = Vec::with_capacity(metrics.len());
    let mut seconds = Vec::with_capacity(metrics.len());
    for &m in &metrics {
        let start = Instant::now();
        let v = pairs.iter().map(|(p, q)| suite.value(m, p, q)).collect::<Result<Vec<f64>>>()?;
        seconds.push(start.elapsed().as_secs_f64() / n_pairs as f64);
        values.push(v);
    }
    let exact = values.last().unwrap();
    let rows = metrics
        .iter()
        .zip(&values)
        .zip(&seconds)
        .map(|((m, v), &t)| CorrelationRow { metric: m.name(), pearson: pearson(v, exact), spearman: spearman(v, exact), mean_seconds: t })
        .collect();
    Ok(CorrelationTable { rows, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(method: &str, seed: u64, acc: [f64; 4]) -> EvalReport {
        EvalReport { method: method.into(), seed, accuracies: acc, config_digest: 0 }
    }

    #[test]
    fn single_report_csv_has_five_rows() {
        let csv = results_csv(&[report("none", 0, [0.5, 0.1, 0.2, 0.3])]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], RESULTS_HEADER);
        assert_eq!(lines.len(), 6);
        assert!(lines[5].starts_with("none,0,XMEAN,"));
        let x: f64 = lines[5].rsplit(',').next().unwrap().parse().unwrap();
        assert!((x - 0.2).abs() < 1e-12);
    }

    #[test]
    fn aggregate_rows_are_seed_means() {
        let reps = [report("m", 1, [0.1, 0.2, 0.3, 0.4]), report("m", 0, [0.3, 0.4, 0.5, 0.6])];
        let csv = results_csv(&reps);
        let mean_rows: Vec<&str> = csv.lines().filter(|l| l.contains(",mean,")).collect();
        assert_eq!(mean_rows.len(), 5);
        let aa: f64 = mean_rows[0].rsplit(',').next().unwrap().parse().unwrap();
        assert!((aa - 0.2).abs() < 1e-9);
        // seeds sorted
        assert!(csv.lines().nth(1).unwrap().starts_with("m,0,"));
        let back = parse_results_csv(&csv, Path::new("x")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].accuracies, [0.3, 0.4, 0.5, 0.6]);
    }

    #[test]
    fn ranks_handle_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 25.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_none());
    }

    #[test]
    fn bench_histograms_are_normalized() {
        let mut rng = stream(1, "t");
        for _ in 0..50 {
            let h = sample_bench_histogram(5, &mut rng);
            assert!((h.total() - 1.0).abs() < 1e-12);
            assert!(h.data().iter().all(|&v| v >= 0.1 / 25.0 - 1e-15));
        }
    }
}
