//! Cross-modality influence: how much one task's performance drops when the
//! other task's input is muted at inference time.
//!
//! Three setups are evaluated on the same network and data:
//!
//! * A: both inputs present,
//! * B: semantic input replaced by zeros,
//! * C: depth input replaced by zeros.
//!
//! Semantic performance `A_S` is mean IOU in percent, depth performance
//! `A_D` is `-100 · rel_sqr`. Then `ω_{S→D'} = A_D(A) − A_D(B)` and
//! `ω_{D→S'} = A_S(A) − A_S(C)`.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::metrics::{check_classes, evaluate_with, MetricReport};
use crate::model::JrnNetwork;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INFLUENCE_CSV_HEADER: &str = "variant,omega_d_to_s,omega_s_to_d,mean_iou,neg_rel_sqr_x100";
pub const INFLUENCE_CSV: &str = "influence.csv";
pub const PLOT_D_TO_S: &str = "plot_omega_d_to_s.csv";
pub const PLOT_S_TO_D: &str = "plot_omega_s_to_d.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Setup {
    /// `f(X, Y)`: both inputs.
    Both,
    /// `f(D)`: semantic input muted.
    SemanticMuted,
    /// `f(S)`: depth input muted.
    DepthMuted,
}

impl Setup {
    pub const ALL: [Setup; 3] = [Setup::Both, Setup::SemanticMuted, Setup::DepthMuted];

    pub fn letter(self) -> char {
        match self {
            Setup::Both => 'A',
            Setup::SemanticMuted => 'B',
            Setup::DepthMuted => 'C',
        }
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "setup {}", self.letter())
    }
}

/// Identifies the network and evaluation set a result came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub network: u64,
    pub dataset: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetupResult {
    pub setup: Setup,
    /// Mean IOU, percent.
    pub perf_semantic: f64,
    /// `-100 · rel_sqr`; higher is better.
    pub perf_depth: f64,
    pub report: MetricReport,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfluencePoint {
    pub variant: String,
    pub omega_d_to_s: f64,
    pub omega_s_to_d: f64,
    pub perf_semantic_a: f64,
    pub perf_depth_a: f64,
}

pub fn semantic_performance(report: &MetricReport) -> f64 {
    100.0 * report.seg.mean_iou
}

pub fn depth_performance(report: &MetricReport) -> f64 {
    -100.0 * report.depth.rel_sqr
}

pub fn dataset_fingerprint<T: Scalar>(samples: &[Sample<T>]) -> u64 {
    let mut h = DefaultHasher::new();
    for s in samples {
        s.id.hash(&mut h);
        for t in [&s.input.depth, &s.input.semantics, s.gt.depth()] {
            t.shape().hash(&mut h);
            for v in t.data() {
                v.widen().to_bits().hash(&mut h);
            }
        }
        s.gt.labels().hash(&mut h);
        s.gt.mask().bits().hash(&mut h);
    }
    h.finish()
}

/// Evaluates one setup over the whole set.
pub fn run_setup<T: Scalar>(network: &JrnNetwork<T>, samples: &[Sample<T>], setup: Setup) -> Result<SetupResult> {
    check_classes(samples, network.num_classes())?;
    let report = evaluate_with(samples, network.num_classes(), |s| {
        let (depth, sem) = (&s.input.depth, &s.input.semantics);
        match setup {
            Setup::Both => network.forward(depth, sem),
            Setup::SemanticMuted => network.forward(depth, &Tensor::zeros_like(sem)),
            Setup::DepthMuted => network.forward(&Tensor::zeros_like(depth), sem),
        }
    })?;
    Ok(SetupResult {
        setup,
        perf_semantic: semantic_performance(&report),
        perf_depth: depth_performance(&report),
        report,
        provenance: Provenance { network: network.fingerprint(), dataset: dataset_fingerprint(samples) },
    })
}

/// Setups A, B and C in that order.
pub fn run_setups<T: Scalar>(network: &JrnNetwork<T>, samples: &[Sample<T>]) -> Result<[SetupResult; 3]> {
    if samples.is_empty() {
        return Err(Error::Usage("influence measurement needs at least one sample".into()));
    }
    Ok([
        run_setup(network, samples, Setup::Both)?,
        run_setup(network, samples, Setup::SemanticMuted)?,
        run_setup(network, samples, Setup::DepthMuted)?,
    ])
}

/// Influence numbers from setups A, B (semantic muted) and C (depth muted).
///
/// Rejects results whose setups are out of place or that come from
/// different networks or evaluation sets.
pub fn influence_numbers(
    variant: &str,
    both: &SetupResult,
    semantic_muted: &SetupResult,
    depth_muted: &SetupResult,
) -> Result<InfluencePoint> {
    for (r, want) in [(both, Setup::Both), (semantic_muted, Setup::SemanticMuted), (depth_muted, Setup::DepthMuted)] {
        if r.setup != want {
            return Err(Error::Usage(format!("expected {want} in this position, got {}", r.setup)));
        }
    }
    if semantic_muted.provenance != both.provenance || depth_muted.provenance != both.provenance {
        return Err(Error::Usage("setup results come from different networks or evaluation sets".into()));
    }
    Ok(InfluencePoint {
        variant: variant.to_string(),
        omega_d_to_s: both.perf_semantic - depth_muted.perf_semantic,
        omega_s_to_d: both.perf_depth - semantic_muted.perf_depth,
        perf_semantic_a: both.perf_semantic,
        perf_depth_a: both.perf_depth,
    })
}

/// Runs all three setups and reduces them to one influence point.
pub fn measure<T: Scalar>(network: &JrnNetwork<T>, samples: &[Sample<T>]) -> Result<InfluencePoint> {
    let [a, b, c] = run_setups(network, samples)?;
    influence_numbers(network.variant().name(), &a, &b, &c)
}

/// Formats `x` with 6 significant digits, positional for exponents in
/// `[-5, 6)` and scientific otherwise, with trailing zeros removed.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..6).contains(&exp) {
        trim(&format!("{:.*}", (5 - exp) as usize, x))
    } else {
        format!("{}e{exp}", trim(mantissa))
    }
}

/// The value a reader recovers from [`format_sig6`] output.
pub fn round_sig6(x: f64) -> f64 {
    format_sig6(x).parse().expect("formatted numbers parse")
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Paths written by [`emit_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub plot_d_to_s: PathBuf,
    pub plot_s_to_d: PathBuf,
}

pub fn influence_csv(points: &[InfluencePoint]) -> String {
    let mut out = format!("{INFLUENCE_CSV_HEADER}\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.variant,
            format_sig6(p.omega_d_to_s),
            format_sig6(p.omega_s_to_d),
            format_sig6(p.perf_semantic_a),
            format_sig6(p.perf_depth_a)
        ));
    }
    out
}

/// Writes the influence table and the two (influence, performance) plot
/// series into `dir`.
pub fn emit_report(points: &[InfluencePoint], dir: impl AsRef<Path>) -> Result<ReportFiles> {
    if points.is_empty() {
        return Err(Error::Usage("report needs at least one influence point".into()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        table: dir.join(INFLUENCE_CSV),
        plot_d_to_s: dir.join(PLOT_D_TO_S),
        plot_s_to_d: dir.join(PLOT_S_TO_D),
    };
    write_file(&files.table, &influence_csv(points))?;

    let mut d_to_s = String::from("variant,omega_d_to_s,mean_iou\n");
    let mut s_to_d = String::from("variant,omega_s_to_d,neg_rel_sqr_x100\n");
    for p in points {
        d_to_s.push_str(&format!("{},{},{}\n", p.variant, format_sig6(p.omega_d_to_s), format_sig6(p.perf_semantic_a)));
        s_to_d.push_str(&format!("{},{},{}\n", p.variant, format_sig6(p.omega_s_to_d), format_sig6(p.perf_depth_a)));
    }
    write_file(&files.plot_d_to_s, &d_to_s)?;
    write_file(&files.plot_s_to_d, &s_to_d)?;
    Ok(files)
}

pub fn parse_influence_csv(text: &str) -> Result<Vec<InfluencePoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == INFLUENCE_CSV_HEADER => {}
        other => {
            return Err(Error::format(0, format!("expected header `{INFLUENCE_CSV_HEADER}`, found {other:?}")));
        }
    }
    let mut offset = INFLUENCE_CSV_HEADER.len() as u64 + 1;
    let mut points = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::format(offset, format!("expected 5 fields, found {}", fields.len())));
        }
        let num = |i: usize| {
            fields[i].parse::<f64>().map_err(|e| Error::format(offset, format!("field {i} `{}`: {e}", fields[i])))
        };
        points.push(InfluencePoint {
            variant: fields[0].to_string(),
            omega_d_to_s: num(1)?,
            omega_s_to_d: num(2)?,
            perf_semantic_a: num(3)?,
            perf_depth_a: num(4)?,
        });
        offset += line.len() as u64 + 1;
    }
    Ok(points)
}

pub fn read_influence_csv(path: impl AsRef<Path>) -> Result<Vec<InfluencePoint>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_influence_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{DepthMetrics, SegMetrics};

    fn result(setup: Setup, sem: f64, depth: f64, prov: Provenance) -> SetupResult {
        SetupResult {
            setup,
            perf_semantic: sem,
            perf_depth: depth,
            report: MetricReport {
                depth: DepthMetrics {
                    rel: 0.0,
                    rel_sqr: -depth / 100.0,
                    log10: 0.0,
                    rms_linear: 0.0,
                    rms_log: 0.0,
                    delta1: 1.0,
                    delta2: 1.0,
                    delta3: 1.0,
                },
                seg: SegMetrics { per_class_iou: vec![], mean_iou: sem / 100.0, pixel_accuracy: 1.0 },
            },
            provenance: prov,
        }
    }

    const P: Provenance = Provenance { network: 1, dataset: 2 };

    #[test]
    fn subtraction_contract() {
        let a = result(Setup::Both, 54.0, -12.0, P);
        let b = result(Setup::SemanticMuted, 50.0, -13.5, P);
        let c = result(Setup::DepthMuted, 53.0, -20.0, P);
        let p = influence_numbers("cat60", &a, &b, &c).unwrap();
        assert_eq!(p.omega_d_to_s, 1.0);
        assert_eq!(p.omega_s_to_d, 1.5);
        assert_eq!((p.perf_semantic_a, p.perf_depth_a), (54.0, -12.0));
    }

    #[test]
    fn swapped_setups_rejected() {
        let a = result(Setup::Both, 54.0, -12.0, P);
        let b = result(Setup::SemanticMuted, 50.0, -13.5, P);
        let c = result(Setup::DepthMuted, 53.0, -20.0, P);
        assert!(matches!(influence_numbers("x", &a, &c, &b), Err(Error::Usage(_))));
        let other = result(Setup::DepthMuted, 53.0, -20.0, Provenance { network: 9, dataset: 2 });
        assert!(matches!(influence_numbers("x", &a, &b, &other), Err(Error::Usage(_))));
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(-0.24), "-0.24");
        assert_eq!(format_sig6(54.18412345), "54.1841");
        assert_eq!(format_sig6(9.9999996), "10");
        assert_eq!(format_sig6(123456789.0), "1.23457e8");
        assert_eq!(format_sig6(0.000012345678), "0.0000123457");
        assert_eq!(format_sig6(1.5e-7), "1.5e-7");
        assert_eq!(format_sig6(-4.9), "-4.9");
    }

    #[test]
    fn golden_table() {
        let point = |variant: &str, a: f64, b: f64, c: f64, d: f64| InfluencePoint {
            variant: variant.into(),
            omega_d_to_s: a,
            omega_s_to_d: b,
            perf_semantic_a: c,
            perf_depth_a: d,
        };
        let table = influence_csv(&[
            point("cat60", 1.0, 2.5, 54.18412345, -12.3),
            point("sum60", -0.000123456789, 1234567.0, 0.0, -100.0),
        ]);
        assert_eq!(
            table,
            "variant,omega_d_to_s,omega_s_to_d,mean_iou,neg_rel_sqr_x100\n\
             cat60,1,2.5,54.1841,-12.3\n\
             sum60,-0.000123457,1.23457e6,0,-100\n"
        );
    }

    #[test]
    fn header_checked() {
        assert!(parse_influence_csv("variant,x\n").is_err());
        assert!(parse_influence_csv(&format!("{INFLUENCE_CSV_HEADER}\ncat1,1,2,3\n")).is_err());
        assert_eq!(parse_influence_csv(&format!("{INFLUENCE_CSV_HEADER}\n")).unwrap(), vec![]);
    }
}
