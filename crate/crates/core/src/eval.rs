//! Completion metrics and benchmark reports.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{OccupancyGrid, SdfGrid};
use crate::mesh::{marching_cubes, sample_surface, MeshDistance, Point, TriangleMesh};

/// Surface samples drawn for the mesh distances.
pub const SURFACE_SAMPLES: usize = 10_000;

/// Fraction of voxels on which the grids disagree.
pub fn hamming(pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<f64> {
    pred.dims().ensure_same(&gt.dims())?;
    let diff = pred.values().iter().zip(gt.values()).filter(|(a, b)| a != b).count();
    Ok(diff as f64 / gt.dims().len() as f64)
}

/// Intersection over union of the occupied sets.
pub fn iou(pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<f64> {
    pred.dims().ensure_same(&gt.dims())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.values().iter().zip(gt.values()) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        return Err(Error::InvalidInput("IoU of two empty grids is undefined".into()));
    }
    Ok(inter as f64 / union as f64)
}

fn mean_distance(points: &[Point], to: &TriangleMesh) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidInput("no points to measure".into()));
    }
    let bvh = MeshDistance::new(to)?;
    Ok(points.iter().map(|&p| bvh.distance(p)).sum::<f64>() / points.len() as f64)
}

/// Mean distance from `n` samples on the predicted surface to the target.
pub fn accuracy(pred: &TriangleMesh, gt: &TriangleMesh, n: usize, seed: u64) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::InvalidInput("empty target mesh".into()));
    }
    mean_distance(&sample_surface(pred, n, seed)?, gt)
}

/// Target side of [`completeness`]: a mesh to sample or raw points.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Mesh(&'a TriangleMesh),
    Points(&'a [Point]),
}

/// Mean distance from the target surface (or points) to the prediction.
pub fn completeness(target: Target<'_>, pred: &TriangleMesh, n: usize, seed: u64) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::InvalidInput("empty predicted mesh".into()));
    }
    match target {
        Target::Mesh(m) => mean_distance(&sample_surface(m, n, seed)?, pred),
        Target::Points(p) => mean_distance(p, pred),
    }
}

/// Metrics of one completed sample. Mesh distances are `None` when either
/// surface is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub sample: String,
    pub ham: f64,
    pub iou: f64,
    pub acc: Option<f64>,
    pub comp: Option<f64>,
    pub seconds: f64,
}

/// Prediction and ground truth of one sample.
pub struct EvalItem<'a> {
    pub sample: String,
    pub pred_occupancy: &'a OccupancyGrid,
    pub pred_sdf: &'a SdfGrid,
    pub gt_occupancy: &'a OccupancyGrid,
    pub gt_sdf: &'a SdfGrid,
    pub seconds: f64,
}

pub fn evaluate_sample(item: &EvalItem<'_>, n: usize, seed: u64) -> Result<SampleMetrics> {
    let ham = hamming(item.pred_occupancy, item.gt_occupancy)?;
    let iou = iou(item.pred_occupancy, item.gt_occupancy)?;
    let pred = marching_cubes(item.pred_sdf, 0.0);
    let gt = marching_cubes(item.gt_sdf, 0.0);
    let (acc, comp) = if pred.is_empty() || gt.is_empty() {
        (None, None)
    } else {
        (Some(accuracy(&pred, &gt, n, seed)?), Some(completeness(Target::Mesh(&gt), &pred, n, seed)?))
    };
    Ok(SampleMetrics { sample: item.sample.clone(), ham, iou, acc, comp, seconds: item.seconds })
}

/// Per-sample and mean metrics of one method on one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub dataset: String,
    pub samples: Vec<SampleMetrics>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

impl MetricReport {
    pub fn evaluate(method: &str, dataset: &str, items: &[EvalItem<'_>], n: usize, seed: u64) -> Result<Self> {
        let samples = items.par_iter().map(|it| evaluate_sample(it, n, seed)).collect::<Result<_>>()?;
        Ok(MetricReport { method: method.into(), dataset: dataset.into(), samples })
    }

    pub fn mean_ham(&self) -> Option<f64> {
        mean(self.samples.iter().map(|s| s.ham))
    }

    pub fn mean_iou(&self) -> Option<f64> {
        mean(self.samples.iter().map(|s| s.iou))
    }

    /// Mean over samples with a defined distance.
    pub fn mean_acc(&self) -> Option<f64> {
        mean(self.samples.iter().filter_map(|s| s.acc))
    }

    pub fn mean_comp(&self) -> Option<f64> {
        mean(self.samples.iter().filter_map(|s| s.comp))
    }

    pub fn mean_seconds(&self) -> Option<f64> {
        mean(self.samples.iter().map(|s| s.seconds))
    }

    pub const HEADER: &'static str = "method\tdataset\tsample\tham\tiou\tacc\tcomp";
    pub const TIMING_HEADER: &'static str = "method\tdataset\tsample\tseconds";

    /// Tab-separated per-sample metrics. Wall times live in a separate
    /// table so that reruns reproduce this one byte for byte.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}",
                self.method,
                self.dataset,
                s.sample,
                s.ham,
                s.iou,
                fmt_opt(s.acc),
                fmt_opt(s.comp)
            );
        }
        out
    }

    /// Tab-separated per-sample wall times.
    pub fn timing_tsv(&self) -> String {
        let mut out = String::from(Self::TIMING_HEADER);
        out.push('\n');
        for s in &self.samples {
            let _ = writeln!(out, "{}\t{}\t{}\t{:.6e}", self.method, self.dataset, s.sample, s.seconds);
        }
        out
    }

    /// One summary row: method, dataset, count and the metric means.
    pub fn summary_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.method,
            self.dataset,
            self.samples.len(),
            fmt_opt(self.mean_ham()),
            fmt_opt(self.mean_iou()),
            fmt_opt(self.mean_acc()),
            fmt_opt(self.mean_comp())
        )
    }
}

pub const SUMMARY_HEADER: &str = "method\tdataset\tn\tham\tiou\tacc\tcomp";

/// Method-by-metric table of several reports.
pub fn summary_table(reports: &[MetricReport]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.summary_row());
        out.push('\n');
    }
    out
}

/// Aligned plain-text rendering of [`summary_table`].
pub fn pretty_table(reports: &[MetricReport]) -> String {
    let mut out = format!("{:<10} {:<10} {:>4} {:>8} {:>8} {:>8} {:>8} {:>10}\n", "method", "dataset", "n", "Ham", "IoU", "Acc", "Comp", "sec");
    for r in reports {
        let f = |v: Option<f64>| v.map_or_else(|| "-".into(), |v| format!("{v:.4}"));
        let _ = writeln!(
            out,
            "{:<10} {:<10} {:>4} {:>8} {:>8} {:>8} {:>8} {:>10}",
            r.method,
            r.dataset,
            r.samples.len(),
            f(r.mean_ham()),
            f(r.mean_iou()),
            f(r.mean_acc()),
            f(r.mean_comp()),
            r.mean_seconds().map_or_else(|| "-".into(), |v| format!("{v:.2e}"))
        );
    }
    out
}

/// Mean wall time per method, one row each.
pub fn timing_table(reports: &[MetricReport]) -> String {
    let mut out = String::from("method\tdataset\tn\tseconds\n");
    for r in reports {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.method, r.dataset, r.samples.len(), r.mean_seconds().map_or("nan".into(), |v| format!("{v:.6e}")));
    }
    out
}

/// Parses a per-sample table written by [`MetricReport::to_tsv`]; wall
/// times are not part of it and read back as zero.
pub fn parse_report(text: &str, origin: &Path) -> Result<MetricReport> {
    let mut lines = text.lines();
    if lines.next() != Some(MetricReport::HEADER) {
        return Err(Error::format(origin, "missing report header"));
    }
    let mut report: Option<MetricReport> = None;
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(Error::format(origin, format!("expected 7 columns: {line:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(origin, format!("bad number {s:?}")));
        let opt = |s: &str| if s == "nan" { Ok(None) } else { num(s).map(Some) };
        let r = report.get_or_insert_with(|| MetricReport { method: f[0].into(), dataset: f[1].into(), samples: Vec::new() });
        r.samples.push(SampleMetrics {
            sample: f[2].into(),
            ham: num(f[3])?,
            iou: num(f[4])?,
            acc: opt(f[5])?,
            comp: opt(f[6])?,
            seconds: 0.0,
        });
    }
    report.ok_or_else(|| Error::format(origin, "report without samples"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridDims;
    use crate::mesh::cube_mesh;
    use proptest::prelude::*;

    fn uv_sphere(r: f64, rings: usize, segments: usize) -> TriangleMesh {
        let mut v = vec![[0.0, 0.0, r]];
        for i in 1..rings {
            let th = std::f64::consts::PI * i as f64 / rings as f64;
            for j in 0..segments {
                let ph = 2.0 * std::f64::consts::PI * j as f64 / segments as f64;
                v.push([r * th.sin() * ph.cos(), r * th.sin() * ph.sin(), r * th.cos()]);
            }
        }
        v.push([0.0, 0.0, -r]);
        let at = |i: usize, j: usize| (1 + (i - 1) * segments + j % segments) as u32;
        let south = (v.len() - 1) as u32;
        let mut f = Vec::new();
        for j in 0..segments {
            f.push([0, at(1, j), at(1, j + 1)]);
            f.push([south, at(rings - 1, j + 1), at(rings - 1, j)]);
        }
        for i in 1..rings - 1 {
            for j in 0..segments {
                f.push([at(i, j), at(i + 1, j), at(i + 1, j + 1)]);
                f.push([at(i, j), at(i + 1, j + 1), at(i, j + 1)]);
            }
        }
        TriangleMesh::new(v, f).unwrap()
    }

    #[test]
    fn hamming_cases() {
        let dims = GridDims::cube(2).unwrap();
        let a = OccupancyGrid::from_fn(dims, |i, j, _| i == j);
        assert_eq!(hamming(&a, &a).unwrap(), 0.0);
        assert_eq!(hamming(&a, &a.complement()).unwrap(), 1.0);
        let mut b = a.clone();
        b.set(0, 1, 1, true);
        assert_eq!(hamming(&a, &b).unwrap(), 0.125);
        assert!(hamming(&a, &OccupancyGrid::empty(GridDims::cube(3).unwrap())).is_err());
    }

    #[test]
    fn iou_cases() {
        let dims = GridDims::cube(2).unwrap();
        let a = OccupancyGrid::from_fn(dims, |i, _, _| i == 0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &a.complement()).unwrap(), 0.0);
        let gt = OccupancyGrid::from_fn(dims, |i, j, k| i == 0 && j == 0 && k < 2);
        let pred = OccupancyGrid::from_fn(dims, |i, j, k| i == 0 && j == 0 && k == 0);
        assert_eq!(iou(&pred, &gt).unwrap(), 0.5);
        let e = OccupancyGrid::empty(dims);
        assert!(iou(&e, &e).is_err());
    }

    #[test]
    fn mesh_distances() {
        let c = cube_mesh([0.0; 3], 2.0);
        assert!(accuracy(&c, &c, 2000, 1).unwrap() < 1e-9);
        assert!(completeness(Target::Mesh(&c), &c, 2000, 1).unwrap() < 1e-9);
        let moved = cube_mesh([1.0, 0.0, 0.0], 2.0);
        let d = accuracy(&moved, &c, 2000, 1).unwrap();
        assert!(d > 0.0 && d <= 1.0, "{d}");
        let on = sample_surface(&c, 100, 4).unwrap();
        assert!(completeness(Target::Points(&on), &c, 0, 0).unwrap() < 1e-9);
        let empty = TriangleMesh::default();
        assert!(accuracy(&empty, &c, 10, 0).is_err());
        assert!(completeness(Target::Mesh(&c), &empty, 10, 0).is_err());
    }

    #[test]
    fn concentric_spheres_are_one_voxel_apart() {
        let inner = uv_sphere(5.0, 96, 192);
        let outer = uv_sphere(6.0, 96, 192);
        let acc = accuracy(&inner, &outer, SURFACE_SAMPLES, 3).unwrap();
        let comp = completeness(Target::Mesh(&outer), &inner, SURFACE_SAMPLES, 3).unwrap();
        assert!((acc - 1.0).abs() < 0.05, "{acc}");
        assert!((comp - 1.0).abs() < 0.05, "{comp}");
    }

    #[test]
    fn perfect_prediction_and_report_means() {
        let dims = GridDims::cube(10).unwrap();
        let shapes: Vec<OccupancyGrid> = (2..5)
            .map(|r| OccupancyGrid::from_fn(dims, |i, j, k| i.abs_diff(5) + j.abs_diff(5) + k.abs_diff(5) <= r))
            .collect();
        let sdfs: Vec<SdfGrid> = shapes.iter().map(|s| crate::grid::signed_distance_transform(s).unwrap()).collect();
        let items: Vec<EvalItem> = (0..3)
            .map(|i| EvalItem {
                sample: format!("s{i}"),
                pred_occupancy: &shapes[i],
                pred_sdf: &sdfs[i],
                gt_occupancy: &shapes[i],
                gt_sdf: &sdfs[i],
                seconds: 0.5,
            })
            .collect();
        let r = MetricReport::evaluate("oracle", "desk", &items, 1000, 1).unwrap();
        assert_eq!(r.mean_ham(), Some(0.0));
        assert_eq!(r.mean_iou(), Some(1.0));
        assert!(r.mean_acc().unwrap() < 1e-9 && r.mean_comp().unwrap() < 1e-9);

        let off: Vec<EvalItem> = (0..3)
            .map(|i| EvalItem {
                sample: format!("s{i}"),
                pred_occupancy: &shapes[(i + 1) % 3],
                pred_sdf: &sdfs[(i + 1) % 3],
                gt_occupancy: &shapes[i],
                gt_sdf: &sdfs[i],
                seconds: 0.5,
            })
            .collect();
        let r = MetricReport::evaluate("shifted", "desk", &off, 1000, 1).unwrap();
        let hand: f64 = off.iter().map(|it| iou(it.pred_occupancy, it.gt_occupancy).unwrap()).sum::<f64>() / 3.0;
        assert!((r.mean_iou().unwrap() - hand).abs() < 1e-15);
        let acc_hand = r.samples.iter().map(|s| s.acc.unwrap()).sum::<f64>() / 3.0;
        assert!((r.mean_acc().unwrap() - acc_hand).abs() < 1e-15);

        let parsed = parse_report(&r.to_tsv(), Path::new("r.tsv")).unwrap();
        assert_eq!(parsed.samples.len(), 3);
        assert!((parsed.mean_iou().unwrap() - hand).abs() < 1e-6);
        let table = summary_table(&[r]);
        assert!(table.lines().nth(1).unwrap().starts_with("shifted\tdesk\t3\t"));
    }

    proptest! {
        #[test]
        fn set_identities(a in prop::collection::vec(any::<bool>(), 27), b in prop::collection::vec(any::<bool>(), 27)) {
            let dims = GridDims::cube(3).unwrap();
            let (ga, gb) = (OccupancyGrid::from_values(dims, a.clone()).unwrap(), OccupancyGrid::from_values(dims, b.clone()).unwrap());
            prop_assert_eq!(hamming(&ga, &gb).unwrap(), hamming(&gb, &ga).unwrap());
            let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
            prop_assume!(union > 0);
            let i = iou(&ga, &gb).unwrap();
            prop_assert_eq!(i, iou(&gb, &ga).unwrap());
            let diff = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            prop_assert!(1.0 - i >= diff as f64 / union as f64 - 1e-12);
            // Permuting voxel order consistently changes nothing.
            let perm: Vec<usize> = (0..27).map(|k| (k * 10) % 27).collect();
            let pa = OccupancyGrid::from_values(dims, perm.iter().map(|&k| a[k]).collect()).unwrap();
            let pb = OccupancyGrid::from_values(dims, perm.iter().map(|&k| b[k]).collect()).unwrap();
            prop_assert_eq!(hamming(&pa, &pb).unwrap(), hamming(&ga, &gb).unwrap());
            prop_assert_eq!(iou(&pa, &pb).unwrap(), i);
        }
    }
}
