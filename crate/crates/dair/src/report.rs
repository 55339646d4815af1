//! Tab-separated reports for evaluation, benchmarks, latents and training
//! logs.

use std::fmt::Write as _;
use std::time::Instant;

use dair_core::metrics::{BenchStage, EvalReport, Mechanism};
use dair_core::training::StepLog;

use crate::error::Result;

/// Six decimals; infinite PSNR is written as `inf`.
pub fn fmt_metric(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

/// One line per sample followed by `#`-prefixed class and overall
/// summaries.
pub fn eval_tsv(r: &EvalReport) -> String {
    let mut s = String::from("index\tlabel\tpsnr\tssim\tinput_psnr\tinput_ssim\n");
    for m in &r.samples {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            m.index,
            m.label,
            fmt_metric(m.psnr),
            fmt_metric(m.ssim),
            fmt_metric(m.input_psnr),
            fmt_metric(m.input_ssim)
        );
    }
    for c in &r.classes {
        let _ = writeln!(
            s,
            "# class\t{}\t{}\tcount={}\tinfinite={}\tpsnr={}\tssim={}",
            c.label,
            c.name,
            c.count,
            c.infinite,
            fmt_metric(c.mean_psnr),
            fmt_metric(c.mean_ssim)
        );
    }
    let _ = writeln!(
        s,
        "# overall\tcount={}\tinfinite={}\tpsnr={}\tssim={}",
        r.count,
        r.infinite,
        fmt_metric(r.mean_psnr),
        fmt_metric(r.mean_ssim)
    );
    s
}

pub fn log_header(components: &[(&'static str, f64)]) -> String {
    let names: Vec<&str> = components.iter().map(|c| c.0).collect();
    format!("step\tloss\t{}\tgrad_norm\twall_ms\n", names.join("\t"))
}

pub fn log_line(l: &StepLog, wall_ms: f64) -> String {
    let comps: Vec<String> = l.components.iter().map(|c| fmt_metric(c.1)).collect();
    format!("{}\t{}\t{}\t{}\t{wall_ms:.1}\n", l.step, fmt_metric(l.loss), comps.join("\t"), fmt_metric(l.grad_norm))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub h: usize,
    pub w: usize,
    pub median_ms: f64,
    /// Coefficient of variation of the timed runs.
    pub cv: f64,
    pub aux_bytes: usize,
}

/// Median wall time of `runs` passes after `warmups`, per mechanism and
/// size, single-threaded and in a fixed order.
pub fn bench_attention(sizes: &[(usize, usize)], channels: usize, heads: usize, warmups: usize, runs: usize) -> Result<Vec<BenchRecord>> {
    let stage = BenchStage::new(channels, heads, 0)?;
    let mut out = Vec::new();
    for &(h, w) in sizes {
        let (u, g, e) = stage.inputs(h, w, 1);
        for m in Mechanism::ALL {
            for _ in 0..warmups {
                std::hint::black_box(stage.run(m, &u, &g, &e)?);
            }
            let mut times = Vec::with_capacity(runs);
            for _ in 0..runs.max(1) {
                let t = Instant::now();
                std::hint::black_box(stage.run(m, &u, &g, &e)?);
                times.push(t.elapsed().as_secs_f64() * 1e3);
            }
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            let sd = (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / times.len() as f64).sqrt();
            times.sort_by(f64::total_cmp);
            let median = times[times.len() / 2];
            out.push(BenchRecord { mechanism: m, h, w, median_ms: median, cv: sd / mean, aux_bytes: stage.aux_memory_bytes(m, h, w) });
        }
    }
    Ok(out)
}

/// Time of `m` at the larger size over the smaller, for consecutive sizes.
pub fn scaling_ratios(records: &[BenchRecord], m: Mechanism) -> Vec<f64> {
    let r: Vec<&BenchRecord> = records.iter().filter(|r| r.mechanism == m).collect();
    r.windows(2).map(|w| w[1].median_ms / w[0].median_ms).collect()
}

pub fn bench_tsv(records: &[BenchRecord]) -> String {
    let mut s = String::from("mechanism\th\tw\tmedian_ms\tcv\taux_bytes\n");
    for r in records {
        let _ = writeln!(s, "{}\t{}\t{}\t{:.3}\t{:.3}\t{}", r.mechanism.name(), r.h, r.w, r.median_ms, r.cv, r.aux_bytes);
    }
    for m in Mechanism::ALL {
        let ratios: Vec<String> = scaling_ratios(records, m).iter().map(|x| format!("{x:.2}")).collect();
        let _ = writeln!(s, "# scaling\t{}\t{}", m.name(), ratios.join(","));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use dair_core::metrics::{summarize, SampleMetrics};

    #[test]
    fn eval_report_text() {
        let s = |index, psnr| SampleMetrics { index, label: 0, psnr, ssim: 1.0, input_psnr: 20.0, input_ssim: 0.5 };
        let r = summarize(vec![s(0, 30.0), s(1, f64::INFINITY)], &["noise".into()]).unwrap();
        let t = eval_tsv(&r);
        assert!(t.contains("1\t0\tinf\t1.000000"));
        assert!(t.contains("# overall\tcount=2\tinfinite=1\tpsnr=30.000000"));
    }

    #[test]
    fn bench_records() {
        let r = bench_attention(&[(8, 8), (16, 16)], 8, 2, 1, 3).unwrap();
        assert_eq!(r.len(), 6);
        assert_eq!(scaling_ratios(&r, Mechanism::ThreeWd).len(), 1);
        assert!(bench_tsv(&r).contains("# scaling\t3wd"));
    }
}
