//! Estimation reports.
//!
//! The CSV form is a long table `field,index,value`. Floats use shortest
//! round-trip formatting, so equal runs give byte-identical files. Wall-clock
//! timings are only written when asked for.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::Result;
use crate::estimator::{Estimate, VarianceInference};
use crate::inference::TestResult;

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    /// Configuration echo as ordered key/value pairs.
    pub config: Vec<(String, String)>,
    /// 1-based epoch, `None` for a single pass.
    pub epoch: Option<u32>,
    pub estimate: Estimate,
}

type Row = (String, String, String);

fn push(rows: &mut Vec<Row>, field: &str, index: impl ToString, value: impl ToString) {
    rows.push((field.to_string(), index.to_string(), value.to_string()));
}

fn push_test(rows: &mut Vec<Row>, prefix: &str, t: &TestResult) {
    push(rows, &format!("{prefix}_statistic"), "", t.statistic);
    push(rows, &format!("{prefix}_df"), "", t.q);
    push(rows, &format!("{prefix}_critical_value"), "", t.critical_value_95);
    push(rows, &format!("{prefix}_reject_5pct"), "", t.reject_at_5pct);
    if let Some(p) = t.p_value {
        push(rows, &format!("{prefix}_p_value"), "", p);
    }
}

fn push_variance(rows: &mut Vec<Row>, prefix: &str, v: &VarianceInference) {
    let d = v.avar.nrows();
    for i in 0..d {
        for j in 0..d {
            push(rows, &format!("{prefix}_avar"), format!("{}:{}", i + 1, j + 1), v.avar[(i, j)]);
        }
    }
    for (k, ci) in v.intervals.iter().enumerate() {
        push(rows, &format!("{prefix}_ci_lower"), k + 1, ci.lower);
        push(rows, &format!("{prefix}_ci_upper"), k + 1, ci.upper);
    }
    push_test(rows, &format!("{prefix}_wald"), &v.wald);
}

impl EstimateReport {
    pub fn rows(&self, include_times: bool) -> Vec<Row> {
        let e = &self.estimate;
        let mut rows = Vec::new();
        for (k, v) in &self.config {
            push(&mut rows, "config", k, v);
        }
        if let Some(ep) = self.epoch {
            push(&mut rows, "epoch", "", ep);
        }
        push(&mut rows, "estimator", "", e.kind);
        push(&mut rows, "n0", "", e.n0);
        push(&mut rows, "steps", "", e.steps);
        push(&mut rows, "n_eff", "", e.n_eff);
        if let Some(n1) = e.n1 {
            push(&mut rows, "n1", "", n1);
        }
        push(&mut rows, "gamma0", "", e.gamma0);
        for (k, b) in e.beta_bar.iter().enumerate() {
            push(&mut rows, "beta_bar", k + 1, b);
        }
        if let Some(v) = &e.plug_in {
            push_variance(&mut rows, "plug_in", v);
        }
        if let Some(v) = &e.random_scaling {
            push_variance(&mut rows, "random_scaling", v);
        }
        if let Some(t) = &e.dwh {
            push_test(&mut rows, "dwh", t);
        }
        if let Some(t) = &e.jtest {
            push_test(&mut rows, "j", t);
        }
        if let Some(t) = &e.jtest_at_average {
            push_test(&mut rows, "j_at_average", t);
        }
        push(&mut rows, "smw_fallbacks", "", e.diagnostics.smw_fallbacks);
        push(&mut rows, "pinv_steps", "", e.diagnostics.pinv_steps);
        if include_times {
            push(&mut rows, "time_warmup_s", "", e.times.warmup.as_secs_f64());
            push(&mut rows, "time_efficient_s", "", e.times.efficient.as_secs_f64());
        }
        rows
    }

    /// Human-readable summary.
    pub fn pretty(&self) -> String {
        let e = &self.estimate;
        let mut s = String::new();
        let epoch = self.epoch.map(|ep| format!(" (epoch {ep})")).unwrap_or_default();
        let _ = writeln!(s, "{}{epoch}: {} steps after n0 = {}, gamma0 = {:.6}", e.kind, e.steps, e.n0, e.gamma0);
        if let Some(n1) = e.n1 {
            let _ = writeln!(s, "warm-up n1 = {n1}");
        }
        let _ = writeln!(s, "{:>5} {:>12} {:>27} {:>27}", "coef", "estimate", "plug-in 95% CI", "random-scaling 95% CI");
        let ci = |v: &Option<VarianceInference>, k: usize| {
            v.as_ref().map_or("-".to_string(), |v| {
                format!("[{:.6}, {:.6}]", v.intervals[k].lower, v.intervals[k].upper)
            })
        };
        for (k, b) in e.beta_bar.iter().enumerate() {
            let _ = writeln!(s, "{:>5} {:>12.6} {:>27} {:>27}", k + 1, b, ci(&e.plug_in, k), ci(&e.random_scaling, k));
        }
        let mut test = |name: &str, t: &TestResult| {
            let p = t.p_value.map(|p| format!(", p = {p:.4}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{name}: statistic {:.4}, 95% critical value {:.4} (q = {}){p} -> {}",
                t.statistic,
                t.critical_value_95,
                t.q,
                if t.reject_at_5pct { "reject" } else { "do not reject" }
            );
        };
        if let Some(v) = &e.plug_in {
            test("plug-in Wald", &v.wald);
        }
        if let Some(v) = &e.random_scaling {
            test("random-scaling Wald", &v.wald);
        }
        if let Some(t) = &e.dwh {
            test("DWH", t);
        }
        if let Some(t) = &e.jtest {
            test("J", t);
        }
        if let Some(t) = &e.jtest_at_average {
            test("J at final average", t);
        }
        let _ = writeln!(
            s,
            "time: warm-up {:.3}s, efficient {:.3}s",
            e.times.warmup.as_secs_f64(),
            e.times.efficient.as_secs_f64()
        );
        s
    }
}

/// Writes reports as one CSV; the `epoch` row tells multi-epoch reports apart.
pub fn write_reports<W: Write>(writer: W, reports: &[EstimateReport], include_times: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["field", "index", "value"])?;
    for r in reports {
        for (f, i, v) in r.rows(include_times) {
            w.write_record([f, i, v])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{generate, DgpConfig};
    use crate::estimator::{estimate, EstimatorConfig, EstimatorKind, Inference};
    use crate::moments::moment_data;

    fn report() -> EstimateReport {
        let cfg = DgpConfig { seed: 8, ..DgpConfig::with_dims(3300, 2, 4) };
        let obs: Vec<_> = generate(&cfg).unwrap().collect();
        let md: Vec<_> = obs[300..].iter().map(|o| moment_data(o, cfg.dims()).unwrap()).collect();
        let ecfg = EstimatorConfig {
            kind: EstimatorKind::Sgmm,
            inference: Inference { plug_in: true, random_scaling: true, dwh: Some(vec![0]), jtest: true },
            ..EstimatorConfig::default()
        };
        EstimateReport {
            config: vec![("estimator".into(), "sgmm".into())],
            epoch: None,
            estimate: estimate(&ecfg, &obs[..300], &md).unwrap(),
        }
    }

    #[test]
    fn csv_without_times_is_deterministic() {
        let (a, b) = (report(), report());
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        write_reports(&mut ba, &[a], false).unwrap();
        write_reports(&mut bb, &[b], false).unwrap();
        assert_eq!(ba, bb);
        let text = String::from_utf8(ba).unwrap();
        assert!(!text.contains("time_"));
        assert!(text.contains("j_statistic") && text.contains("dwh_statistic"));
    }

    #[test]
    fn csv_values_parse_back() {
        let r = report();
        let rows = r.rows(true);
        let b1: f64 = rows.iter().find(|(f, i, _)| f == "beta_bar" && i == "1").unwrap().2.parse().unwrap();
        assert_eq!(b1, r.estimate.beta_bar[0]);
        assert!(rows.iter().any(|(f, _, _)| f == "time_warmup_s"));
        assert_eq!(rows.iter().filter(|(f, _, _)| f == "plug_in_avar").count(), 4);
    }

    #[test]
    fn pretty_mentions_every_test() {
        let p = report().pretty();
        for key in ["plug-in Wald", "random-scaling Wald", "DWH", "J:", "warm-up n1"] {
            assert!(p.contains(key), "{key} missing from\n{p}");
        }
    }
}
