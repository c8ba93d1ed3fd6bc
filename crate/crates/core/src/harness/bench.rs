use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::engine::{backprop_flops_by_layer, backward_from, forward, train_step, ChannelMask, Model, ParamSet};
use crate::federation::{ConfigError, ModelConfig};
use crate::skeleton::{select_skeleton, ImportanceTable};
use crate::tensor::Tensor;

pub const BENCH_SCHEMA: &str = "fedskel-bench/1";

/// Published speedups `(intel back-prop, intel overall, arm back-prop,
/// arm overall)` at the ratios that were measured.
pub fn reference_speedups(ratio: f64) -> Option<[f64; 4]> {
    const TABLE: [(f64, [f64; 4]); 4] = [
        (0.4, [2.08, 1.10, 1.94, 1.35]),
        (0.3, [2.57, 1.13, 3.06, 1.52]),
        (0.2, [3.38, 1.21, 4.32, 1.61]),
        (0.1, [5.52, 1.28, 4.56, 1.82]),
    ];
    TABLE
        .iter()
        .find(|(r, _)| (r - ratio).abs() < 1e-9)
        .map(|(_, v)| *v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub batch: usize,
    pub ratios: Vec<f64>,
    pub warmup: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            batch: 32,
            ratios: vec![1.0, 0.4, 0.3, 0.2, 0.1],
            warmup: 5,
            reps: 30,
            seed: 0,
        }
    }
}

/// `[model]` and `[bench]` sections of a benchmark config. The model
/// defaults to the Caffe LeNet preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "caffe_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub bench: BenchSettings,
}

fn caffe_model() -> ModelConfig {
    ModelConfig {
        preset: Some("caffe_lenet".into()),
        ..ModelConfig::default()
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: caffe_model(),
            bench: BenchSettings::default(),
        }
    }
}

impl BenchConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.build()?;
        let b = &self.bench;
        if b.batch == 0 {
            return Err(ConfigError::field("bench.batch", "must be positive"));
        }
        if b.warmup < 5 {
            return Err(ConfigError::field("bench.warmup", "at least 5 warm-up runs are required"));
        }
        if b.reps < 30 {
            return Err(ConfigError::field("bench.reps", "at least 30 timed repetitions are required"));
        }
        if b.ratios.is_empty() || b.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(ConfigError::field("bench.ratios", "need one or more ratios in (0, 1]"));
        }
        Ok(())
    }
}

/// Mean and sample standard deviation in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Timing {
    pub mean: f64,
    pub stddev: f64,
}

impl Timing {
    fn of(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            mean,
            stddev: var.sqrt(),
        }
    }

    pub fn unstable(&self) -> bool {
        self.stddev > 0.2 * self.mean
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub ratio: f64,
    /// Counted backward multiply-accumulates of the prunable layers,
    /// masked over dense.
    pub flop_fraction: f64,
    pub backprop_dense: Timing,
    pub backprop_masked: Timing,
    pub step_dense: Timing,
    pub step_masked: Timing,
    pub reference: Option<[f64; 4]>,
}

impl BenchRow {
    pub fn backprop_speedup(&self) -> f64 {
        self.backprop_dense.mean / self.backprop_masked.mean
    }

    pub fn step_speedup(&self) -> f64 {
        self.step_dense.mean / self.step_masked.mean
    }

    pub fn unstable(&self) -> bool {
        [self.backprop_dense, self.backprop_masked, self.step_dense, self.step_masked]
            .iter()
            .any(Timing::unstable)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub batch: usize,
    pub warmup: usize,
    pub reps: usize,
    pub rows: Vec<BenchRow>,
}

/// Fraction of prunable-layer backward work left under `mask`.
pub fn prunable_flop_fraction(model: &Model, mask: &ChannelMask) -> f64 {
    let sum = |m: Option<&ChannelMask>| -> u64 {
        backprop_flops_by_layer(model, m)
            .iter()
            .filter(|l| l.prunable)
            .map(|l| l.total())
            .sum()
    };
    sum(Some(mask)) as f64 / sum(None) as f64
}

fn time<F: FnMut()>(mut f: F) -> f64 {
    let start = Instant::now();
    f();
    start.elapsed().as_secs_f64()
}

/// Times the convolution-stack backward and a whole training step, dense
/// against masked, on one fixed random batch. Dense and masked runs are
/// interleaved, alternating which goes first.
pub fn run_bench(model: &Model, settings: &BenchSettings) -> Result<BenchResult, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let params: ParamSet = ParamSet::init(model, &mut rng);
    let [c, h, w] = model.input_shape();
    let n = settings.batch;
    let x = Tensor::from_fn(&[n, c, h, w], |_| rng.gen_range(0.0f32..1.0));
    let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..model.classes())).collect();
    let pass = forward(model, &params, &x, &y)?;
    let top = model.conv_stack_end().max(1) - 1;
    let [oc, oh, ow] = model.output_shape(top);
    let upstream = Tensor::from_fn(&[n, oc, oh, ow], |_| rng.gen_range(-1.0f32..1.0));
    let mut table = ImportanceTable::new(model);
    table.accumulate(model, &pass)?;

    let mut rows = Vec::with_capacity(settings.ratios.len());
    for &ratio in &settings.ratios {
        let mask = select_skeleton(&table, ratio)?.mask().clone();
        let mut grads = ParamSet::zeros(model);
        let mut step_params = params.clone();
        let mut run = |masked: bool, step: bool| -> Result<f64, HarnessError> {
            let m = masked.then_some(&mask);
            let mut result = Ok(());
            let t = if step {
                time(|| result = train_step(model, &mut step_params, &x, &y, 0.0, m).map(drop))
            } else {
                let mut up = Some(upstream.clone());
                time(|| result = backward_from(model, &params, &pass, m, top, up.take().expect("once"), &mut grads))
            };
            result?;
            Ok(t)
        };
        let mut samples = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        for rep in 0..settings.warmup + settings.reps {
            let order = if rep % 2 == 0 { [false, true] } else { [true, false] };
            let mut t = [0.0; 4];
            for step in [false, true] {
                for masked in order {
                    t[2 * step as usize + masked as usize] = run(masked, step)?;
                }
            }
            if rep >= settings.warmup {
                for (s, v) in samples.iter_mut().zip(t) {
                    s.push(v);
                }
            }
        }
        rows.push(BenchRow {
            ratio,
            flop_fraction: prunable_flop_fraction(model, &mask),
            backprop_dense: Timing::of(&samples[0]),
            backprop_masked: Timing::of(&samples[1]),
            step_dense: Timing::of(&samples[2]),
            step_masked: Timing::of(&samples[3]),
            reference: reference_speedups(ratio),
        });
        log::info!("bench r={ratio}: back-prop speedup {:.2}x", rows.last().map_or(0.0, BenchRow::backprop_speedup));
    }
    Ok(BenchResult {
        batch: n,
        warmup: settings.warmup,
        reps: settings.reps,
        rows,
    })
}

impl BenchResult {
    pub fn csv_string(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "ratio",
            "flop_fraction",
            "backprop_dense_mean_s",
            "backprop_dense_std_s",
            "backprop_masked_mean_s",
            "backprop_masked_std_s",
            "backprop_speedup",
            "step_dense_mean_s",
            "step_dense_std_s",
            "step_masked_mean_s",
            "step_masked_std_s",
            "step_speedup",
            "unstable",
            "warmup",
            "reps",
            "batch",
            "ref_intel_backprop",
            "ref_intel_overall",
            "ref_arm_backprop",
            "ref_arm_overall",
        ])?;
        for r in &self.rows {
            let mut rec = vec![
                r.ratio.to_string(),
                format!("{:.6}", r.flop_fraction),
            ];
            for (t, speedup) in [
                (&[r.backprop_dense, r.backprop_masked], r.backprop_speedup()),
                (&[r.step_dense, r.step_masked], r.step_speedup()),
            ] {
                for x in t {
                    rec.push(format!("{:.6e}", x.mean));
                    rec.push(format!("{:.6e}", x.stddev));
                }
                rec.push(format!("{speedup:.3}"));
            }
            rec.push(r.unstable().to_string());
            rec.extend([self.warmup, self.reps, self.batch].map(|v| v.to_string()));
            match r.reference {
                Some(v) => rec.extend(v.map(|x| x.to_string())),
                None => rec.extend(std::iter::repeat(String::new()).take(4)),
            }
            w.write_record(rec)?;
        }
        let body = String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8");
        Ok(format!("# schema={BENCH_SCHEMA}\n{body}"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        fs::write(path, self.csv_string()?).map_err(|e| HarnessError::io(path, e))
    }

    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:>6}  {:>8}  {:>10}  {:>10}  {:>9}  {:>10}  {:>10}  {:>9}  {:>8}  {}\n",
            "ratio", "flops", "bp_dense", "bp_masked", "bp_speed", "st_dense", "st_masked", "st_speed", "ref_bp", "flag"
        );
        for r in &self.rows {
            let reference = r.reference.map_or(String::new(), |v| format!("{:.2}", v[0]));
            out += &format!(
                "{:>6.2}  {:>7.2}%  {:>8.3}ms  {:>8.3}ms  {:>8.2}x  {:>8.3}ms  {:>8.3}ms  {:>8.2}x  {:>8}  {}\n",
                r.ratio,
                100.0 * r.flop_fraction,
                1e3 * r.backprop_dense.mean,
                1e3 * r.backprop_masked.mean,
                r.backprop_speedup(),
                1e3 * r.step_dense.mean,
                1e3 * r.step_masked.mean,
                r.step_speedup(),
                reference,
                if r.unstable() { "unstable" } else { "" }
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caffe_lenet_flops_at_ten_percent() {
        let m = Model::caffe_lenet(true);
        let table = ImportanceTable::from_importance(
            (0..m.prunable_count())
                .map(|p| (0..m.slot_filters(m.slot_of_prunable(p))).map(|f| f as f64).collect())
                .collect(),
        );
        assert!((prunable_flop_fraction(&m, select_skeleton(&table, 0.1).unwrap().mask()) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn reference_points() {
        assert_eq!(reference_speedups(0.1).unwrap()[0], 5.52);
        assert_eq!(reference_speedups(0.1).unwrap()[3], 1.82);
        assert!(reference_speedups(1.0).is_none());
    }

    #[test]
    fn settings_validation() {
        let mut cfg = BenchConfig::default();
        cfg.validate().unwrap();
        cfg.bench.reps = 10;
        assert_eq!(cfg.validate().unwrap_err().fields(), vec!["bench.reps"]);
    }

    #[test]
    fn tiny_run_produces_rows() {
        let m = Model::new(
            [1, 8, 8],
            vec![
                crate::engine::LayerSpec::conv(4, 3, 1, 1),
                crate::engine::LayerSpec::relu(),
                crate::engine::LayerSpec::fc(3),
                crate::engine::LayerSpec::loss(),
            ],
        )
        .unwrap();
        let s = BenchSettings {
            batch: 2,
            ratios: vec![1.0, 0.5],
            warmup: 1,
            reps: 3,
            seed: 1,
        };
        let r = run_bench(&m, &s).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0].flop_fraction, 1.0);
        let csv = r.csv_string().unwrap();
        assert!(csv.starts_with("# schema=fedskel-bench/1\nratio,flop_fraction,"));
        assert_eq!(csv.lines().count(), 4);
    }
}
