//! Scaling benchmarks: wall time, analytic FLOPs, and analytic activation
//! memory for the two mixer paths against softmax attention across sequence
//! lengths.
//!
//! Wall times are medians over pinned repetitions after fixed warmups and
//! are advisory (machine-dependent); the FLOP and activation counters are
//! closed-form and platform-independent. Attention runs under a score-matrix
//! memory budget: a length that exceeds it yields a record marked OOM and
//! the sweep continues.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_flops, attention_forward, AttentionWeights};
use crate::complex::Complex64;
use crate::config::BenchConfig;
use crate::dictionary::{PhaseBias, SpectralDictionary};
use crate::error::{Result, SdictError};
use crate::matrix::{CMatrix, RMatrix};
use crate::mixer::{sdict_dense_flops, sdict_fft_flops, sdict_forward, MixerPath, SDictMixer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operator {
    SdictDense,
    SdictFft,
    Attention,
}

pub const ALL_OPERATORS: [Operator; 3] =
    [Operator::SdictDense, Operator::SdictFft, Operator::Attention];

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Operator::SdictDense => "sdict_dense",
            Operator::SdictFft => "sdict_fft",
            Operator::Attention => "attention",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BenchRecord {
    pub operator: Operator,
    pub l: usize,
    pub d: usize,
    pub k: usize,
    /// Median wall time; None when the operator refused the length (OOM).
    pub wall_ns: Option<u64>,
    pub flops: u64,
    pub activation_floats: u64,
}

/// Forward intermediates a backward pass would need, counted in f64 units
/// (complex tensors count twice). Attention stores Q, K, V and the L x L
/// score matrix; the mixer paths store complex coefficients, the factored
/// Gram, the gated coefficients, and (dense) the atom matrix or (fft) the
/// per-channel spectra.
pub fn count_activation_floats(operator: Operator, l: usize, d: usize, k: usize) -> u64 {
    if l == 0 {
        return 0;
    }
    let (l, d, k) = (l as u64, d as u64, k as u64);
    match operator {
        Operator::Attention => l * l + 3 * l * d,
        Operator::SdictDense => 4 * l * k + 2 * k * k + 6 * k * d,
        Operator::SdictFft => 2 * l * d + 2 * k * k + 6 * k * d,
    }
}

pub fn flops_for(operator: Operator, l: usize, d: usize, k: usize) -> u64 {
    match operator {
        Operator::Attention => attention_flops(l, d),
        Operator::SdictDense => sdict_dense_flops(l, k, d),
        Operator::SdictFft => sdict_fft_flops(l, k, d),
    }
}

/// K atoms on the exact DFT grid of length l (bins 1..=K), unit amplitude,
/// zero phase: legal on both mixer paths.
fn grid_dictionary(k: usize, l: usize) -> Result<SpectralDictionary> {
    let freqs: Vec<f64> = (1..=k).map(|m| m as f64 / l as f64).collect();
    if freqs.last().is_some_and(|&f| f >= 0.5) {
        return Err(SdictError::Capacity { requested: k, available: l / 2 });
    }
    SpectralDictionary::from_derived(&vec![1.0; k], &freqs, &vec![0.0; k])
}

fn seeded_input(l: usize, d: usize, rng: &mut ChaCha8Rng) -> RMatrix {
    let mut x = RMatrix::zeros(l, d);
    for v in x.data.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    x
}

fn seeded_gate(d: usize, k: usize, rng: &mut ChaCha8Rng) -> CMatrix {
    let mut g = CMatrix::zeros(d, k);
    for v in g.data.iter_mut() {
        *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    }
    g
}

fn median_ns(mut samples: Vec<u64>) -> u64 {
    samples.sort_unstable();
    samples[samples.len() / 2]
}

/// Time one operator at one length: 2 warmups, then the median of
/// `cfg.reps` runs. Returns None when attention exceeds its score budget.
fn time_operator(op: Operator, l: usize, cfg: &BenchConfig) -> Result<Option<u64>> {
    let d = cfg.dim;
    let k = cfg.atoms;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (l as u64) << 3 ^ op as u64);
    let x = seeded_input(l, d, &mut rng);

    let mut run: Box<dyn FnMut() -> Result<RMatrix>> = match op {
        Operator::Attention => {
            let w = AttentionWeights::seeded(d, cfg.seed);
            let budget = cfg.score_budget_mb * 1024 * 1024;
            match attention_forward(&x, &w, Some(budget)) {
                Err(SdictError::Capacity { .. }) => return Ok(None),
                Err(e) => return Err(e),
                Ok(_) => {}
            }
            Box::new(move || attention_forward(&x, &w, Some(budget)))
        }
        Operator::SdictDense | Operator::SdictFft => {
            let path = if op == Operator::SdictDense {
                MixerPath::Dense
            } else {
                MixerPath::FftGrid
            };
            let mixer = SDictMixer::new(
                grid_dictionary(k, l)?,
                seeded_gate(d, k, &mut rng),
                PhaseBias::zeros(l, k),
                path,
                crate::linalg::DEFAULT_RIDGE,
            )?;
            Box::new(move || sdict_forward(&mixer, &x))
        }
    };

    for _ in 0..cfg.warmups {
        run()?;
    }
    let mut samples = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let t0 = Instant::now();
        let y = run()?;
        samples.push(t0.elapsed().as_nanos() as u64);
        debug_assert!(y.is_finite());
    }
    Ok(Some(median_ns(samples)))
}

/// One record per (operator, length): analytic counters always, wall time
/// unless the operator refused the length.
pub fn run_grid(cfg: &BenchConfig, operators: &[Operator]) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(operators.len() * cfg.lengths.len());
    for &op in operators {
        for &l in &cfg.lengths {
            let wall_ns = time_operator(op, l, cfg)?;
            records.push(BenchRecord {
                operator: op,
                l,
                d: cfg.dim,
                k: cfg.atoms,
                wall_ns,
                flops: flops_for(op, l, cfg.dim, cfg.atoms),
                activation_floats: count_activation_floats(op, l, cfg.dim, cfg.atoms),
            });
        }
    }
    Ok(records)
}

/// Least-squares slope of log(t) vs log(l). Demands at least 4 points
/// spanning at least 8x in l; anything less cannot pin an exponent.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 4 {
        return Err(SdictError::Config(format!(
            "slope fit needs >= 4 points, got {}",
            points.len()
        )));
    }
    let lmin = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let lmax = points.iter().map(|p| p.0).fold(0.0f64, f64::max);
    if lmax < 8.0 * lmin {
        return Err(SdictError::Config(format!(
            "slope fit needs an 8x length span, got {lmin}..{lmax}"
        )));
    }
    if points.iter().any(|&(l, t)| l <= 0.0 || t <= 0.0) {
        return Err(SdictError::Config("slope fit needs positive lengths and times".into()));
    }
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(l, t) in points {
        let x = l.ln();
        let y = t.ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    Ok((n * sxy - sx * sy) / (n * sxx - sx * sx))
}

/// Slope of one operator's timed records; OOM rows are excluded.
pub fn slope_for(records: &[BenchRecord], op: Operator) -> Result<f64> {
    let points: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.operator == op)
        .filter_map(|r| r.wall_ns.map(|t| (r.l as f64, t as f64)))
        .collect();
    fit_slope(&points)
}

/// CSV with a thread-count comment line and a pinned header. OOM rows write
/// the literal "OOM" in the wall_ns column.
pub fn write_csv(path: &Path, records: &[BenchRecord], threads: usize) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# threads={threads}\n"));
    out.push_str("operator,L,d,K,wall_ns,flops,activation_floats\n");
    for r in records {
        let wall = r.wall_ns.map_or("OOM".to_string(), |w| w.to_string());
        out.push_str(&format!(
            "{},{},{},{},{wall},{},{}\n",
            r.operator, r.l, r.d, r.k, r.flops, r.activation_floats
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Summary JSON: fitted wall-time slope per operator (null where the grid
/// cannot support a fit) plus the record count.
pub fn write_summary(path: &Path, records: &[BenchRecord], threads: usize) -> Result<()> {
    let mut slopes = serde_json::Map::new();
    for op in ALL_OPERATORS {
        let v = match slope_for(records, op) {
            Ok(s) => serde_json::json!(s),
            Err(_) => serde_json::Value::Null,
        };
        slopes.insert(op.to_string(), v);
    }
    let doc = serde_json::json!({
        "threads": threads,
        "records": records.len(),
        "slopes": slopes,
    });
    std::fs::write(path, serde_json::to_string_pretty(&doc).unwrap())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_laws_fit_exactly() {
        let quad: Vec<(f64, f64)> =
            [256.0f64, 512.0, 1024.0, 2048.0, 4096.0].iter().map(|&l| (l, 3.0 * l * l)).collect();
        assert!((fit_slope(&quad).unwrap() - 2.0).abs() < 1e-6);

        let flat: Vec<(f64, f64)> =
            [256.0f64, 512.0, 1024.0, 2048.0].iter().map(|&l| (l, 7.0)).collect();
        assert!(fit_slope(&flat).unwrap().abs() < 1e-9);
    }

    #[test]
    fn l_log_l_fits_inside_the_linear_band() {
        let pts: Vec<(f64, f64)> = (9..=14)
            .map(|e| {
                let l = (1usize << e) as f64;
                (l, 5.0 * l * l.log2())
            })
            .collect();
        let s = fit_slope(&pts).unwrap();
        assert!((1.0..=1.35).contains(&s), "slope {s}");
    }

    #[test]
    fn slope_fit_rejects_thin_data() {
        let three: Vec<(f64, f64)> =
            [512.0f64, 1024.0, 4096.0].iter().map(|&l| (l, l)).collect();
        assert!(fit_slope(&three).is_err());
        let narrow: Vec<(f64, f64)> =
            [512.0f64, 600.0, 700.0, 800.0].iter().map(|&l| (l, l)).collect();
        assert!(fit_slope(&narrow).is_err());
    }

    #[test]
    fn activation_counters_scale_as_advertised() {
        let ratio = |op, d, k| {
            count_activation_floats(op, 2048, d, k) as f64
                / count_activation_floats(op, 1024, d, k) as f64
        };
        // Attention doubles into ~4x (score matrix); both mixer paths ~2x.
        assert!((3.6..=4.4).contains(&ratio(Operator::Attention, 64, 16)));
        assert!((1.9..=2.1).contains(&ratio(Operator::SdictDense, 64, 16)));
        assert!((1.9..=2.1).contains(&ratio(Operator::SdictFft, 64, 16)));
        // The attention count is the score matrix plus linear terms, exactly.
        assert_eq!(
            count_activation_floats(Operator::Attention, 1024, 64, 16),
            1024 * 1024 + 3 * 1024 * 64
        );
        for op in ALL_OPERATORS {
            assert_eq!(count_activation_floats(op, 0, 64, 16), 0);
        }
    }

    fn tiny_cfg(lengths: Vec<usize>) -> BenchConfig {
        BenchConfig {
            lengths,
            dim: 16,
            atoms: 8,
            reps: 5,
            warmups: 2,
            score_budget_mb: 256,
            threads: 1,
            seed: 5,
        }
    }

    #[test]
    fn single_length_grid_gives_one_record_per_operator() {
        let records = run_grid(&tiny_cfg(vec![256]), &ALL_OPERATORS).unwrap();
        assert_eq!(records.len(), 3);
        for r in &records {
            assert_eq!(r.l, 256);
            assert!(r.wall_ns.unwrap() > 0);
            assert_eq!(r.flops, flops_for(r.operator, r.l, r.d, r.k));
        }
        // The attention record's counter is the standalone formula.
        let att = records.iter().find(|r| r.operator == Operator::Attention).unwrap();
        assert_eq!(att.flops, attention_flops(256, 16));
    }

    #[test]
    fn oom_rows_flag_and_continue() {
        // A 1 MB budget refuses the 512-score matrix (2 MB) but the
        // sdict rows still time normally.
        let mut cfg = tiny_cfg(vec![512, 1024]);
        cfg.score_budget_mb = 1;
        let records = run_grid(&cfg, &ALL_OPERATORS).unwrap();
        assert_eq!(records.len(), 6);
        for r in &records {
            if r.operator == Operator::Attention {
                assert!(r.wall_ns.is_none(), "L={} should be OOM", r.l);
                assert!(r.flops > 0, "counters stay analytic on OOM rows");
            } else {
                assert!(r.wall_ns.is_some());
            }
        }
        assert!(slope_for(&records, Operator::Attention).is_err());
    }

    #[test]
    fn csv_layout_is_pinned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.csv");
        let records = vec![
            BenchRecord {
                operator: Operator::SdictFft,
                l: 512,
                d: 64,
                k: 32,
                wall_ns: Some(123),
                flops: 456,
                activation_floats: 789,
            },
            BenchRecord {
                operator: Operator::Attention,
                l: 8192,
                d: 64,
                k: 32,
                wall_ns: None,
                flops: 11,
                activation_floats: 22,
            },
        ];
        write_csv(&path, &records, 1).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# threads=1");
        assert_eq!(lines[1], "operator,L,d,K,wall_ns,flops,activation_floats");
        assert_eq!(lines[2], "sdict_fft,512,64,32,123,456,789");
        assert_eq!(lines[3], "attention,8192,64,32,OOM,11,22");
    }

    #[test]
    fn summary_slopes_match_a_direct_refit() {
        let mut records = Vec::new();
        for e in 9..=13 {
            let l = 1usize << e;
            records.push(BenchRecord {
                operator: Operator::SdictFft,
                l,
                d: 64,
                k: 32,
                wall_ns: Some((500 * l as u64) * (e as u64)),
                flops: 0,
                activation_floats: 0,
            });
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.json");
        write_summary(&path, &records, 1).unwrap();
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let want = slope_for(&records, Operator::SdictFft).unwrap();
        let got = doc["slopes"]["sdict_fft"].as_f64().unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!(doc["slopes"]["attention"].is_null(), "no attention rows, no slope");
    }
}
