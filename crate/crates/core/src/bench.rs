//! Wall-clock and multiply-count comparison of the ways to apply an adapted
//! layer.

use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::adapter::{AdaptedLinear, AdapterShape, KarstAdapter, KronKernel, MergedLinear};
use crate::error::{KarstError, Result};
use crate::kron;
use crate::numerics::{gaussian_matrix, gaussian_vector, DenseVector, SeededRng};
use crate::rescale::RescaleParams;
use crate::training::model::random_base_layer;

pub const MIN_REPS: usize = 30;

/// Merged-to-plain time ratio above which the report carries a warning.
pub const MERGED_RATIO_WARN: f64 = 1.05;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub path: &'static str,
    pub median_ns: f64,
    pub flops: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub shape: AdapterShape,
    pub reps: usize,
    pub batch: usize,
    pub rows: Vec<BenchRow>,
    /// Structured multiply count equals the closed form summed over kernels.
    pub flop_identity: bool,
    pub merged_over_plain: f64,
    pub warnings: Vec<String>,
}

impl BenchReport {
    pub fn row(&self, path: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.path == path)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let s = &self.shape;
        writeln!(
            w,
            "# shape: d_in={} d_out={} m={} r={} n={} reps={} batch={}",
            s.d_in, s.d_out, s.m, s.r, s.n_kernels, self.reps, self.batch
        )?;
        writeln!(w, "path,median_ns_per_apply,flops")?;
        for r in &self.rows {
            writeln!(w, "{},{:.1},{}", r.path, r.median_ns, r.flops)?;
        }
        Ok(())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Layer with every trainable factor random, so no path can shortcut zeros.
pub fn random_trained_layer(rng: &mut SeededRng, shape: AdapterShape) -> Result<AdaptedLinear> {
    let (w0, b0) = random_base_layer(rng, shape.d_in, shape.d_out)?;
    let kernels = (0..shape.n_kernels)
        .map(|_| {
            Ok(KronKernel {
                c: gaussian_matrix(rng, shape.m, shape.m, 1.0)?,
                a: gaussian_matrix(rng, shape.block_in(), shape.r, 0.1)?,
                b: gaussian_matrix(rng, shape.r, shape.block_out(), 0.1)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let adapter = KarstAdapter::from_parts(shape, rng.seed(), kernels)?;
    let rescale = RescaleParams::new(gaussian_vector(rng, shape.d_out, 0.1)?, gaussian_vector(rng, shape.d_out, 0.1)?)?;
    AdaptedLinear::new(w0, Some(b0), adapter, rescale)
}

/// Times (a) ΔW materialized then applied, (b) the structured adapter apply,
/// (c) the merged affine layer and (d) the plain frozen layer. The paths are
/// interleaved within each repetition so drift hits all of them alike.
pub fn run(shape: AdapterShape, reps: usize, batch: usize, seed: u64) -> Result<BenchReport> {
    if reps < MIN_REPS {
        return Err(KarstError::InvalidArgument(format!("need at least {MIN_REPS} repetitions, got {reps}")));
    }
    if batch == 0 {
        return Err(KarstError::InvalidArgument("batch must be at least 1".into()));
    }
    let mut rng = SeededRng::new(seed);
    let layer = random_trained_layer(&mut rng, shape)?;
    let delta = layer.adapter().materialize();
    let merged = layer.merge()?;
    let plain = MergedLinear {
        weight: layer.w0().clone(),
        bias: layer.bias0().cloned(),
    };
    let inputs: Vec<DenseVector> = (0..batch)
        .map(|_| gaussian_vector(&mut rng, shape.d_in, 1.0))
        .collect::<Result<_>>()?;

    let per_kernel = kron::structured_flops(shape.m, shape.m, shape.block_in(), shape.block_out(), Some(shape.r));
    let structured_flops = layer.adapter().apply_flops();
    let affine_flops = shape.d_in * shape.d_out;

    type Path<'a> = (&'static str, Box<dyn Fn(&DenseVector) -> Result<DenseVector> + 'a>);
    let paths: Vec<Path> = vec![
        ("materialized", Box::new(|x| delta.t_matvec(x))),
        ("structured", Box::new(|x| layer.adapter().apply(x))),
        ("merged", Box::new(|x| merged.forward(x))),
        ("plain", Box::new(|x| plain.forward(x))),
    ];
    let mut samples = vec![Vec::with_capacity(reps); paths.len()];
    for rep in 0..reps + reps / 5 {
        for (i, (_, f)) in paths.iter().enumerate() {
            let start = Instant::now();
            for x in &inputs {
                black_box(f(black_box(x))?);
            }
            let ns = start.elapsed().as_nanos() as f64 / batch as f64;
            // The first fifth is warm-up.
            if rep >= reps / 5 {
                samples[i].push(ns);
            }
        }
    }
    let flops = [affine_flops, structured_flops, affine_flops, affine_flops];
    let rows: Vec<BenchRow> = paths
        .iter()
        .zip(samples)
        .zip(flops)
        .map(|(((path, _), s), flops)| BenchRow {
            path,
            median_ns: median(s),
            flops,
        })
        .collect();

    let merged_over_plain = rows[2].median_ns / rows[3].median_ns;
    let mut warnings = Vec::new();
    if merged_over_plain > MERGED_RATIO_WARN {
        warnings.push(format!(
            "merged apply is {merged_over_plain:.3}x the plain layer (soft limit {MERGED_RATIO_WARN})"
        ));
    }
    Ok(BenchReport {
        shape,
        reps,
        batch,
        flop_identity: structured_flops == shape.n_kernels * per_kernel,
        merged_over_plain,
        rows,
        warnings,
    })
}
