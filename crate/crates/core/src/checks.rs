//! Finite-difference verification of every graph primitive, both mixers and
//! the full distillation objective.
//!
//! Each primitive is reduced to a scalar as `sum(op(inputs) ⊙ R)` with a
//! random `R`, so every output coordinate contributes to the checked gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::distill::train::{collect_grads, objective, Sample, TeacherTargets};
use crate::distill::{stage_partition, DistillConfig, MaskSpec, MaskStrategy};
use crate::error::Result;
use crate::mixers::{self, AttentionParams, Mamba2Params};
use crate::model::{MixerKind, Model, ModelConfig};
use crate::tensor::gradcheck::{finite_diff_grad, max_relative_error};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Normal entries pushed at least `gap` away from each point in `avoid`.
fn randn_avoiding(rng: &mut impl Rng, shape: &[usize], avoid: &[f64], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = StandardNormal.sample(rng);
            if avoid.iter().all(|a| (v - a).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn randn_rows_with_spread(rng: &mut impl Rng, m: usize, k: usize, min_std: f64) -> Tensor {
    let mut data = Vec::with_capacity(m * k);
    for _ in 0..m {
        let row = loop {
            let row: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
            let mean = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k as f64;
            if var.sqrt() >= min_std {
                break row;
            }
        };
        data.extend(row);
    }
    Tensor::from_parts(vec![m, k], data)
}

fn dim(rng: &mut impl Rng) -> usize {
    rng.random_range(1..=6)
}

/// Compares backward against central differences for `build` at `inputs`.
pub fn check_op(
    name: &str,
    inputs: &[Tensor],
    build: &Build,
    rng: &mut impl Rng,
    eps: f64,
) -> Result<CheckResult> {
    let shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = build(&mut g, &vars)?;
        g.shape(y).to_vec()
    };
    let weights = randn(rng, &shape);
    let reduce = |g: &mut Graph, y: Var| -> Result<Var> {
        let r = g.constant(weights.clone());
        let p = g.mul(y, r)?;
        g.sum(p)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &vars)?;
    let loss = reduce(&mut g, y)?;
    g.backward(loss)?;
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| g.grad(v).unwrap_or(&[]).to_vec()).collect();

    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let mut failure = None;
    let numeric = finite_diff_grad(
        |p| {
            let mut g = Graph::new();
            let mut offset = 0;
            let vars: Vec<Var> = inputs
                .iter()
                .map(|t| {
                    let part = p[offset..offset + t.numel()].to_vec();
                    offset += t.numel();
                    g.constant(Tensor::from_parts(t.shape().to_vec(), part))
                })
                .collect();
            match build(&mut g, &vars).and_then(|y| reduce(&mut g, y)) {
                Ok(l) => g.value(l).item(),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &flat,
        eps,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_err: max_relative_error(&analytic, &numeric),
    })
}

/// One randomized check per primitive and mixer.
pub fn primitive_checks(seed: u64, eps: f64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = Vec::new();
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));

    let mut run = |name: &str, inputs: Vec<Tensor>, build: &Build, rng: &mut ChaCha8Rng| -> Result<()> {
        out.push(check_op(name, &inputs, build, rng, eps)?);
        Ok(())
    };

    let (a, b) = (randn(rng, &[m, k]), randn(rng, &[k, n]));
    run("matmul", vec![a, b], &|g, v| g.matmul(v[0], v[1]), rng)?;
    run("transpose", vec![randn(rng, &[m, k])], &|g, v| g.transpose(v[0]), rng)?;
    let (x, y) = (randn(rng, &[m, k]), randn(rng, &[m, k]));
    run("add", vec![x.clone(), y.clone()], &|g, v| g.add(v[0], v[1]), rng)?;
    run("sub", vec![x.clone(), y.clone()], &|g, v| g.sub(v[0], v[1]), rng)?;
    run("mul", vec![x.clone(), y], &|g, v| g.mul(v[0], v[1]), rng)?;
    run(
        "mul_scalar_broadcast",
        vec![randn(rng, &[1]), x.clone()],
        &|g, v| g.mul(v[0], v[1]),
        rng,
    )?;
    let c: f64 = rng.random_range(-2.0..2.0);
    run("scale", vec![x.clone()], &move |g, v| g.scale(v[0], c), rng)?;
    run("exp", vec![x.clone()], &|g, v| g.exp(v[0]), rng)?;
    let pos = Tensor::from_parts(
        vec![m, k],
        (0..m * k).map(|_| rng.random_range(0.5..3.0)).collect(),
    );
    run("sqrt", vec![pos], &|g, v| g.sqrt(v[0]), rng)?;
    run("gelu", vec![x.clone()], &|g, v| g.gelu(v[0]), rng)?;
    run("softplus", vec![x.clone()], &|g, v| g.softplus(v[0]), rng)?;
    run("sum", vec![x.clone()], &|g, v| g.sum(v[0]), rng)?;
    run("mean", vec![x.clone()], &|g, v| g.mean(v[0]), rng)?;
    run("softmax_rows", vec![x.clone()], &|g, v| g.softmax_rows(v[0]), rng)?;
    run("add_row", vec![x.clone(), randn(rng, &[k])], &|g, v| g.add_row(v[0], v[1]), rng)?;
    run("mul_row", vec![x.clone(), randn(rng, &[k])], &|g, v| g.mul_row(v[0], v[1]), rng)?;
    // Central differences lose accuracy as a row's spread shrinks (the third
    // derivative grows like 1/σ³), so rows are drawn with σ ≥ 0.5.
    let wide = randn_rows_with_spread(rng, m, k.max(2), 0.5);
    run("layer_norm_rows", vec![wide], &|g, v| g.layer_norm_rows(v[0]), rng)?;
    run("normalize_rows", vec![x.clone()], &|g, v| g.normalize_rows(v[0]), rng)?;
    let rows: Vec<usize> = (0..rng.random_range(1..=m)).map(|_| rng.random_range(0..m)).collect();
    let gather = rows.clone();
    run("gather_rows", vec![x.clone()], &move |g, v| g.gather_rows(v[0], &gather), rng)?;
    run(
        "replace_rows",
        vec![x.clone(), randn(rng, &[k])],
        &move |g, v| g.replace_rows(v[0], v[1], &rows),
        rng,
    )?;
    let extra = dim(rng);
    run(
        "concat_rows",
        vec![x.clone(), randn(rng, &[extra, k])],
        &|g, v| g.concat_rows(v[0], v[1]),
        rng,
    )?;
    run("row_mean", vec![x.clone()], &|g, v| g.row_mean(v[0]), rng)?;
    let beta: f64 = rng.random_range(0.5..1.5);
    let resid = randn_avoiding(rng, &[m, k], &[-beta, beta], 1e-3);
    run("smooth_l1", vec![resid], &move |g, v| g.smooth_l1(v[0], beta), rng)?;
    run("reshape", vec![x.clone()], &move |g, v| g.reshape(v[0], &[k, m]), rng)?;
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
    run(
        "cross_entropy",
        vec![x.clone()],
        &move |g, v| g.cross_entropy(v[0], &labels),
        rng,
    )?;
    run(
        "fan_out",
        vec![x.clone()],
        &|g, v| {
            let sq = g.mul(v[0], v[0])?;
            let a = g.sum(sq)?;
            let b = g.sum(v[0])?;
            g.add(a, b)
        },
        rng,
    )?;

    let (l, d) = (dim(rng), rng.random_range(2..=4));
    let alpha = Tensor::scalar(rng.random_range(0.0..2.0));
    run(
        "mamba2_scan",
        vec![
            randn(rng, &[l, d]),
            randn(rng, &[l, d]),
            randn(rng, &[l, d]),
            randn(rng, &[l, 1]),
            alpha,
        ],
        &|g, v| g.gated_scan(v[0], v[1], v[2], v[3], v[4]),
        rng,
    )?;

    let xs = randn(rng, &[l, d]);
    let ap = AttentionParams::init(d, rng);
    let scale = |t: &Tensor| Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * 20.0).collect());
    run(
        "attention",
        vec![xs.clone(), scale(&ap.w_q), scale(&ap.w_k), scale(&ap.w_v)],
        &|g, v| {
            let p = AttentionParams {
                w_q: v[1],
                w_k: v[2],
                w_v: v[3],
            };
            mixers::attention(g, v[0], &p)
        },
        rng,
    )?;
    let mp = Mamba2Params::init(d, rng);
    run(
        "mamba2",
        vec![
            xs,
            scale(&mp.w_q),
            scale(&mp.w_k),
            scale(&mp.w_v),
            scale(&mp.w_delta),
            mp.alpha.clone(),
        ],
        &|g, v| {
            let p = Mamba2Params {
                w_q: v[1],
                w_k: v[2],
                w_v: v[3],
                w_delta: v[4],
                alpha: v[5],
            };
            mixers::mamba2(g, v[0], &p)
        },
        rng,
    )?;
    Ok(out)
}

/// Two-block teacher and student on 8×8 images with 2×2 patches.
fn objective_models(rng: &mut impl Rng) -> Result<(Model, Model)> {
    let teacher_cfg = ModelConfig {
        embed_dim: 5,
        mlp_dim: 7,
        num_blocks: 2,
        patch_size: 2,
        image_size: 8,
        channels: 1,
        mixer: MixerKind::Attention,
        use_class_token: true,
    };
    let student_cfg = ModelConfig {
        embed_dim: 4,
        mlp_dim: 6,
        mixer: MixerKind::Mamba2,
        ..teacher_cfg.clone()
    };
    let mut teacher = Model::teacher(&teacher_cfg, rng)?;
    let mut student = Model::student(&student_cfg, teacher_cfg.embed_dim, rng)?;
    // Larger weights than the training init so every path carries signal.
    let mut inflate = |_: &str, t: &mut Tensor| {
        for v in t.data_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += 0.3 * e;
        }
    };
    teacher.for_each_mut(&mut inflate);
    student.for_each_mut(&mut inflate);
    Ok((teacher, student))
}

/// Gradient of the full objective (activation matching plus masked
/// prediction, two stages, mask ratio 0.5) with respect to every student
/// parameter.
pub fn objective_check(seed: u64, eps: f64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (teacher, student) = objective_models(&mut rng)?;
    let cfg = DistillConfig {
        stages: 2,
        mask_ratio: 0.5,
        ..DistillConfig::default()
    };
    let stages = stage_partition(teacher.config.num_blocks, student.config.num_blocks, cfg.stages)?;
    let n = teacher.config.num_patches();
    let images: Vec<Tensor> = (0..2).map(|_| randn(&mut rng, &[n, teacher.config.patch_dim()])).collect();
    let targets = images
        .iter()
        .map(|p| {
            teacher
                .forward_values(p, None, &stages.teacher_taps)
                .map(|o| TeacherTargets {
                    stages: o.stages,
                    output: o.output,
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<Sample> = images
        .iter()
        .zip(&targets)
        .map(|(patches, targets)| Sample { patches, targets })
        .collect();
    let masks = (0..batch.len())
        .map(|_| {
            crate::distill::mask::sample_mask(n, cfg.mask_ratio, MaskStrategy::TokenWise, &mut rng)
        })
        .collect::<Result<Vec<MaskSpec>>>()?;

    let mut g = Graph::new();
    let bound = student.bind(&mut g, true);
    let obj = objective(&mut g, &bound, &batch, &masks, &cfg, &stages)?;
    g.backward(obj.total)?;
    let analytic: Vec<f64> = collect_grads(&g, &bound).into_iter().flatten().collect();
    drop(g);

    let mut flat = Vec::new();
    student.for_each(&mut |_, t| flat.extend_from_slice(t.data()));
    let mut failure = None;
    let numeric = finite_diff_grad(
        |p| {
            let mut probe = student.clone();
            let mut offset = 0;
            probe.for_each_mut(&mut |_, t| {
                let len = t.numel();
                t.data_mut().copy_from_slice(&p[offset..offset + len]);
                offset += len;
            });
            let mut g = Graph::new();
            let bound = probe.bind(&mut g, false);
            match objective(&mut g, &bound, &batch, &masks, &cfg, &stages) {
                Ok(o) => g.value(o.total).item(),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &flat,
        eps,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(CheckResult {
        name: "distillation_objective".into(),
        max_rel_err: max_relative_error(&analytic, &numeric),
    })
}

/// Every primitive check followed by the objective check.
pub fn run_all(seed: u64, eps: f64) -> Result<Vec<CheckResult>> {
    let mut out = primitive_checks(seed, eps)?;
    out.push(objective_check(seed, eps)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::DEFAULT_EPS;

    #[test]
    fn primitives_pass_over_100_seeds() {
        let mut worst = CheckResult {
            name: String::new(),
            max_rel_err: 0.0,
        };
        for seed in 0..100 {
            for r in primitive_checks(seed, DEFAULT_EPS).unwrap() {
                if r.max_rel_err > worst.max_rel_err {
                    worst = r;
                }
            }
        }
        assert!(worst.max_rel_err < DEFAULT_TOLERANCE, "{worst:?}");
    }

    #[test]
    fn every_graph_op_is_covered() {
        let names: Vec<String> = primitive_checks(0, DEFAULT_EPS)
            .unwrap()
            .into_iter()
            .map(|r| r.name)
            .collect();
        for op in [
            "matmul", "transpose", "add", "sub", "mul", "scale", "exp", "sqrt", "gelu", "softplus",
            "sum", "mean", "softmax_rows", "add_row", "mul_row", "layer_norm_rows", "normalize_rows",
            "gather_rows", "replace_rows", "concat_rows", "row_mean", "smooth_l1", "reshape",
            "cross_entropy", "mamba2_scan",
        ] {
            assert!(names.iter().any(|n| n == op), "{op} not checked");
        }
    }

    #[test]
    fn objective_gradient_matches() {
        let r = objective_check(0, DEFAULT_EPS).unwrap();
        assert!(r.max_rel_err < DEFAULT_TOLERANCE, "{r:?}");
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // sum(x⊙x) checked against a build that detaches one factor.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn(&mut rng, &[3, 3]);
        let r = check_op(
            "broken",
            &[x.clone()],
            &|g, v| {
                let c = g.constant(g.value(v[0]).detached());
                g.mul(v[0], c)
            },
            &mut rng,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(r.max_rel_err > 1e-3);
    }
}
