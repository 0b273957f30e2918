//! Randomized properties of the matching loss and an overfit-one-batch run.

use linearizer::distill::loss::{activation_map, activation_matching_loss, scope_rows, MatchingScope};
use linearizer::distill::mask::sample_mask;
use linearizer::distill::train::{stream_rng, tiny_config, Stream};
use linearizer::distill::{Distiller, MaskStrategy, Sample};
use linearizer::model::Model;
use linearizer::tensor::{matmul, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| Normal::new(0.0, 1.0).unwrap().sample(rng)).collect()).unwrap()
}

fn loss(teacher: &[Tensor], student: &[Tensor], rows: &[usize]) -> f64 {
    let t: Vec<_> = teacher.iter().map(|f| activation_map(f, rows).unwrap()).collect();
    let s: Vec<_> = student.iter().map(|f| activation_map(f, rows).unwrap()).collect();
    activation_matching_loss(&t, &s).unwrap()
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = randn(rng, &[d]).data().to_vec();
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    let mut data = vec![0.0; d * d];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            data[i * d + j] = c[i];
        }
    }
    Tensor::new(vec![d, d], data).unwrap()
}

fn instance(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<Tensor>, Vec<usize>) {
    let l = rng.random_range(3..=12);
    let k = rng.random_range(1..=3);
    let (dt, ds) = (rng.random_range(2..=6), rng.random_range(2..=6));
    let teacher = (0..k).map(|_| randn(rng, &[l, dt])).collect();
    let student = (0..k).map(|_| randn(rng, &[l, ds])).collect();
    let mut rows: Vec<usize> = (0..l).filter(|_| rng.random_bool(0.7)).collect();
    if rows.is_empty() {
        rows.push(0);
    }
    (teacher, student, rows)
}

#[test]
fn act_loss_ignores_positive_row_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let (teacher, student, rows) = instance(&mut rng);
        let base = loss(&teacher, &student, &rows);
        let scaled: Vec<Tensor> = student
            .iter()
            .map(|f| {
                let (l, d) = f.dims2().unwrap();
                let mut f = f.clone();
                for r in 0..l {
                    let c = rng.random_range(0.01..100.0);
                    f.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= c);
                }
                f
            })
            .collect();
        assert!((loss(&teacher, &scaled, &rows) - base).abs() < 1e-12);
    }
}

#[test]
fn act_loss_ignores_a_global_rotation_of_one_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..200 {
        let (teacher, student, rows) = instance(&mut rng);
        let base = loss(&teacher, &student, &rows);
        let d = student[0].shape()[1];
        let q = random_orthogonal(&mut rng, d);
        let rotated: Vec<Tensor> = student.iter().map(|f| matmul(f, &q).unwrap()).collect();
        assert!((loss(&teacher, &rotated, &rows) - base).abs() < 1e-12);
        let dt = teacher[0].shape()[1];
        let qt = random_orthogonal(&mut rng, dt);
        let rotated: Vec<Tensor> = teacher.iter().map(|f| matmul(f, &qt).unwrap()).collect();
        assert!((loss(&rotated, &student, &rows) - base).abs() < 1e-12);
    }
}

#[test]
fn visible_only_scope_does_not_see_masked_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (patches, offset) = (16, 1);
    let mut all_scope_moved = 0;
    for _ in 0..100 {
        let mask = sample_mask(patches, 0.5, MaskStrategy::TokenWise, &mut rng).unwrap();
        let teacher: Vec<Tensor> = (0..2).map(|_| randn(&mut rng, &[patches + offset, 5])).collect();
        let student: Vec<Tensor> = (0..2).map(|_| randn(&mut rng, &[patches + offset, 4])).collect();
        // Same visible rows, fresh content everywhere else.
        let resampled: Vec<Tensor> = student
            .iter()
            .map(|f| {
                let mut g = randn(&mut rng, f.shape());
                for &i in &mask.visible {
                    let r = i + offset;
                    g.data_mut()[r * 4..(r + 1) * 4].copy_from_slice(f.row(r));
                }
                g
            })
            .collect();
        let visible = scope_rows(MatchingScope::VisibleOnly, &mask, offset).unwrap();
        assert_eq!(
            loss(&teacher, &student, &visible).to_bits(),
            loss(&teacher, &resampled, &visible).to_bits()
        );
        let all = scope_rows(MatchingScope::All, &mask, offset).unwrap();
        if loss(&teacher, &student, &all) != loss(&teacher, &resampled, &all) {
            all_scope_moved += 1;
        }
    }
    assert_eq!(all_scope_moved, 100);
}

#[test]
fn one_repeated_batch_is_overfit_steadily() {
    let mut cfg = tiny_config();
    cfg.steps = 200;
    cfg.warmup_steps = 10;
    cfg.lr = 1e-3;
    let teacher = Model::teacher(&cfg.teacher_model(), &mut stream_rng(3, Stream::TeacherInit)).unwrap();
    let student = Model::student(&cfg.student_model(), cfg.teacher_dim, &mut stream_rng(3, Stream::StudentInit)).unwrap();
    let mut d = Distiller::new(teacher, student, cfg.distill()).unwrap();
    let data = linearizer::distill::data::synthetic_dataset(4, cfg.image_size, cfg.channels, cfg.patch_size, 9).unwrap();
    let targets: Vec<_> = data.patches.iter().map(|p| d.targets(p).unwrap()).collect();
    let batch: Vec<Sample> = data
        .patches
        .iter()
        .zip(&targets)
        .map(|(patches, targets)| Sample { patches, targets })
        .collect();
    let masks = d.sample_masks(batch.len(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let losses: Vec<f64> = (0..cfg.steps)
        .map(|_| d.train_step_with_masks(&batch, &masks).unwrap().loss)
        .collect();
    let after = &losses[cfg.warmup_steps..];
    let decreases = after.windows(2).filter(|w| w[1] < w[0]).count();
    let frac = decreases as f64 / (after.len() - 1) as f64;
    assert!(frac >= 0.9, "strict decreases in {frac:.3} of pairs; losses {losses:?}");
}
