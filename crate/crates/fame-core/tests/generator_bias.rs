//! Bias-injection oracle: an independent least-squares linear classifier fit
//! per modality must see the degraded subgroup, and the frozen-probe pipeline
//! must rank the biased modality as most disparate.

use fame_core::cohort::{
    generate_cohort, Attribute, BiasSpec, Cohort, GeneratorConfig, ModalityDef,
};
use fame_core::model::{Batch, FusionMode, FusionState};

fn biased_cfg(n: usize, seed: u64, noise: f64) -> GeneratorConfig {
    GeneratorConfig {
        n,
        modalities: vec![
            ModalityDef { name: "demographic".into(), width: 8 },
            ModalityDef { name: "structured".into(), width: 16 },
            ModalityDef { name: "notes".into(), width: 16 },
        ],
        signal: vec![1.5, 1.5, 1.5],
        bias: vec![BiasSpec {
            modality: "demographic".into(),
            attribute: Attribute::Ethnicity,
            subgroup: "Black".into(),
            noise_strength: noise,
        }],
        seed,
        ..GeneratorConfig::default()
    }
}

/// Solve (X^T X + ridge I) w = X^T y by Gaussian elimination.
fn lstsq(xs: &[Vec<f64>], ys: &[f64]) -> Vec<f64> {
    let d = xs[0].len() + 1; // bias column
    let mut ata = vec![vec![0.0; d]; d];
    let mut aty = vec![0.0; d];
    for (x, y) in xs.iter().zip(ys) {
        let mut row = x.clone();
        row.push(1.0);
        for i in 0..d {
            aty[i] += row[i] * y;
            for j in 0..d {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    for (i, row) in ata.iter_mut().enumerate() {
        row[i] += 1e-6;
    }
    // forward elimination with partial pivoting
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&a, &b| ata[a][col].abs().partial_cmp(&ata[b][col].abs()).unwrap())
            .unwrap();
        ata.swap(col, pivot);
        aty.swap(col, pivot);
        let diag = ata[col][col];
        let pivot_row = ata[col].clone();
        for r in (col + 1)..d {
            let factor = ata[r][col] / diag;
            for (c, pv) in pivot_row.iter().enumerate().skip(col) {
                ata[r][c] -= factor * pv;
            }
            aty[r] -= factor * aty[col];
        }
    }
    let mut w = vec![0.0; d];
    for r in (0..d).rev() {
        let mut acc = aty[r];
        for c in (r + 1)..d {
            acc -= ata[r][c] * w[c];
        }
        w[r] = acc / ata[r][r];
    }
    w
}

/// Majority task label, ties positive, as +/-1.
fn aggregate_label(labels: &[u8]) -> f64 {
    let positives = labels.iter().filter(|l| **l == 1).count();
    if 2 * positives >= labels.len() {
        1.0
    } else {
        -1.0
    }
}

fn modality_error_rates(cohort: &Cohort, modality: &str) -> (f64, f64) {
    let xs: Vec<Vec<f64>> =
        cohort.records.iter().map(|r| r.modalities[modality].clone()).collect();
    let ys: Vec<f64> = cohort.records.iter().map(|r| aggregate_label(&r.labels)).collect();
    let w = lstsq(&xs, &ys);
    let mut wrong_total = 0usize;
    let mut black_total = 0usize;
    let mut black_wrong = 0usize;
    for (i, (x, y)) in xs.iter().zip(&ys).enumerate() {
        let score: f64 =
            x.iter().zip(&w[..x.len()]).map(|(a, b)| a * b).sum::<f64>() + w[x.len()];
        let wrong = (score >= 0.0) != (*y > 0.0);
        if wrong {
            wrong_total += 1;
        }
        if cohort.records[i].attrs.subgroup(Attribute::Ethnicity) == "Black" {
            black_total += 1;
            if wrong {
                black_wrong += 1;
            }
        }
    }
    let oer = wrong_total as f64 / cohort.len() as f64;
    let er_black = black_wrong as f64 / black_total as f64;
    (oer, er_black)
}

#[test]
fn least_squares_oracle_sees_injected_bias() {
    let cohort = generate_cohort(&biased_cfg(4000, 31, 3.0)).unwrap();
    let (oer_demo, black_demo) = modality_error_rates(&cohort, "demographic");
    assert!(
        black_demo > oer_demo,
        "demographic: ER_Black {black_demo} should exceed OER {oer_demo}"
    );
    // the unbiased modality shows no comparable gap
    let (oer_str, black_str) = modality_error_rates(&cohort, "structured");
    assert!(
        (black_demo - oer_demo) > (black_str - oer_str) + 0.05,
        "bias gap should concentrate in the demographic modality"
    );
}

#[test]
fn no_bias_means_comparable_subgroup_gaps() {
    let cohort = generate_cohort(&biased_cfg(4000, 32, 0.0)).unwrap();
    let (oer, black) = modality_error_rates(&cohort, "demographic");
    assert!((black - oer).abs() < 0.05, "OER {oer} vs ER_Black {black}");
}

#[test]
fn probes_rank_the_biased_modality_most_disparate() {
    let mut demo_total = 0.0;
    let mut structured_total = 0.0;
    for seed in 1..=5u64 {
        let cohort = generate_cohort(&biased_cfg(3000, seed, 3.0)).unwrap();
        let state = FusionState::init(
            &cohort.schema.modalities,
            8,
            16,
            cohort.schema.task_count,
            FusionMode::Fame,
            0.0,
            seed,
        )
        .unwrap();
        let ids: Vec<String> = cohort.records.iter().map(|r| r.id.clone()).collect();
        let batch = Batch::from_cohort(&cohort, &ids).unwrap();
        let eddi = state.probe_eddi(&batch, 0.5).unwrap();
        demo_total += eddi.per_modality[0];
        structured_total += eddi.per_modality[1];
    }
    assert!(
        demo_total > structured_total,
        "mean probe disparity over 5 seeds: demographic {} vs structured {}",
        demo_total / 5.0,
        structured_total / 5.0
    );
}
