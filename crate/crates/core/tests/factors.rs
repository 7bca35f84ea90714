use latent_evi::bss::{self, SeriesMatrix};
use latent_evi::evt::Method;
use latent_evi::rolling::{self, DatedTable, TailSide};
use latent_evi::simulate::{self, Seed};
use nalgebra::DMatrix;

/// Four AR(1) sources with distinct coefficients, mixed by a known matrix.
fn synthetic(n: usize) -> (SeriesMatrix, DMatrix<f64>) {
    let seed = Seed::new(77);
    let cols: Vec<Vec<f64>> = [0.9, 0.5, -0.3, -0.8]
        .iter()
        .enumerate()
        .map(|(k, &phi)| simulate::ar1_sample(phi, n, &mut seed.rng(0, k as u64)).unwrap())
        .collect();
    let z = SeriesMatrix::from_columns(&cols).unwrap();
    let omega = DMatrix::from_row_slice(4, 4, &[
        1.0, 0.5, 0.0, 0.2, //
        0.3, 1.0, 0.4, 0.0, //
        0.0, 0.2, 1.0, 0.6, //
        0.5, 0.0, 0.1, 1.0,
    ]);
    (z.transform(&omega).unwrap(), omega)
}

#[test]
fn loadings_recover_mixing_up_to_sign_permutation_and_scale() {
    let (x, omega) = synthetic(20_000);
    let fa = rolling::factor_analysis(&x, &rolling::default_unmixer()).unwrap();
    assert!(fa.reconstruction_error(&x) < 1e-8);
    // Γ̂Ω close to a scaled signed permutation <=> loadings ≈ Ω up to PJD.
    let md = bss::md_index(&(fa.loadings.clone().try_inverse().unwrap() * &omega));
    assert!(md < 0.05, "md = {md}");
}

#[test]
fn csv_prices_to_traces() {
    let (x, _) = synthetic(400);
    let mut text = String::from("date,a,b,c,d\n");
    let start = chrono::NaiveDate::from_ymd_opt(2010, 1, 1).unwrap();
    let mut level = [100.0f64; 4];
    for t in 0..x.n() {
        let d = start + chrono::Days::new(t as u64);
        for (k, l) in level.iter_mut().enumerate() {
            *l *= (0.01 * x.data()[(t, k)]).exp();
        }
        text.push_str(&format!("{d},{},{},{},{}\n", level[0], level[1], level[2], level[3]));
    }
    let table = DatedTable::from_reader(text.as_bytes()).unwrap();
    let returns = table.to_returns().unwrap();
    assert_eq!(returns.columns[0].len(), 399);
    let z = rolling::standardize(&returns.columns[0], true).unwrap();
    let left = rolling::rolling_evi(&z, 60, 16, TailSide::Left, Method::Hill).unwrap();
    let right = rolling::rolling_evi(&z, 60, 16, TailSide::Right, Method::Hill).unwrap();
    assert_eq!(left.len(), 399 - 60 + 1);
    let mut buf = Vec::new();
    rolling::write_traces(
        &mut buf,
        Some(&returns.dates),
        &[("a_left".into(), left), ("a_right".into(), right)],
    )
    .unwrap();
    let out = String::from_utf8(buf).unwrap();
    assert!(out.starts_with("center_index,date,a_left,a_right\n29,2010-01-31,"));
    assert_eq!(out.lines().count(), 1 + 340);
}

#[test]
fn traces_are_scale_invariant() {
    let (x, _) = synthetic(300);
    let col = x.column(1);
    let scaled: Vec<f64> = col.iter().map(|v| 42.0 * v).collect();
    for method in [Method::Hill, Method::Moment] {
        let a = rolling::rolling_evi(&col, 60, 16, TailSide::Abs, method).unwrap();
        let b = rolling::rolling_evi(&scaled, 60, 16, TailSide::Abs, method).unwrap();
        for (u, v) in a.estimates.iter().zip(&b.estimates) {
            match (u, v) {
                (Some(u), Some(v)) => assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0)),
                (None, None) => {}
                other => panic!("{other:?}"),
            }
        }
    }
}
