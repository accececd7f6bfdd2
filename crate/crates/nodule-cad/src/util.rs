/// Render a finite f64 as the shortest fixed-point decimal that reparses to
/// the identical value, padded with trailing zeros to at least six
/// significant digits. Reparsing and re-rendering is byte-stable, which is
/// what the CSV round-trip guarantees rest on.
pub(crate) fn fmt_float(v: f64) -> String {
    assert!(v.is_finite(), "refusing to format non-finite value");
    if v == 0.0 {
        return "0.000000".into();
    }
    let mut exact: Option<(usize, String)> = None;
    for prec in 0..=340usize {
        let s = format!("{v:.prec$}");
        if s.parse::<f64>() == Ok(v) {
            exact = Some((prec, s));
            break;
        }
    }
    let (mut prec, mut s) = exact.expect("every f64 has a finite decimal expansion");
    while sig_digits(&s) < 6 {
        prec += 1;
        s = format!("{v:.prec$}");
    }
    s
}

/// Count significant digits of a plain decimal string: digits from the
/// first nonzero digit onward, ignoring sign and the decimal point.
fn sig_digits(s: &str) -> usize {
    let digits: Vec<u8> = s.bytes().filter(|b| b.is_ascii_digit()).collect();
    match digits.iter().position(|&d| d != b'0') {
        Some(first) => digits.len() - first,
        None => 0,
    }
}
