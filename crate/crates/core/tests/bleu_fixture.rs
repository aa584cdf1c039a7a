//! BLEU against hand-counted fixtures and a naive reimplementation.

use flowseq_core::eval::{corpus_bleu, loo_bleu, multi_ref_bleu, pairwise_bleu, sentence_bleu};

fn read_tsv(name: &str) -> Vec<Vec<Vec<String>>> {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split('\t').map(|s| s.split_whitespace().map(String::from).collect()).collect())
        .collect()
}

/// Counts every n-gram by linear scans over slices.
fn naive_counts(hyp: &[String], refs: &[&[String]], n: usize) -> (usize, usize) {
    if hyp.len() < n {
        return (0, 0);
    }
    let grams: Vec<&[String]> = hyp.windows(n).collect();
    let mut seen: Vec<&[String]> = Vec::new();
    let mut matched = 0;
    for g in &grams {
        if seen.contains(g) {
            continue;
        }
        seen.push(g);
        let in_hyp = grams.iter().filter(|x| *x == g).count();
        let in_ref = refs.iter().map(|r| r.windows(n).filter(|x| x == g).count()).max().unwrap_or(0);
        matched += in_hyp.min(in_ref);
    }
    (matched, grams.len())
}

fn naive_bleu(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let (mut m, mut t) = ([0usize; 4], [0usize; 4]);
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rs) in hyps.iter().zip(refs) {
        let rs: Vec<&[String]> = rs.iter().map(|x| x.as_slice()).collect();
        for n in 1..=4 {
            let (a, b) = naive_counts(h, &rs, n);
            m[n - 1] += a;
            t[n - 1] += b;
        }
        c += h.len();
        let mut best = rs[0].len();
        for x in &rs {
            let (d, bd) = (x.len().abs_diff(h.len()), best.abs_diff(h.len()));
            if d < bd || (d == bd && x.len() < best) {
                best = x.len();
            }
        }
        r += best;
    }
    if c == 0 || m[0] == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        let p = if n > 0 && m[n] == 0 { 1.0 / (t[n] as f64 + 1.0) } else { m[n] as f64 / t[n] as f64 };
        log_p += p.ln() / 4.0;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * log_p.exp()
}

#[test]
fn corpus_fixture_matches_hand_counts() {
    let rows = read_tsv("bleu_corpus.tsv");
    let hyps: Vec<Vec<String>> = rows.iter().map(|r| r[0].clone()).collect();
    let refs: Vec<Vec<String>> = rows.iter().map(|r| r[1].clone()).collect();
    let rep = corpus_bleu(&hyps, &refs).unwrap();
    // matches (13, 8, 4, 1) over totals (15, 12, 9, 6); 15 hypothesis tokens, 16 reference tokens
    let want_p = [13.0 / 15.0, 8.0 / 12.0, 4.0 / 9.0, 1.0 / 6.0];
    for (got, want) in rep.precisions.iter().zip(want_p) {
        assert!((got - want).abs() < 1e-12);
    }
    assert_eq!((rep.hyp_len, rep.ref_len), (15, 16));
    assert!((rep.brevity_penalty - (-1.0f64 / 15.0).exp()).abs() < 1e-12);
    let want = 100.0 * (-1.0f64 / 15.0).exp() * want_p.iter().map(|p| p.ln() / 4.0).sum::<f64>().exp();
    assert!((rep.bleu - want).abs() < 1e-9);
    assert!((rep.bleu - 42.55).abs() < 0.01, "{}", rep.bleu);
    assert!(rep.smoothed.is_empty());
    let multi: Vec<Vec<Vec<String>>> = refs.iter().map(|r| vec![r.clone()]).collect();
    assert!((naive_bleu(&hyps, &multi) - rep.bleu).abs() < 1e-9);
}

#[test]
fn zero_match_orders_are_smoothed() {
    let h: Vec<String> = "a b c".split(' ').map(String::from).collect();
    let r: Vec<String> = "a x b y c".split(' ').map(String::from).collect();
    let rep = corpus_bleu(&[h.clone()], &[r.clone()]).unwrap();
    assert_eq!(rep.smoothed, vec![2, 3, 4]);
    assert!((rep.precisions[1] - 1.0 / 3.0).abs() < 1e-12);
    assert!((rep.precisions[3] - 1.0).abs() < 1e-12);
    assert!((naive_bleu(&[h], &[vec![r]]) - rep.bleu).abs() < 1e-9);
}

#[test]
fn pairwise_fixture_matches_naive_oracle() {
    let sets = read_tsv("bleu_sets.tsv");
    let got = pairwise_bleu(&sets, 3).unwrap();
    let mut want = 0.0;
    for set in &sets {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    s += naive_bleu(&[set[i].clone()], &[vec![set[j].clone()]]);
                }
            }
        }
        want += s / 6.0;
    }
    want /= sets.len() as f64;
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    assert!((sentence_bleu(&sets[0][0], &sets[0][1]) - naive_bleu(&[sets[0][0].clone()], &[vec![sets[0][1].clone()]])).abs() < 1e-9);
    assert!(pairwise_bleu(&sets, 2).is_err());
}

#[test]
fn loo_fixture_matches_naive_oracle() {
    let sets = read_tsv("bleu_sets.tsv");
    // The fixture sets double as references for a second, fixed hypothesis set.
    let hyps: Vec<Vec<Vec<String>>> = sets.iter().map(|s| vec![s[0].clone(), s[2].clone()]).collect();
    let got = loo_bleu(&hyps, &sets).unwrap();
    let mut want = 0.0;
    for j in 0..2 {
        let hj: Vec<Vec<String>> = hyps.iter().map(|s| s[j].clone()).collect();
        want += naive_bleu(&hj, &sets);
        assert!((multi_ref_bleu(&hj, &sets).unwrap().bleu - naive_bleu(&hj, &sets)).abs() < 1e-9);
    }
    want /= 2.0;
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    let single: Vec<Vec<Vec<String>>> = sets.iter().map(|s| vec![s[0].clone()]).collect();
    assert!(loo_bleu(&hyps, &single).is_err());
}

#[test]
fn degenerate_inputs() {
    let empty: Vec<Vec<String>> = Vec::new();
    assert!(corpus_bleu(&empty, &empty).is_err());
    let r = vec![vec!["a".to_string()]];
    assert_eq!(corpus_bleu(&[vec![]], &r).unwrap().bleu, 0.0);
}
