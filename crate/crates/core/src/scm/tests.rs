use super::*;

fn var(name: &str, states: usize, parents: &[&str], cpt: Vec<Vec<f64>>) -> VariableSpec {
    VariableSpec {
        name: name.into(),
        states,
        parents: parents.iter().map(|p| p.to_string()).collect(),
        cpt,
    }
}

fn coins() -> DiscreteScm {
    DiscreteScm::new(vec![
        var("C", 2, &[], vec![vec![0.5, 0.5]]),
        var("X", 2, &[], vec![vec![0.5, 0.5]]),
    ])
    .unwrap()
}

/// C -> X, C -> T, X -> T with strong confounding.
fn confounded_triple() -> DiscreteScm {
    DiscreteScm::new(vec![
        var("C", 2, &[], vec![vec![0.5, 0.5]]),
        var("X", 2, &["C"], vec![vec![0.9, 0.1], vec![0.1, 0.9]]),
        var(
            "T",
            2,
            &["C", "X"],
            vec![vec![0.9, 0.1], vec![0.7, 0.3], vec![0.3, 0.7], vec![0.1, 0.9]],
        ),
    ])
    .unwrap()
}

#[test]
fn independent_coins_are_uniform() {
    let j = coins().joint().unwrap();
    assert_eq!(j.probs(), &[0.25; 4]);
}

#[test]
fn joint_normalizes_and_marginalizes() {
    for seed in 0..20 {
        let scm = confounded_scm(seed).unwrap();
        let j = scm.joint().unwrap();
        assert!((j.total() - 1.0).abs() < 1e-12);
        // D is a leaf: summing it out leaves the factorization over C, X, T.
        let mut specs = scm.specs();
        specs.pop();
        let sub = DiscreteScm::new(specs).unwrap().joint().unwrap();
        let m = j.marginalize(3);
        assert_eq!(m.cards(), sub.cards());
        for (a, b) in m.probs().iter().zip(sub.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn root_intervention_equals_conditioning() {
    for seed in 0..20 {
        let scm = confounded_scm(seed).unwrap();
        let j = scm.joint().unwrap();
        for c in 0..scm.cards()[0] {
            for (var, _) in scm.names().iter().enumerate().skip(1) {
                let doc = interventional(&scm, 0, c, var).unwrap();
                let see = j.conditional(var, &[(0, c)]).unwrap();
                for (a, b) in doc.iter().zip(&see) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn interventional_distribution_sums_to_one() {
    let scm = confounded_scm(5).unwrap();
    for x in 0..scm.cards()[1] {
        let p = interventional(&scm, 1, x, 2).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn confounding_separates_seeing_from_doing() {
    let scm = confounded_triple();
    let doing = interventional(&scm, 1, 1, 2).unwrap();
    let seeing = scm.joint().unwrap().conditional(2, &[(1, 1)]).unwrap();
    // do: 0.5 * 0.3 + 0.5 * 0.9 = 0.6; see: (0.05 * 0.3 + 0.45 * 0.9) / 0.5 = 0.84
    assert!((doing[1] - 0.6).abs() < 1e-12);
    assert!((seeing[1] - 0.84).abs() < 1e-12);
    let adjusted = backdoor_estimate(&scm, 1, 1, 2, &[0]).unwrap();
    assert!((adjusted[1] - 0.6).abs() < 1e-12);
}

#[test]
fn adjustment_without_confounding_is_plain_conditioning() {
    let scm = DiscreteScm::new(vec![
        var("C", 3, &[], vec![vec![0.2, 0.3, 0.5]]),
        var("X", 2, &[], vec![vec![0.4, 0.6]]),
        var("T", 2, &["X"], vec![vec![0.8, 0.2], vec![0.35, 0.65]]),
    ])
    .unwrap();
    let j = scm.joint().unwrap();
    for x in 0..2 {
        let adj = backdoor_estimate(&scm, 1, x, 2, &[0]).unwrap();
        let see = j.conditional(2, &[(1, x)]).unwrap();
        for (a, b) in adj.iter().zip(&see) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_strata_average_the_conditionals() {
    let scm = confounded_triple();
    let adj = backdoor_estimate(&scm, 1, 0, 2, &[0]).unwrap();
    // P(T=1 | X=0, C=0) = 0.1, P(T=1 | X=0, C=1) = 0.7
    assert!((adj[1] - 0.4).abs() < 1e-12);
}

#[test]
fn empty_stratum_is_an_error() {
    let scm = DiscreteScm::new(vec![
        var("C", 2, &[], vec![vec![0.5, 0.5]]),
        var("X", 2, &["C"], vec![vec![1.0, 0.0], vec![0.5, 0.5]]),
        var("T", 2, &["X"], vec![vec![0.5, 0.5], vec![0.5, 0.5]]),
    ])
    .unwrap();
    let err = backdoor_estimate(&scm, 1, 1, 2, &[0]).unwrap_err();
    match err {
        Error::UndefinedConditional(s) => assert!(s.contains("C=0"), "{s}"),
        other => panic!("{other}"),
    }
}

#[test]
fn backdoor_matches_surgery_on_random_models() {
    let r = backdoor_suite(100, 1).unwrap();
    assert!(r.max_abs_diff < 1e-12, "{r:?}");
    assert!(r.max_confounding_gap > 1e-3);
}

#[test]
fn d_separation_is_sound() {
    let parents = vec![vec![], vec![0], vec![0], vec![1, 2], vec![3], vec![2]];
    let dag = Dag::new(parents.clone()).unwrap();
    for seed in 0..5 {
        let scm = random_cpts(&["a", "b", "c", "d", "e", "f"], &parents, &[2, 3, 2, 2, 3, 2], seed).unwrap();
        let j = scm.joint().unwrap();
        let mut checked = 0;
        for x in 0..6 {
            for y in x + 1..6 {
                for zmask in 0u32..64 {
                    if zmask & (1 << x) != 0 || zmask & (1 << y) != 0 || zmask.count_ones() > 2 {
                        continue;
                    }
                    let zs: Vec<usize> = (0..6).filter(|v| zmask & (1 << v) != 0).collect();
                    if dag.d_separated(&[x], &[y], &zs) {
                        assert!(j.independence_gap(x, y, &zs) < 1e-12, "{x} {y} {zs:?}");
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 10);
    }
}

fn fixture(kind: &str, seed: u64) -> DiscreteScm {
    let parents = match kind {
        // X -> Z -> Y
        "chain" => vec![vec![], vec![0], vec![1]],
        // Z <- X -> Y
        "fork" => vec![vec![], vec![0], vec![0]],
        _ => vec![vec![], vec![], vec![]],
    };
    random_cpts(&["X", "Z", "Y"], &parents, &[2, 3, 2], seed).unwrap()
}

#[test]
fn disconnected_fixture_satisfies_all_rules() {
    let r = verify_docalculus_rules(&fixture("disconnected", 3), "X", "Z", "Y").unwrap();
    assert!(r.rules.iter().all(|o| o.premise && o.equality == Some(true)));
}

#[test]
fn chain_fixture_rule_two() {
    let r = verify_docalculus_rules(&fixture("chain", 4), "X", "Z", "Y").unwrap();
    assert!(r.rules[1].premise);
    assert_eq!(r.rules[1].equality, Some(true));
    assert!(!r.rules[0].premise);
    assert_eq!(r.rules[0].equality, None);
    assert!(!r.rules[2].premise);
    assert!(r.all_verified());
}

#[test]
fn fork_fixture_rules() {
    let r = verify_docalculus_rules(&fixture("fork", 5), "X", "Z", "Y").unwrap();
    assert!(r.rules.iter().all(|o| o.premise && o.equality == Some(true)), "{r:?}");
}

#[test]
fn definition_file_roundtrip() {
    let scm = confounded_scm(11).unwrap();
    let text = scm.to_toml_string().unwrap();
    let back = DiscreteScm::from_toml_str(&text).unwrap();
    assert_eq!(back, scm);
}

#[test]
fn invalid_models_are_rejected() {
    let bad_row = vec![var("A", 2, &[], vec![vec![0.5, 0.6]])];
    assert!(DiscreteScm::new(bad_row).is_err());
    let cycle = vec![
        var("A", 2, &["B"], vec![vec![0.5, 0.5], vec![0.5, 0.5]]),
        var("B", 2, &["A"], vec![vec![0.5, 0.5], vec![0.5, 0.5]]),
    ];
    assert!(DiscreteScm::new(cycle).is_err());
    let text = "[[variable]]\nname = \"A\"\nstates = 2\ncpt = [[0.5, 0.5]]\ncolour = 1\n";
    assert!(DiscreteScm::from_toml_str(text).is_err());
}

#[test]
fn oversized_joint_is_refused() {
    let specs = (0..7)
        .map(|i| var(&format!("v{i}"), 8, &[], vec![vec![0.125; 8]]))
        .collect();
    let scm = DiscreteScm::new(specs).unwrap();
    assert!(matches!(scm.joint(), Err(Error::SizeLimit(2_097_152))));
}
