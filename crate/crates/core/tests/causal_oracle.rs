mod support;

use ifsl_core::causal_graph::Dag;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{brute_force_dsep, random_dag, random_query};

proptest! {
    #[test]
    fn dsep_matches_path_enumeration(seed in any::<u64>(), n in 2usize..7, p in 0.1f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_dag(&mut rng, n, p);
        for _ in 0..5 {
            let (x, y, z) = random_query(&mut rng, &g);
            prop_assert_eq!(g.d_separated(&x, &y, &z).unwrap(), brute_force_dsep(&g, &x, &y, &z));
        }
    }

    #[test]
    fn dsep_is_symmetric(seed in any::<u64>(), n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_dag(&mut rng, n, 0.4);
        let (x, y, z) = random_query(&mut rng, &g);
        prop_assert_eq!(g.d_separated(&x, &y, &z).unwrap(), g.d_separated(&y, &x, &z).unwrap());
    }

    #[test]
    fn rule_conditions_match_oracle_on_manipulated_graphs(seed in any::<u64>(), n in 3usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_dag(&mut rng, n, 0.5);
        let (y, z, x) = random_query(&mut rng, &g);
        let none: &[String] = &[];
        let g1 = g.manipulate(&x, none).unwrap();
        prop_assert_eq!(g.rule_condition(1, &x, &y, &z, none).unwrap(), brute_force_dsep(&g1, &y, &z, &x));
        let g2 = g.manipulate(&x, &z).unwrap();
        prop_assert_eq!(g.rule_condition(2, &x, &y, &z, none).unwrap(), brute_force_dsep(&g2, &y, &z, &x));
        // with W empty, Z(W) = Z
        let cut: Vec<String> = x.iter().chain(&z).cloned().collect();
        let g3 = g.manipulate(&cut, none).unwrap();
        prop_assert_eq!(g.rule_condition(3, &x, &y, &z, none).unwrap(), brute_force_dsep(&g3, &y, &z, &x));
    }

    #[test]
    fn manipulation_only_removes_edges(seed in any::<u64>(), n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_dag(&mut rng, n, 0.5);
        let (a, b, _) = random_query(&mut rng, &g);
        let m = g.manipulate(&a, &b).unwrap();
        for (u, v) in m.edges() {
            prop_assert!(g.has_edge(u, v));
            prop_assert!(!a.iter().any(|s| s == v) && !b.iter().any(|s| s == u));
        }
        let removed = g.edges().filter(|(u, v)| !m.has_edge(u, v)).count();
        let expected = g.edges().filter(|(u, v)| a.iter().any(|s| s == v) || b.iter().any(|s| s == u)).count();
        prop_assert_eq!(removed, expected);
    }
}

#[test]
fn rule_three_excludes_ancestors_of_w() {
    // U confounds Z and Y; Z → W. Observing W keeps Z's incoming edge, so the
    // backdoor Z ← U → Y stays open. Without W the edge into Z is cut.
    let g = Dag::new(&["X", "U", "Z", "W", "Y"], &[("U", "Z"), ("U", "Y"), ("Z", "W")]).unwrap();
    assert!(!g.rule_condition(3, &["X"], &["Y"], &["Z"], &["W"]).unwrap());
    assert!(g.rule_condition(3, &["X"], &["Y"], &["Z"], &[] as &[&str]).unwrap());
}

#[test]
fn shipped_graphs() {
    let none: &[&str] = &[];
    let confounded = Dag::builtin("confounded").unwrap();
    assert!(confounded.backdoor_admissible(&["D"], "X", "Y").unwrap());
    assert!(!confounded.backdoor_admissible(none, "X", "Y").unwrap());
    assert!(Dag::builtin("many-shot")
        .unwrap()
        .is_instrumental("I", "X", "Y")
        .unwrap());
    assert!(!Dag::builtin("few-shot")
        .unwrap()
        .is_instrumental("I", "X", "Y")
        .unwrap());
}
