use dbsn_core::selftest::{fd_candidate_state, fd_state_max_rel, FdSweep};

#[test]
fn accepted_states_resolve_with_margin() {
    for c in [1usize, 3] {
        let mut resolved = 0;
        let mut kinked = 0;
        let mut seed = 0u64;
        while resolved < 5 && seed < 400 {
            if let Ok(state) = fd_candidate_state(c, 7000 + seed) {
                match fd_state_max_rel(&state).unwrap() {
                    FdSweep::MaxRel(rel) => {
                        println!("C={c} seed={} max rel {rel:.2e}", 7000 + seed);
                        assert!(rel < 1e-4, "C={c} state {} fails: {rel:e}", 7000 + seed);
                        resolved += 1;
                    }
                    FdSweep::NotSmooth { component } => {
                        println!("C={c} seed={} kinked at {component}", 7000 + seed);
                        kinked += 1;
                    }
                }
            }
            seed += 1;
        }
        assert_eq!(resolved, 5, "not enough smooth states for C={c}");
        assert!(kinked <= 3, "too many kinked states for C={c}: {kinked}");
    }
}
