use restorenet::gradcheck::{run_scope, SCOPES, TOLERANCE};
use restorenet::layers::HiddenGate;

fn check(scope: &str, mode: HiddenGate) {
    for seed in [1, 2] {
        let row = run_scope(scope, seed, mode).unwrap().unwrap();
        println!("{scope} {mode:?} seed {seed}: {:.3e}", row.max_rel_error);
        assert!(row.max_rel_error < TOLERANCE, "{scope} seed {seed}: {}", row.max_rel_error);
    }
}

#[test]
fn every_scope_passes_default_mode() {
    for s in SCOPES {
        check(s, HiddenGate::Output);
    }
}

#[test]
fn recurrent_scopes_pass_input_gate_mode() {
    for s in ["lstm-cell", "stacked-cell", "decoder", "cnn-lstm"] {
        check(s, HiddenGate::Input);
    }
}

#[test]
fn unknown_scope_is_none() {
    assert!(run_scope("softmax", 0, HiddenGate::Output).is_none());
}
