mod common;

use common::{composite, composite_gradcheck, OP_CASES};
use maskalign::alignment::AdaptorKind;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[test]
fn every_op_matches_central_differences() {
    for case in OP_CASES {
        for seed in SEEDS {
            let err = (case.run)(seed);
            assert!(err < 1e-4, "{} seed {seed}: relative error {err:e}", case.name);
        }
    }
}

#[test]
fn encoder_and_alignment_head_composite() {
    for seed in SEEDS {
        let err = composite_gradcheck(&mut composite(seed, AdaptorKind::Linear, false));
        assert!(err < 1e-3, "linear adaptors, seed {seed}: {err:e}");
    }
    let err = composite_gradcheck(&mut composite(11, AdaptorKind::Mlp, true));
    assert!(err < 1e-3, "mlp adaptors with [CLS]: {err:e}");
}
