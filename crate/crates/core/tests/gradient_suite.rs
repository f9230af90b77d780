//! The packaged gradient suite on the tiny model configuration.

use std::time::Instant;

use mnm_core::golfer::GolferConfig;
use mnm_core::gradsuite::{run_gradient_suite, GRADCHECK_TOL};

#[test]
fn suite_passes_on_tiny_config() {
    let start = Instant::now();
    let entries = run_gradient_suite(&GolferConfig::tiny(), 0, Some(8)).unwrap();
    for e in &entries {
        assert!(e.passed(), "{}: {} >= {GRADCHECK_TOL}", e.name, e.max_rel_error);
        assert!(e.coordinates_checked > 0, "{}", e.name);
    }
    for name in ["matmul", "layer_norm", "masked_softmax_rows", "loss.total", "model.forward_total_loss.scene0"] {
        assert!(entries.iter().any(|e| e.name == name), "missing {name}");
    }
    assert!(entries.iter().any(|e| e.name.starts_with("mnm.query.pool_concat.h2")));
    eprintln!("{} checks in {:?}", entries.len(), start.elapsed());
}
