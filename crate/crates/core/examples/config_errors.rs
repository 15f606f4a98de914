//! Shows how configuration problems are reported by key path.

use cmdlab::config::RunConfig;
use serde_json::json;

fn main() {
    let c = RunConfig::default()
        .with_overrides(&[
            ("autoencoder.hidden_dim".into(), json!(0)),
            ("train.motion.batch_size".into(), json!(0)),
            ("sample.content.steps".into(), json!(4000)),
            ("motion.num_classes".into(), json!(7)),
        ])
        .expect("known keys");
    for issue in c.validate().unwrap_err().0 {
        println!("{:<26} {}", issue.key, issue.message);
    }
    if let Err(e) = RunConfig::from_json(r#"{"schedule": {"stepz": 10}}"#) {
        println!("{e}");
    }
}
