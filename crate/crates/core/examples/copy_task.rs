//! Trains every attention variant on the copy task and prints loss summaries.

use mhelab_core::model::{Arch, Model, ModelConfig};
use mhelab_core::train::{train, CopyTask, TrainConfig};
use mhelab_core::AttentionVariant;

fn main() {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let tcfg = TrainConfig { steps, ..TrainConfig::default() };
    for v in AttentionVariant::ALL {
        let cfg = ModelConfig::new(Arch::DecoderOnly, v, 2, 4, 8, 16, 32, 0);
        let mut model = Model::<f32>::build(cfg).expect("config");
        let mut task = CopyTask::new(16, 16, 0);
        let r = train(&mut model, &mut task, &tcfg).expect("training");
        println!(
            "{:<8} initial {:.4} final {:.4} ({:.1}s)",
            v.label(),
            r.initial_loss().unwrap_or(f64::NAN),
            r.final_loss,
            r.wall_time
        );
    }
}
