// scratch probe for calibration efficacy at acceptance settings
use clusc::block::*;
use clusc::kmeans::KMeansConfig;

fn main() {
    let shape = BlockShape { model_dim: 64, n_heads: 4, mlp_dim: 172 };
    let p = BlockParams::random(shape, 100).unwrap();
    let c = compress_block(&p, 6, &KMeansConfig::new(256).with_seed(101)).unwrap();
    let x = Activations::random(128, 16, 64, 102);
    let cfg = CalibConfig::default();
    let t0 = std::time::Instant::now();
    let out = calibrate_block(&p, &c, &x, &x, &cfg).unwrap();
    println!("initial {:.6e}  best {:.6e}  ratio {:.3}  epochs_best {}  elapsed {:?}",
        out.history.initial_loss, out.history.best_loss,
        out.history.best_loss / out.history.initial_loss,
        out.history.best_epoch, t0.elapsed());
    for (i, h) in out.history.holdout_losses.iter().enumerate() {
        println!("epoch {i}: holdout {h:.6e}");
    }
}
