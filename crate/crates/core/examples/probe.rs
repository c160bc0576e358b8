use skullrecon::net::ops::*;
use skullrecon::net::tensor::Tensor;
use skullrecon::net::tape::Tape;
use skullrecon::net::model::{ModelConfig, ResUnet3d};
use std::time::Instant;

fn main() {
    // dominant conv: dec0 block conv1: (1,16,32,32,32) -> (8,...)
    let x = Tensor::<f64>::filled([1,16,32,32,32], 0.5);
    let w = Tensor::<f64>::filled([8,16,3,3,3], 0.01);
    let b = Tensor::<f64>::zeros([1,8,1,1,1]);
    let t0 = Instant::now();
    let iters = 20;
    for _ in 0..iters { let _ = conv3d_forward(&x, &w, &b, 1, 1).unwrap(); }
    let dt = t0.elapsed().as_secs_f64()/iters as f64;
    let macs = 8.0*16.0*27.0*32768.0;
    println!("conv fwd 16->8 @32^3: {:.1} ms  ({:.2} GMAC/s)", dt*1e3, macs/dt/1e9);

    let g = Tensor::<f64>::filled([1,8,32,32,32], 0.1);
    let t0 = Instant::now();
    for _ in 0..iters { let _ = conv3d_backward_input(&g, &w, [1,16,32,32,32], 1, 1); }
    let dt = t0.elapsed().as_secs_f64()/iters as f64;
    println!("conv bwd-input: {:.1} ms ({:.2} GMAC/s)", dt*1e3, macs/dt/1e9);

    let t0 = Instant::now();
    for _ in 0..iters { let _ = conv3d_backward_weight(&g, &x, [8,16,3,3,3], 1, 1); }
    let dt = t0.elapsed().as_secs_f64()/iters as f64;
    println!("conv bwd-weight: {:.1} ms ({:.2} GMAC/s)", dt*1e3, macs/dt/1e9);

    // full model fwd+bwd at 32^3
    let model = ResUnet3d::<f64>::new(&ModelConfig::default(), 1).unwrap();
    let x = Tensor::<f64>::filled([1,1,32,32,32], 0.5);
    let target = Tensor::<f64>::filled([1,1,32,32,32], 1.0);
    let t0 = Instant::now();
    for _ in 0..5 {
        let mut tape = Tape::<f64>::new();
        let xid = tape.constant(x.clone());
        let (out, _p) = model.forward_on_tape(&mut tape, xid, true).unwrap();
        let l = tape.soft_dice_loss(out, target.clone(), 1e-5).unwrap();
        tape.backward(l).unwrap();
    }
    println!("full fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64()/5.0*1e3);

    let t0 = Instant::now();
    for _ in 0..5 {
        let _ = model.predict(x.clone()).unwrap();
    }
    println!("full fwd only: {:.1} ms", t0.elapsed().as_secs_f64()/5.0*1e3);
}
