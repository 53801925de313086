//! Round-to-nearest quantizers: symmetric per-channel weights and
//! asymmetric per-token activations, with their round-trip error.

use dllmquant::numerics::{random_normal, Rng};
use dllmquant::quant::{dequantize, quantize_activation, quantize_weight, Granularity};

fn main() -> dllmquant::Result<()> {
    let mut rng = Rng::new(7);
    let w = random_normal(&mut rng, 4, 8, 1.0);
    let x = random_normal(&mut rng, 4, 8, 1.0).map(|v| v + 0.5);

    println!("bits  weight max err  act max err");
    for bits in 2..=8u8 {
        let wq = quantize_weight(&w, bits)?;
        let xq = quantize_activation(&x, bits, Granularity::PerToken)?;
        let werr = w.sub(&dequantize(&wq))?.max_abs();
        let xerr = x.sub(&dequantize(&xq))?.max_abs();
        println!("{bits:>4}  {werr:>14.6}  {xerr:>11.6}");
    }

    let q = quantize_weight(&w, 4)?;
    println!("\n4-bit codes of row 0: {:?}", &q.codes[..8]);
    println!("row scales: {:?}", q.scales);
    Ok(())
}
