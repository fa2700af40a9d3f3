//! Parameter counts of every preset model, computed from the layout alone.
//!
//! `cargo run --example param_counts`

use pldr::config::{preset, PRESETS};
use pldr::model::{param_count, param_specs};

fn main() -> pldr::Result<()> {
    println!("{:<14} {:>6} {:>6} {:>6} {:>6} {:>12}", "model", "layers", "heads", "d_k", "ffn", "parameters");
    for name in PRESETS {
        let c = preset(name).expect("listed preset").model;
        println!(
            "{name:<14} {:>6} {:>6} {:>6} {:>6} {:>10.1} M",
            c.n_layers,
            c.n_heads,
            c.d_k,
            c.ffn_gated_size,
            param_count(&c) as f64 / 1e6
        );
    }

    let c = preset("PLDRv5-1").expect("listed preset").model;
    println!("\nlargest tensors of PLDRv5-1, first layer:");
    let mut specs: Vec<_> =
        param_specs(&c).into_iter().filter(|s| !s.name.starts_with("layer") || s.name.starts_with("layer0.")).collect();
    specs.sort_by_key(|s| std::cmp::Reverse(s.shape.iter().product::<usize>()));
    for s in specs.iter().take(8) {
        println!("  {:<28} {:?}", s.name, s.shape);
    }
    Ok(())
}
